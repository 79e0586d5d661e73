"""Provides logging setup for the PRI command line tools.

Every module logs through `logging.getLogger(__name__)`; this module installs a
`rich` handler on the root logger once, from the CLI.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler

LOG_FORMAT: str = "%(name)s: %(message)s"


def configure_logging(verbose: bool = False, console: Console | None = None) -> None:
    """Routes log records to a RichHandler.

    Args:
        verbose (bool): Log DEBUG records when True, INFO otherwise.
        console (Console | None): Console to write to. Defaults to stderr.
    """
    if console is None:
        console = Console(stderr=True)

    root: logging.Logger = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)

    handler: RichHandler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class LogCapture(logging.Handler):
    """Keeps every formatted log message emitted while installed.

    The simulation harness installs one for a run so that log output is
    part of what the confidentiality scan inspects.
    """

    def __init__(self) -> None:
        super().__init__(level=logging.DEBUG)
        self.messages: list[str] = []
        self.setFormatter(logging.Formatter(LOG_FORMAT))

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(self.format(record))

    def __enter__(self) -> "LogCapture":
        root: logging.Logger = logging.getLogger()
        self._previous_level: int = root.level
        root.addHandler(self)
        if root.level > logging.DEBUG or root.level == logging.NOTSET:
            root.setLevel(logging.DEBUG)
        return self

    def __exit__(self, *exc_info) -> None:
        root: logging.Logger = logging.getLogger()
        root.removeHandler(self)
        root.setLevel(self._previous_level)

    def as_bytes(self) -> bytes:
        """Returns all captured messages as one UTF-8 byte string."""
        return "\n".join(self.messages).encode("utf-8", errors="replace")
