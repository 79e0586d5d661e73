import os
import sys

import pytest

ROOT: str = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from pri_enclave import HostInterface, Platform  # noqa: E402
from pri_settings import Settings  # noqa: E402
from rule_record import Rule, RuleAction, RuleKind  # noqa: E402

SCENARIO_DIR: str = os.path.join(ROOT, "scenarios")
RULE_DIR: str = os.path.join(ROOT, "rules")


def rule_id(n: int) -> bytes:
    return n.to_bytes(16, "big")


def exact(n: int, pattern: bytes, action: RuleAction = RuleAction.alert, span: int | None = None) -> Rule:
    return Rule(rule_id(n), RuleKind.exact, action, span or len(pattern), pattern)


def regex(n: int, source: bytes, span: int, action: RuleAction = RuleAction.alert) -> Rule:
    return Rule(rule_id(n), RuleKind.regex, action, span, source)


class Outbox:
    """Collects what an enclave sends, keyed by address."""

    def __init__(self) -> None:
        self.frames: list[tuple[str, bytes]] = []

    def __call__(self, address: str, frame: bytes) -> None:
        self.frames.append((address, frame))

    def to(self, address: str) -> list[bytes]:
        return [frame for dest, frame in self.frames if dest == address]


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(
        store_dir=str(tmp_path / "store"),
        sim_database_path=str(tmp_path / "sim.sqlite"),
    )


@pytest.fixture
def outbox() -> Outbox:
    return Outbox()


@pytest.fixture
def host(tmp_path, outbox) -> HostInterface:
    return HostInterface(outbox, str(tmp_path / "store"))


@pytest.fixture(scope="session")
def platform() -> Platform:
    return Platform.generate()
