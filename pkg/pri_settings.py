"""Provides the configuration used by every PRI component.

Provides the class `Settings` holding the tunable limits and thresholds of the
inspection server and the simulation harness, and `load_settings` for reading
them from a JSON file (by default `pri_settings.json` next to this module).
"""

import json
import os
from typing import Any

# Absolute address for files to prevent issues with
# relative addresses when running from another directory
BASE_DIR: str = os.path.dirname(__file__)

DEFAULT_SETTINGS_FILE: str = os.path.join(BASE_DIR, "pri_settings.json")


class SettingsError(Exception):
    """Exception raised when a settings file holds unknown or invalid keys."""


class Settings:
    """Represents the tunables of a PRI deployment.

    Class for representing thresholds and limits. Relative paths are
    resolved against `BASE_DIR` by `resolve_path`.
    """

    def __init__(
        self,
        theta_static: float = 1e-4,
        theta_dynamic: float = 1e-3,
        max_record_payload: int = 16384,
        max_span_cap: int = 4096,
        key_buffer_limit: int = 1 << 20,
        viewer_token_ttl_s: int = 300,
        max_generated_length: int = 64 << 20,
        min_corpus_length: int = 100_000,
        store_dir: str = "store",
        corpus_path: str = "data/english_corpus.txt",
        sim_database_path: str = "database/sim_alerts.sqlite",
    ) -> None:
        """Creates a Settings object.

        Args:
            theta_static (float): Flag threshold for matches per corpus byte.
            theta_dynamic (float): Flag threshold for hits per inspected traffic byte.
            max_record_payload (int): Largest plaintext chunk a traffic record may carry.
            max_span_cap (int): Largest max_span a rule may declare.
            key_buffer_limit (int): Bytes buffered per session while its key is missing.
            viewer_token_ttl_s (int): Lifetime of a viewer token in seconds.
            max_generated_length (int): Largest generated traffic stream.
            min_corpus_length (int): Smallest reference corpus accepted by the static audit.
            store_dir (str): Directory holding sealed storage.
            corpus_path (str): Bundled English reference corpus.
            sim_database_path (str): SQLite file of the SIM alert sink.
        """
        self.theta_static: float = float(theta_static)
        self.theta_dynamic: float = float(theta_dynamic)
        self.max_record_payload: int = int(max_record_payload)
        self.max_span_cap: int = int(max_span_cap)
        self.key_buffer_limit: int = int(key_buffer_limit)
        self.viewer_token_ttl_s: int = int(viewer_token_ttl_s)
        self.max_generated_length: int = int(max_generated_length)
        self.min_corpus_length: int = int(min_corpus_length)
        self.store_dir: str = store_dir
        self.corpus_path: str = corpus_path
        self.sim_database_path: str = sim_database_path

    def __iter__(self):
        """Allows for iterating over attributes.

        Allows for iterating over attributes and casting to other
        data structures.
        """
        yield "theta_static", self.theta_static
        yield "theta_dynamic", self.theta_dynamic
        yield "max_record_payload", self.max_record_payload
        yield "max_span_cap", self.max_span_cap
        yield "key_buffer_limit", self.key_buffer_limit
        yield "viewer_token_ttl_s", self.viewer_token_ttl_s
        yield "max_generated_length", self.max_generated_length
        yield "min_corpus_length", self.min_corpus_length
        yield "store_dir", self.store_dir
        yield "corpus_path", self.corpus_path
        yield "sim_database_path", self.sim_database_path

    def to_dict(self) -> dict[str, Any]:
        """Returns dict representation of Settings.

        Returns:
            A dict representation of the Settings object.
        """
        return dict(self)

    def with_overrides(self, **values: Any) -> "Settings":
        """Returns a copy with some values replaced.

        Args:
            **values: Settings keys and their new values. `None` values are ignored.

        Raises:
            SettingsError: Raised when a key is not a known setting.

        Returns:
            Settings: The new Settings object.
        """
        merged: dict[str, Any] = self.to_dict()
        for key, value in values.items():
            if key not in merged:
                raise SettingsError(f"Unknown setting '{key}'.")
            if value is not None:
                merged[key] = value
        return Settings(**merged)

    def resolve_path(self, path: str) -> str:
        """Returns an absolute path for a configured path.

        Args:
            path (str): A path from these settings.

        Returns:
            str: `path` itself when absolute, else joined onto `BASE_DIR`.
        """
        if os.path.isabs(path):
            return path
        return os.path.join(BASE_DIR, path)

    def __repr__(self) -> str:
        """Returns a str representation."""
        return str(dict(self))


def load_settings(file_path: str | None = None) -> Settings:
    """Reads settings from a JSON file.

    Keys missing from the file keep their defaults.

    Args:
        file_path (str | None): Path to the JSON file. Defaults to `pri_settings.json`.

    Raises:
        SettingsError: Raised when the file holds unknown keys or is not a JSON object.

    Returns:
        Settings: The loaded settings.
    """
    if file_path is None:
        file_path = DEFAULT_SETTINGS_FILE

    with open(file_path, "r") as file:
        data = json.load(file)

    if not isinstance(data, dict):
        raise SettingsError(f"Settings file '{file_path}' must hold a JSON object.")

    return Settings().with_overrides(**data)


if __name__ == "__main__":
    from rich import print

    print(load_settings())
