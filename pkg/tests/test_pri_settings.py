import io
import json
import logging
import os

import pytest
from rich.console import Console
from rich.logging import RichHandler

from pri_logging import LogCapture, configure_logging
from pri_settings import BASE_DIR, Settings, SettingsError, load_settings


def test_bundled_settings_file_matches_the_defaults():
    assert load_settings().to_dict() == Settings().to_dict()


def test_settings_file_overrides_some_keys(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({"theta_static": 0.5, "key_buffer_limit": 10}))
    settings = load_settings(str(path))
    assert settings.theta_static == 0.5 and settings.key_buffer_limit == 10
    assert settings.max_span_cap == 4096


@pytest.mark.parametrize("content", [json.dumps({"thetta": 1}), json.dumps([1, 2])])
def test_bad_settings_files(tmp_path, content):
    path = tmp_path / "settings.json"
    path.write_text(content)
    with pytest.raises(SettingsError):
        load_settings(str(path))


def test_overrides_ignore_none_and_keep_the_original():
    settings = Settings()
    changed = settings.with_overrides(max_span_cap=64, theta_dynamic=None)
    assert changed.max_span_cap == 64 and changed.theta_dynamic == settings.theta_dynamic
    assert settings.max_span_cap == 4096


def test_relative_paths_resolve_against_the_package():
    settings = Settings()
    assert settings.resolve_path(settings.corpus_path) == os.path.join(BASE_DIR, "data", "english_corpus.txt")
    assert settings.resolve_path("/tmp/x") == "/tmp/x"


def test_log_capture_collects_and_restores():
    root = logging.getLogger()
    level = root.level
    with LogCapture() as capture:
        logging.getLogger("pri_test").debug("session %s closed", "ab12")
    assert capture.as_bytes() == b"pri_test: session ab12 closed"
    assert capture not in root.handlers
    assert root.level == level


def test_configure_logging_installs_one_rich_handler():
    console = Console(file=io.StringIO())
    configure_logging(False, console)
    configure_logging(True, console)
    handlers = [handler for handler in logging.getLogger().handlers if isinstance(handler, RichHandler)]
    assert len(handlers) == 1
    assert logging.getLogger().level == logging.DEBUG
