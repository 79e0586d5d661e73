import json
import os

import pandas as pd
import pytest

from conftest import RULE_DIR, SCENARIO_DIR
from main import EXIT_INPUT, EXIT_OK, main
from pri_wire import KeyDeliveryMessage, MsgType, WireLog, decode_frame

CORPUS: str = os.path.join(os.path.dirname(RULE_DIR), "data", "english_corpus.txt")


def test_run_writes_report_and_wire_log(tmp_path):
    report, wire_log = str(tmp_path / "report.json"), str(tmp_path / "wire.bin")
    scenario = os.path.join(SCENARIO_DIR, "two_users.json")
    assert main(["run", scenario, "--report", report, "--wire-log", wire_log]) == EXIT_OK
    with open(report) as file:
        assert json.load(file)["viewer_counts"] == {"alice": 2, "bob": 3}
    assert len(WireLog.read(wire_log).frames(MsgType.KEY_DELIVERY)) == 2


def test_run_mode_override(tmp_path):
    scenario = os.path.join(SCENARIO_DIR, "basic_detect.json")
    assert main(["run", scenario, "--mode", "prevent", "--workdir", str(tmp_path)]) == EXIT_OK
    assert os.path.exists(tmp_path / "sim_alerts.sqlite")


def test_bad_scenarios_exit_with_3(tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_INPUT
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"sessions": [{"name": "s", "owner": "nobody"}]}))
    assert main(["run", str(broken)]) == EXIT_INPUT


def test_audit_command(tmp_path):
    csv = str(tmp_path / "audit.csv")
    assert main(["audit", "--policy", os.path.join(RULE_DIR, "abuse.rules"), "--corpus", CORPUS, "--csv", csv]) == EXIT_OK
    assert pd.read_csv(csv)["static_abnormal"].tolist() == [True, False]


def test_audit_needs_a_large_enough_corpus(tmp_path):
    corpus = tmp_path / "tiny.txt"
    corpus.write_bytes(b"tiny")
    assert main(["audit", "--policy", os.path.join(RULE_DIR, "abuse.rules"), "--corpus", str(corpus)]) == EXIT_INPUT


def test_agent_and_viewer_share_a_workspace(tmp_path):
    workspace = str(tmp_path / "ws")
    assert main(["agent", "register", "--workspace", workspace, "--user", "alice", "--key-seed", "4"]) == EXIT_OK
    assert os.path.exists(os.path.join(workspace, "users", "alice.json"))
    assert "userkeys.sealed" in os.listdir(os.path.join(workspace, "store"))

    out = str(tmp_path / "delivery.bin")
    assert main(["agent", "export-key", "--workspace", workspace, "--user", "alice", "--counter", "7", "--out", out]) == EXIT_OK
    with open(out, "rb") as file:
        frame = file.read()
    assert len(frame) == KeyDeliveryMessage.FRAME_SIZE
    assert KeyDeliveryMessage.from_body(decode_frame(frame)[1]).counter == 7

    assert main(["viewer", "fetch", "--workspace", workspace, "--user", "alice"]) == EXIT_OK


def test_unknown_workspace_user_exits_with_3(tmp_path):
    assert main(["viewer", "fetch", "--workspace", str(tmp_path), "--user", "ghost"]) == EXIT_INPUT


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit):
        main([])
