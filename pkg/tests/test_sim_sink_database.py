import sqlite3

import pytest

from alert_record import Alert, AlertType
from pri_wire import MsgType, WireFormatError, encode_frame
from sim_sink_database import SimSink, SimSinkDatabase

SESSION_A: bytes = b"\x0a" * 16
SESSION_B: bytes = b"\x0b" * 16


@pytest.fixture
def database(tmp_path) -> SimSinkDatabase:
    with SimSinkDatabase(str(tmp_path / "alerts.sqlite")) as database:
        database.create_table()
        yield database


def test_alerts_table_round_trip(database):
    first = Alert(AlertType.match, b"r" * 16, SESSION_A, 10)
    second = Alert(AlertType.decrypt_fail, b"r" * 16, SESSION_B, 11)
    database.insert_alert(0, first)
    database.insert_alert(1, second)
    assert [alert.to_dict() for alert in database.select_all_alerts()] == [first.to_dict(), second.to_dict()]
    assert [alert.key() for alert in database.select_alerts_by_session(SESSION_B)] == [
        (AlertType.decrypt_fail, bytes(16), SESSION_B)
    ]


def test_count_by_type_reports_zeros(database):
    database.insert_alert(0, Alert(AlertType.match, b"r" * 16, SESSION_A, 1))
    database.insert_alert(1, Alert(AlertType.match, b"q" * 16, SESSION_A, 2))
    assert database.count_alerts_by_type() == {
        AlertType.match: 2,
        AlertType.decrypt_fail: 0,
        AlertType.missing_key: 0,
    }


def test_drop_table_clears_alerts(database):
    database.insert_alert(0, Alert(AlertType.missing_key, bytes(16), SESSION_A, 1))
    database.drop_table()
    database.create_table()
    assert database.select_all_alerts() == []


def test_sink_records_alert_frames(database):
    sink = SimSink(database)
    alert = Alert(AlertType.match, b"r" * 16, SESSION_A, 5)
    assert sink.receive(alert.to_frame()).key() == alert.key()
    assert sink.alert_keys()[alert.key()] == 1
    assert [row.key() for row in database.select_all_alerts()] == [alert.key()]


def test_sink_accepts_only_alerts():
    sink = SimSink()
    with pytest.raises(WireFormatError):
        sink.receive(encode_frame(MsgType.TRAFFIC_RECORD, b"s" * 28))
    with pytest.raises(WireFormatError):
        sink.receive(b"not a frame")
    assert sink.alerts == []


def test_inserts_are_committed_in_batches_and_on_close(tmp_path):
    path = str(tmp_path / "alerts.sqlite")
    database = SimSinkDatabase(path)
    database.create_table()
    for seq in range(SimSinkDatabase.COMMIT_EVERY + 3):
        database.insert_alert(seq, Alert(AlertType.match, b"r" * 16, SESSION_A, seq))

    with SimSinkDatabase(path) as reader:
        assert len(reader.select_all_alerts()) == SimSinkDatabase.COMMIT_EVERY
    database.close()
    database.close()
    with SimSinkDatabase(path) as reader:
        assert len(reader.select_all_alerts()) == SimSinkDatabase.COMMIT_EVERY + 3
    with pytest.raises(sqlite3.ProgrammingError):
        database.insert_alert(0, Alert(AlertType.match, b"r" * 16, SESSION_A, 0))
