"""Provides the SIM sink and its SQLite alert table.

Provides the class `SimSinkDatabase` for accessing a SQLite database holding
the `alerts` table, and `SimSink`, the receiving end of the enclave's alerts.
Alerts carry no traffic content, so the sink may live outside the enclave.
"""

import logging
import sqlite3
from collections import Counter

from pypika import Column, Columns, Field, Order, Query
from pypika.functions import Count

from alert_record import Alert, AlertType
from pri_wire import MsgType, WireFormatError, decode_frame

logger = logging.getLogger(__name__)


class SimSinkDatabase:
    """Class to operate the SIM sink's SQLite3 database.

    One connection is kept for the lifetime of the instance. Inserts are
    committed in batches of `COMMIT_EVERY`; reads, `commit` and `close` flush
    the rest.
    """

    COMMIT_EVERY: int = 256

    __alerts_table_name: str = "alerts"

    __alerts_columns: list[Column] = Columns(
        ("seq", "INTEGER PRIMARY KEY"),
        ("alert_type", "TEXT"),
        ("rule_id", "TEXT"),
        ("session_id", "TEXT"),
        ("timestamp", "INTEGER"),
    )

    def __init__(self, file_path: str) -> None:
        """Creates an instance of SimSinkDatabase.

        Args:
            file_path (str): File path for the SQLite3 database.
        """
        self.database_path: str = file_path
        self._conn: sqlite3.Connection | None = sqlite3.connect(file_path)
        self._uncommitted: int = 0

    def __enter__(self) -> "SimSinkDatabase":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    @classmethod
    def get_alerts_table_name(cls) -> str:
        return cls.__alerts_table_name

    @classmethod
    def get_alerts_columns(cls) -> list[Column]:
        return cls.__alerts_columns

    def _connection(self) -> sqlite3.Connection:
        if self._conn is None:
            raise sqlite3.ProgrammingError(f"Database {self.database_path} is closed.")
        return self._conn

    def _execute(self, query: Query) -> list[tuple]:
        self.commit()
        cursor: sqlite3.Cursor = self._connection().cursor()
        cursor.execute(str(query))
        rows: list[tuple] = cursor.fetchall()
        self._connection().commit()
        return rows

    def commit(self) -> None:
        if self._uncommitted:
            self._connection().commit()
            self._uncommitted = 0

    def close(self) -> None:
        """Commits pending inserts and closes the connection; closing twice is harmless."""
        if self._conn is None:
            return
        self.commit()
        self._conn.close()
        self._conn = None

    def create_table(self) -> None:
        """Creates the `alerts` table if it does not exist."""
        self._execute(Query.create_table(self.__alerts_table_name).columns(*self.__alerts_columns).if_not_exists())

    def drop_table(self) -> None:
        self._execute(Query.drop_table(self.__alerts_table_name).if_exists())

    def insert_alert(self, seq: int, alert: Alert) -> None:
        """Inserts an alert into the `alerts` table.

        Args:
            seq (int): Arrival order of the alert at the sink.
            alert (Alert): The alert.
        """
        self._connection().execute(str(Query.into(self.__alerts_table_name).insert(seq, *alert.to_tuple())))
        self._uncommitted += 1
        if self._uncommitted >= self.COMMIT_EVERY:
            self.commit()

    def _to_alert(self, row: tuple) -> Alert:
        _, alert_type, rule_id, session_id, timestamp = row
        return Alert(AlertType[alert_type], bytes.fromhex(rule_id), bytes.fromhex(session_id), timestamp)

    def select_all_alerts(self) -> list[Alert]:
        """Returns every alert in arrival order."""
        query: Query = Query.from_(self.__alerts_table_name).select("*").orderby("seq", order=Order.asc)
        return [self._to_alert(row) for row in self._execute(query)]

    def select_alerts_by_session(self, session_id: bytes) -> list[Alert]:
        query: Query = (
            Query.from_(self.__alerts_table_name)
            .select("*")
            .where(Field("session_id") == bytes(session_id).hex())
            .orderby("seq", order=Order.asc)
        )
        return [self._to_alert(row) for row in self._execute(query)]

    def count_alerts_by_type(self) -> dict[AlertType, int]:
        """Returns the number of alerts per type; absent types count zero."""
        query: Query = (
            Query.from_(self.__alerts_table_name).select(Field("alert_type"), Count("*")).groupby(Field("alert_type"))
        )
        counts: dict[AlertType, int] = {alert_type: 0 for alert_type in AlertType}
        for alert_type, count in self._execute(query):
            counts[AlertType[alert_type]] = count
        return counts


class SimSink:
    """Receives Alert frames, keeps them in arrival order and optionally records them."""

    def __init__(self, database: SimSinkDatabase | None = None) -> None:
        self.alerts: list[Alert] = []
        self.database: SimSinkDatabase | None = database
        if database is not None:
            database.create_table()

    def receive(self, frame: bytes) -> Alert:
        """Accepts one Alert frame.

        Raises:
            WireFormatError: Raised for anything but a well-formed Alert frame.
        """
        msg_type, body, _ = decode_frame(frame)
        if msg_type != MsgType.ALERT:
            raise WireFormatError(f"SIM sink expects ALERT, got {msg_type.name}.")
        alert: Alert = Alert.from_body(body)
        if self.database is not None:
            self.database.insert_alert(len(self.alerts), alert)
        self.alerts.append(alert)
        logger.debug("alert %s for session %s", alert.alert_type.name, alert.session_id.hex())
        return alert

    def alert_keys(self) -> Counter:
        """Returns the alerts as a multiset of (type, rule, session)."""
        return Counter(alert.key() for alert in self.alerts)
