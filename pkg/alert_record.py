"""Provides a class for storing alerts.

Provides the class `Alert` for the content-free notification the inspector
sends to the SIM sink, and the enum `AlertType`.
"""

from enum import IntEnum

from pri_wire import ID_SIZE, ZERO_ID, MsgType, WireFormatError, encode_frame, expect_end, take, take_int


class AlertType(IntEnum):
    match = 0
    decrypt_fail = 1
    missing_key = 2


class Alert:
    """Represents an alert.

    Class for representing an alert. An alert carries a rule identifier (only
    for `match` alerts), the session it concerns and a timestamp. It never
    carries plaintext or pattern bytes.

    Serialized as `alert_type(1) ‖ rule_id(16) ‖ session_id(16) ‖ timestamp(8BE)`.
    """

    BODY_SIZE: int = 1 + ID_SIZE + ID_SIZE + 8

    def __init__(self, alert_type: AlertType, rule_id: bytes, session_id: bytes, timestamp: int) -> None:
        """Creates an Alert object.

        Args:
            alert_type (AlertType): Why the alert was raised.
            rule_id (bytes): Rule that matched, all-zero unless `alert_type` is `match`.
            session_id (bytes): Session the alert concerns.
            timestamp (int): Milliseconds since the epoch.
        """
        self.alert_type: AlertType = AlertType(alert_type)
        self.rule_id: bytes = bytes(rule_id) if self.alert_type == AlertType.match else ZERO_ID
        self.session_id: bytes = bytes(session_id)
        self.timestamp: int = int(timestamp)

    def __iter__(self):
        """Allows for iterating over attributes.

        Allows for iterating over attributes and casting to other
        data structures.
        """
        yield "alert_type", self.alert_type.name
        yield "rule_id", self.rule_id.hex()
        yield "session_id", self.session_id.hex()
        yield "timestamp", self.timestamp

    def to_dict(self) -> dict:
        """Returns dict representation of Alert."""
        return dict(self)

    def to_tuple(self) -> tuple:
        """Returns tuple representation of Alert."""
        return tuple(dict(self).values())

    def key(self) -> tuple[AlertType, bytes, bytes]:
        """Returns the alert without its timestamp, for multiset comparisons."""
        return self.alert_type, self.rule_id, self.session_id

    def to_body(self) -> bytes:
        return bytes([int(self.alert_type)]) + self.rule_id + self.session_id + self.timestamp.to_bytes(8, "big")

    def to_frame(self) -> bytes:
        return encode_frame(MsgType.ALERT, self.to_body())

    @classmethod
    def from_body(cls, body: bytes) -> "Alert":
        """Parses an Alert message body.

        Raises:
            WireFormatError: Raised on a malformed body or an unknown alert type.
        """
        alert_type, offset = take_int(body, 0, 1)
        rule_id, offset = take(body, offset, ID_SIZE)
        session_id, offset = take(body, offset, ID_SIZE)
        timestamp, offset = take_int(body, offset, 8)
        expect_end(body, offset)
        try:
            kind: AlertType = AlertType(alert_type)
        except ValueError as e:
            raise WireFormatError(f"Unknown alert type {alert_type}.") from e
        return cls(kind, rule_id, session_id, timestamp)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Alert):
            return NotImplemented
        return self.to_body() == other.to_body()

    def __hash__(self) -> int:
        return hash(self.to_body())

    def __repr__(self) -> str:
        return str(dict(self))


if __name__ == "__main__":
    from rich import print

    x = Alert(AlertType.match, bytes(range(16)), bytes(16), 0)
    print(f"Dictionary: {dict(x)}")
    print(f"Frame: {x.to_frame().hex()}")
