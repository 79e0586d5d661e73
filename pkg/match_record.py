"""Provides classes for storing matches.

Provides the class `Match` for one rule hit on a session's plaintext stream,
`MatchRecord` for a match as persisted in a user's sealed match log, and
`ViewerMatch` for the rule-free form of a match returned to the user's viewer.
"""

from pri_wire import ID_SIZE, ZERO_ID, WireFormatError, take, take_int


class Match:
    """Represents one rule hit.

    Offsets are global plaintext byte offsets of the session stream, end
    exclusive, and `matched_bytes` is exactly `plaintext[start:end]`.
    """

    __slots__ = ("rule_id", "session_id", "start_offset", "end_offset", "matched_bytes")

    def __init__(
        self,
        rule_id: bytes,
        session_id: bytes,
        start_offset: int,
        end_offset: int,
        matched_bytes: bytes,
    ) -> None:
        self.rule_id: bytes = bytes(rule_id)
        self.session_id: bytes = bytes(session_id)
        self.start_offset: int = int(start_offset)
        self.end_offset: int = int(end_offset)
        self.matched_bytes: bytes = bytes(matched_bytes)

    def __iter__(self):
        yield "rule_id", self.rule_id.hex()
        yield "session_id", self.session_id.hex()
        yield "start_offset", self.start_offset
        yield "end_offset", self.end_offset
        yield "matched_bytes", self.matched_bytes.hex()

    def to_dict(self) -> dict:
        return dict(self)

    def key(self) -> tuple[bytes, int, int]:
        """Returns `(rule_id, start, end)`, the identity used by oracles."""
        return self.rule_id, self.start_offset, self.end_offset

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Match):
            return NotImplemented
        return (self.key(), self.session_id, self.matched_bytes) == (
            other.key(),
            other.session_id,
            other.matched_bytes,
        )

    def __hash__(self) -> int:
        return hash((self.key(), self.session_id))

    def __repr__(self) -> str:
        return f"Match(rule={self.rule_id.hex()}, span=[{self.start_offset}, {self.end_offset}))"


class MatchRecord:
    """Represents a stored match: owner, match and storage timestamp.

    Serialized inside a sealed blob as
    `owner(16) ‖ session_id(16) ‖ rule_id(16) ‖ start(8) ‖ end(8) ‖ timestamp(8) ‖ len(4) ‖ bytes`.
    """

    def __init__(self, owner: bytes, match: Match, timestamp: int) -> None:
        """Creates a MatchRecord.

        Args:
            owner (bytes): user_id of the session's owner.
            match (Match): The rule hit.
            timestamp (int): Milliseconds since the epoch.
        """
        self.owner: bytes = bytes(owner)
        self.match: Match = match
        self.timestamp: int = int(timestamp)

    def __iter__(self):
        yield "owner", self.owner.hex()
        yield "timestamp", self.timestamp
        yield from self.match

    def to_dict(self) -> dict:
        return dict(self)

    def to_bytes(self) -> bytes:
        m: Match = self.match
        return (
            self.owner
            + m.session_id
            + m.rule_id
            + m.start_offset.to_bytes(8, "big")
            + m.end_offset.to_bytes(8, "big")
            + self.timestamp.to_bytes(8, "big")
            + len(m.matched_bytes).to_bytes(4, "big")
            + m.matched_bytes
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MatchRecord":
        owner, offset = take(data, 0, ID_SIZE)
        session_id, offset = take(data, offset, ID_SIZE)
        rule_id, offset = take(data, offset, ID_SIZE)
        start, offset = take_int(data, offset, 8)
        end, offset = take_int(data, offset, 8)
        timestamp, offset = take_int(data, offset, 8)
        length, offset = take_int(data, offset, 4)
        matched, offset = take(data, offset, length)
        if offset != len(data):
            raise WireFormatError("Trailing bytes after match record.")
        return cls(owner, Match(rule_id, session_id, start, end, matched), timestamp)

    def to_viewer_match(self) -> "ViewerMatch":
        """Drops the rule identifier; the viewer never learns which rule fired."""
        m: Match = self.match
        return ViewerMatch(m.session_id, m.start_offset, m.end_offset, m.matched_bytes, self.timestamp)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MatchRecord):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __repr__(self) -> str:
        return f"MatchRecord(owner={self.owner.hex()}, {self.match!r})"


class ViewerMatch:
    """A matched traffic part as shown to its owner, without any rule identity.

    Serialized as `session_id(16) ‖ start(8) ‖ end(8) ‖ timestamp(8) ‖ len(4) ‖ bytes`.
    """

    def __init__(self, session_id: bytes, start_offset: int, end_offset: int, matched_bytes: bytes, timestamp: int) -> None:
        self.session_id: bytes = bytes(session_id)
        self.start_offset: int = int(start_offset)
        self.end_offset: int = int(end_offset)
        self.matched_bytes: bytes = bytes(matched_bytes)
        self.timestamp: int = int(timestamp)

    def __iter__(self):
        yield "session_id", self.session_id.hex()
        yield "start_offset", self.start_offset
        yield "end_offset", self.end_offset
        yield "matched_bytes", self.matched_bytes.hex()
        yield "timestamp", self.timestamp

    def to_dict(self) -> dict:
        return dict(self)

    def to_bytes(self) -> bytes:
        return (
            self.session_id
            + self.start_offset.to_bytes(8, "big")
            + self.end_offset.to_bytes(8, "big")
            + self.timestamp.to_bytes(8, "big")
            + len(self.matched_bytes).to_bytes(4, "big")
            + self.matched_bytes
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["ViewerMatch", int]:
        session_id, offset = take(data, offset, ID_SIZE)
        start, offset = take_int(data, offset, 8)
        end, offset = take_int(data, offset, 8)
        timestamp, offset = take_int(data, offset, 8)
        length, offset = take_int(data, offset, 4)
        matched, offset = take(data, offset, length)
        return cls(session_id, start, end, matched, timestamp), offset

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ViewerMatch):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __repr__(self) -> str:
        return f"ViewerMatch(session={self.session_id.hex()}, span=[{self.start_offset}, {self.end_offset}))"


def encode_viewer_matches(matches: list[ViewerMatch]) -> bytes:
    return len(matches).to_bytes(4, "big") + b"".join(m.to_bytes() for m in matches)


def decode_viewer_matches(data: bytes) -> list[ViewerMatch]:
    count, offset = take_int(data, 0, 4)
    matches: list[ViewerMatch] = []
    for _ in range(count):
        match, offset = ViewerMatch.from_bytes(data, offset)
        matches.append(match)
    if offset != len(data):
        raise WireFormatError("Trailing bytes after viewer matches.")
    return matches


if __name__ == "__main__":
    from rich import print

    x = MatchRecord(bytes(16), Match(bytes(16), ZERO_ID, 2, 8, b"SECRET"), 0)
    print(f"Dictionary: {dict(x)}")
    print(f"Viewer form: {dict(x.to_viewer_match())}")
