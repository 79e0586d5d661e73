"""Provides the PRI1 wire format.

Provides framing (`encode_frame` / `decode_frame`), the message type registry
`MsgType`, codecs for every message body, and `WireLog`, the recorder of
every host-visible frame of a simulated run.

A frame is `magic "PRI1"(4) ‖ msg_type(1) ‖ body_len(4BE) ‖ body`.
"""

import struct
from enum import IntEnum
from typing import Final, Iterator

MAGIC: Final[bytes] = b"PRI1"
HEADER: Final[struct.Struct] = struct.Struct(">4sBI")
MAX_BODY: Final[int] = 64 << 20

ID_SIZE: Final[int] = 16
ZERO_ID: Final[bytes] = bytes(ID_SIZE)


class MsgType(IntEnum):
    ATTEST_CHALLENGE = 0x01
    ATTEST_QUOTE = 0x02
    CHANNEL_MSG = 0x03
    KEY_DELIVERY = 0x04
    FORWARD = 0x05
    ALERT = 0x06
    VIEWER_CHALLENGE = 0x07
    VIEWER_AUTH = 0x08
    VIEWER_FETCH = 0x09
    VIEWER_RESP = 0x0A
    TRAFFIC_RECORD = 0x10
    REGISTER_USER = 0x11
    POLICY_SUBMIT = 0x12
    ACK = 0x13
    VIEWER_HELLO = 0x14
    CHANNEL_OPEN = 0x15
    VIEWER_TOKEN = 0x16
    ERROR = 0x17
    AUDIT_REPORT = 0x18
    AUDIT_REQUEST = 0x19
    SESSION_CLOSE = 0x1A
    SESSION_SUMMARY = 0x1B


class Direction(IntEnum):
    """Tag of the link a logged frame travelled on."""

    AGENT_TO_ENCLAVE = 0x01
    ENCLAVE_TO_AGENT = 0x02
    ISSUER_TO_ENCLAVE = 0x03
    ENCLAVE_TO_ISSUER = 0x04
    VIEWER_TO_ENCLAVE = 0x05
    ENCLAVE_TO_VIEWER = 0x06
    ENDPOINT_TO_NETWORK = 0x07
    TAP_TO_INSPECTOR = 0x08
    NETWORK_TO_ENDPOINT = 0x09
    ENCLAVE_TO_ENDPOINT = 0x0A
    ENCLAVE_TO_SIM = 0x0B
    ADMIN_TO_ENCLAVE = 0x0C
    ENCLAVE_TO_ADMIN = 0x0D
    INSPECTOR_TO_TAP = 0x0E
    OTHER = 0xFF


class WireFormatError(Exception):
    """Exception raised when bytes do not parse as the expected wire layout."""


class AckStatus(IntEnum):
    OK = 0
    REJECTED = 1


def encode_frame(msg_type: MsgType, body: bytes) -> bytes:
    """Wraps a message body in a PRI1 frame.

    Args:
        msg_type (MsgType): Type of the message.
        body (bytes): Encoded body.

    Returns:
        bytes: The framed message.
    """
    if len(body) > MAX_BODY:
        raise WireFormatError("Frame body too large.")
    return HEADER.pack(MAGIC, int(msg_type), len(body)) + bytes(body)


def decode_frame(data: bytes, offset: int = 0) -> tuple[MsgType, bytes, int]:
    """Parses one PRI1 frame.

    Args:
        data (bytes): Buffer holding the frame.
        offset (int): Where the frame starts.

    Raises:
        WireFormatError: Raised on bad magic, unknown type, or truncation.

    Returns:
        tuple[MsgType, bytes, int]: Message type, body, and offset just past the frame.
    """
    if len(data) - offset < HEADER.size:
        raise WireFormatError("Truncated frame header.")
    magic, msg_type, body_len = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise WireFormatError("Bad frame magic.")
    try:
        kind: MsgType = MsgType(msg_type)
    except ValueError as e:
        raise WireFormatError(f"Unknown message type 0x{msg_type:02x}.") from e
    start: int = offset + HEADER.size
    end: int = start + body_len
    if end > len(data):
        raise WireFormatError("Truncated frame body.")
    return kind, bytes(data[start:end]), end


def frame_type(frame: bytes) -> MsgType:
    """Returns the message type of a complete frame."""
    return decode_frame(frame)[0]


def take(body: bytes, offset: int, size: int) -> tuple[bytes, int]:
    """Slices `size` bytes from `body` at `offset`, failing on truncation."""
    end: int = offset + size
    if end > len(body):
        raise WireFormatError("Message body truncated.")
    return body[offset:end], end


def take_int(body: bytes, offset: int, size: int) -> tuple[int, int]:
    """Reads a big-endian unsigned integer of `size` bytes."""
    raw, offset = take(body, offset, size)
    return int.from_bytes(raw, "big"), offset


def expect_end(body: bytes, offset: int) -> None:
    if offset != len(body):
        raise WireFormatError("Trailing bytes after message body.")


# Attestation and channel setup bodies


def encode_attest_challenge(nonce: bytes) -> bytes:
    if len(nonce) != 32:
        raise WireFormatError("Challenge nonce must be 32 bytes.")
    return encode_frame(MsgType.ATTEST_CHALLENGE, nonce)


def decode_attest_challenge(body: bytes) -> bytes:
    nonce, offset = take(body, 0, 32)
    expect_end(body, offset)
    return nonce


def encode_channel_open(client_ka_public: bytes, enclave_ka_public: bytes) -> bytes:
    return encode_frame(MsgType.CHANNEL_OPEN, bytes(client_ka_public) + bytes(enclave_ka_public))


def decode_channel_open(body: bytes) -> tuple[bytes, bytes]:
    client_public, offset = take(body, 0, 32)
    enclave_public, offset = take(body, offset, 32)
    expect_end(body, offset)
    return client_public, enclave_public


def encode_channel_msg(channel_id: bytes, counter: int, envelope_bytes: bytes) -> bytes:
    return encode_frame(
        MsgType.CHANNEL_MSG, bytes(channel_id) + counter.to_bytes(8, "big") + bytes(envelope_bytes)
    )


def decode_channel_msg(body: bytes) -> tuple[bytes, int, bytes]:
    channel_id, offset = take(body, 0, ID_SIZE)
    counter, offset = take_int(body, offset, 8)
    return channel_id, counter, body[offset:]


def encode_ack(status: AckStatus, detail: bytes = b"") -> bytes:
    return encode_frame(MsgType.ACK, bytes([int(status)]) + bytes(detail))


def decode_ack(body: bytes) -> tuple[AckStatus, bytes]:
    status, offset = take_int(body, 0, 1)
    try:
        return AckStatus(status), body[offset:]
    except ValueError as e:
        raise WireFormatError(f"Unknown ack status {status}.") from e


def encode_error(code: int, reason: str) -> bytes:
    """Error frames carry only an exception class name, never data."""
    text: bytes = reason.encode("ascii", errors="replace")[:255]
    return encode_frame(MsgType.ERROR, bytes([code & 0xFF, len(text)]) + text)


def decode_error(body: bytes) -> tuple[int, str]:
    code, offset = take_int(body, 0, 1)
    length, offset = take_int(body, offset, 1)
    text, offset = take(body, offset, length)
    expect_end(body, offset)
    return code, text.decode("ascii", errors="replace")


def encode_session_close(session_id: bytes) -> bytes:
    return encode_frame(MsgType.SESSION_CLOSE, bytes(session_id))


def decode_session_close(body: bytes) -> bytes:
    session_id, offset = take(body, 0, ID_SIZE)
    expect_end(body, offset)
    return session_id


def encode_audit_request() -> bytes:
    return encode_frame(MsgType.AUDIT_REQUEST, b"")


# Channel application messages, only ever sent inside a ChannelMsg


def encode_register_user(user_id: bytes, user_key: bytes) -> bytes:
    return encode_frame(MsgType.REGISTER_USER, bytes(user_id) + bytes(user_key))


def decode_register_user(body: bytes) -> tuple[bytes, bytes]:
    user_id, offset = take(body, 0, ID_SIZE)
    user_key, offset = take(body, offset, 32)
    expect_end(body, offset)
    return user_id, user_key


def encode_policy_submit(issuer_id: bytes, bundle: bytes) -> bytes:
    return encode_frame(MsgType.POLICY_SUBMIT, bytes(issuer_id) + bytes(bundle))


def decode_policy_submit(body: bytes) -> tuple[bytes, bytes]:
    issuer_id, offset = take(body, 0, ID_SIZE)
    return issuer_id, body[offset:]


# Viewer messages


def encode_viewer_hello(user_id: bytes) -> bytes:
    return encode_frame(MsgType.VIEWER_HELLO, bytes(user_id))


def decode_viewer_hello(body: bytes) -> bytes:
    user_id, offset = take(body, 0, ID_SIZE)
    expect_end(body, offset)
    return user_id


def encode_viewer_challenge(nonce: bytes) -> bytes:
    return encode_frame(MsgType.VIEWER_CHALLENGE, bytes(nonce))


def decode_viewer_challenge(body: bytes) -> bytes:
    nonce, offset = take(body, 0, 32)
    expect_end(body, offset)
    return nonce


def encode_viewer_auth(user_id: bytes, tag: bytes) -> bytes:
    return encode_frame(MsgType.VIEWER_AUTH, bytes(user_id) + bytes(tag))


def decode_viewer_auth(body: bytes) -> tuple[bytes, bytes]:
    user_id, offset = take(body, 0, ID_SIZE)
    tag, offset = take(body, offset, 32)
    expect_end(body, offset)
    return user_id, tag


def encode_viewer_token(token_id: bytes, expiry: int) -> bytes:
    return encode_frame(MsgType.VIEWER_TOKEN, bytes(token_id) + expiry.to_bytes(8, "big"))


def decode_viewer_token(body: bytes) -> tuple[bytes, int]:
    token_id, offset = take(body, 0, ID_SIZE)
    expiry, offset = take_int(body, offset, 8)
    expect_end(body, offset)
    return token_id, expiry


def encode_viewer_fetch(token_id: bytes) -> bytes:
    return encode_frame(MsgType.VIEWER_FETCH, bytes(token_id))


def decode_viewer_fetch(body: bytes) -> bytes:
    token_id, offset = take(body, 0, ID_SIZE)
    expect_end(body, offset)
    return token_id


def encode_viewer_resp(count: int, nonce: bytes, ciphertext: bytes) -> bytes:
    return encode_frame(
        MsgType.VIEWER_RESP, count.to_bytes(4, "big") + bytes(nonce) + len(ciphertext).to_bytes(4, "big") + ciphertext
    )


def decode_viewer_resp(body: bytes) -> tuple[int, bytes, bytes]:
    count, offset = take_int(body, 0, 4)
    nonce, offset = take(body, offset, 12)
    length, offset = take_int(body, offset, 4)
    ciphertext, offset = take(body, offset, length)
    expect_end(body, offset)
    return count, nonce, ciphertext


class KeyDeliveryMessage:
    """A session key escrowed under the owner's user key.

    Body: `user_id(16) ‖ session_id(16) ‖ counter(8BE) ‖ nonce(12) ‖ ciphertext(48)`,
    where the ciphertext is the 32-byte session key plus the 16-byte tag.
    """

    BODY_SIZE: Final[int] = ID_SIZE + ID_SIZE + 8 + 12 + 48
    FRAME_SIZE: Final[int] = HEADER.size + BODY_SIZE

    def __init__(self, user_id: bytes, session_id: bytes, counter: int, nonce: bytes, ciphertext: bytes) -> None:
        self.user_id: bytes = bytes(user_id)
        self.session_id: bytes = bytes(session_id)
        self.counter: int = int(counter)
        self.nonce: bytes = bytes(nonce)
        self.ciphertext: bytes = bytes(ciphertext)

    def aad(self) -> bytes:
        return self.user_id + self.session_id

    def to_body(self) -> bytes:
        return self.user_id + self.session_id + self.counter.to_bytes(8, "big") + self.nonce + self.ciphertext

    def to_frame(self) -> bytes:
        return encode_frame(MsgType.KEY_DELIVERY, self.to_body())

    @classmethod
    def from_body(cls, body: bytes) -> "KeyDeliveryMessage":
        user_id, offset = take(body, 0, ID_SIZE)
        session_id, offset = take(body, offset, ID_SIZE)
        counter, offset = take_int(body, offset, 8)
        nonce, offset = take(body, offset, 12)
        ciphertext, offset = take(body, offset, 48)
        expect_end(body, offset)
        return cls(user_id, session_id, counter, nonce, ciphertext)

    def __repr__(self) -> str:
        return f"KeyDeliveryMessage(user={self.user_id.hex()}, session={self.session_id.hex()}, counter={self.counter})"


class TrafficRecord:
    """One encrypted record of a session.

    Body: `session_id(16) ‖ seq(8BE) ‖ ct_len(4BE) ‖ ciphertext`.
    """

    def __init__(self, session_id: bytes, seq: int, ciphertext: bytes) -> None:
        self.session_id: bytes = bytes(session_id)
        self.seq: int = int(seq)
        self.ciphertext: bytes = bytes(ciphertext)

    def aad(self) -> bytes:
        return self.session_id + self.seq.to_bytes(8, "big")

    def to_body(self) -> bytes:
        return self.session_id + self.seq.to_bytes(8, "big") + len(self.ciphertext).to_bytes(4, "big") + self.ciphertext

    def to_frame(self) -> bytes:
        return encode_frame(MsgType.TRAFFIC_RECORD, self.to_body())

    @classmethod
    def from_body(cls, body: bytes) -> "TrafficRecord":
        session_id, offset = take(body, 0, ID_SIZE)
        seq, offset = take_int(body, offset, 8)
        length, offset = take_int(body, offset, 4)
        ciphertext, offset = take(body, offset, length)
        expect_end(body, offset)
        return cls(session_id, seq, ciphertext)

    @classmethod
    def from_frame(cls, frame: bytes) -> "TrafficRecord":
        msg_type, body, end = decode_frame(frame)
        if msg_type != MsgType.TRAFFIC_RECORD or end != len(frame):
            raise WireFormatError("Not a traffic record frame.")
        return cls.from_body(body)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrafficRecord):
            return NotImplemented
        return self.to_body() == other.to_body()

    def __repr__(self) -> str:
        return f"TrafficRecord(session={self.session_id.hex()}, seq={self.seq}, ct_len={len(self.ciphertext)})"


def encode_forward(record_frame: bytes) -> bytes:
    """Wraps an inspected TrafficRecord frame for delivery to its destination."""
    return encode_frame(MsgType.FORWARD, bytes(record_frame))


def decode_forward(body: bytes) -> TrafficRecord:
    return TrafficRecord.from_frame(body)


class WireLog:
    """Ordered record of every host-visible frame in a run.

    Entries are serialized as `global_seq(8BE) ‖ direction(1) ‖ frame`.
    """

    def __init__(self) -> None:
        self.entries: list[tuple[int, Direction, bytes]] = []

    def record(self, direction: Direction, frame: bytes) -> int:
        """Appends a frame and returns its global sequence number."""
        seq: int = len(self.entries)
        self.entries.append((seq, Direction(direction), bytes(frame)))
        return seq

    def __iter__(self) -> Iterator[tuple[int, Direction, bytes]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def frames(self, msg_type: MsgType | None = None) -> list[bytes]:
        """Returns logged frames, optionally only those of one type."""
        if msg_type is None:
            return [frame for _, _, frame in self.entries]
        return [frame for _, _, frame in self.entries if frame_type(frame) == msg_type]

    def to_bytes(self) -> bytes:
        return b"".join(
            seq.to_bytes(8, "big") + bytes([int(direction)]) + frame
            for seq, direction, frame in self.entries
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireLog":
        """Parses a serialized wire log.

        Raises:
            WireFormatError: Raised on truncated or malformed entries.
        """
        log: WireLog = cls()
        offset: int = 0
        while offset < len(data):
            seq, offset = take_int(data, offset, 8)
            direction, offset = take_int(data, offset, 1)
            _, _, end = decode_frame(data, offset)
            log.entries.append((seq, Direction(direction), bytes(data[offset:end])))
            offset = end
        return log

    def write(self, file_path: str) -> None:
        with open(file_path, "wb") as file:
            file.write(self.to_bytes())

    @classmethod
    def read(cls, file_path: str) -> "WireLog":
        with open(file_path, "rb") as file:
            return cls.from_bytes(file.read())
