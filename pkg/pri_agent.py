"""Provides the client-side agent.

Provides `UserKey` and `SessionKey`, `export_session_key` which escrows a
session key in a single KeyDelivery message, `EnclaveClient` which attests the
enclave and talks to it over an attested channel, and `Agent`, which registers
its user's key with an attested enclave and delivers session keys.
"""

import logging
import secrets
from typing import Protocol

from pri_crypto import KEY_SIZE, AuthFailure, SymKey, aead_seal, counter_nonce, hkdf_sha256
from pri_enclave import (
    AttestationQuote,
    AttestedChannel,
    Measurement,
    QuoteRejectReason,
    QuoteVerdict,
    establish_channel,
    verify_quote,
)
from pri_wire import (
    ID_SIZE,
    AckStatus,
    KeyDeliveryMessage,
    MsgType,
    WireFormatError,
    decode_ack,
    decode_error,
    decode_frame,
    encode_attest_challenge,
    encode_channel_open,
    encode_register_user,
)

logger = logging.getLogger(__name__)


class AgentError(Exception):
    """Base class for errors on the client side."""


class AttestationRejected(AgentError):
    """Exception raised when the enclave's quote does not verify; nothing secret was sent."""

    def __init__(self, reason: QuoteRejectReason) -> None:
        self.reason: QuoteRejectReason = reason
        super().__init__(f"Attestation rejected: {reason}.")


class ChannelFailure(AgentError):
    """Exception raised when the enclave answers with an error or an unreadable reply."""


class CounterReuse(AgentError):
    """Exception raised when a key delivery counter is not strictly increasing."""


class Transport(Protocol):
    def send(self, source: str, destination: str, frame: bytes) -> None: ...

    def receive(self, address: str) -> bytes: ...


class UserKey:
    """A user's long-lived key k_U, shared only between agent and enclave."""

    def __init__(self, user_id: bytes, key: SymKey) -> None:
        if len(user_id) != ID_SIZE:
            raise AgentError("A user id is exactly 16 bytes.")
        self.user_id: bytes = bytes(user_id)
        self.key: SymKey = key

    @classmethod
    def generate(cls, user_id: bytes | None = None) -> "UserKey":
        return cls(user_id or secrets.token_bytes(ID_SIZE), SymKey.generate())

    @classmethod
    def from_seed(cls, user_id: bytes, seed: int | bytes) -> "UserKey":
        """Deterministic key for reproducible scenarios."""
        material: bytes = seed if isinstance(seed, bytes) else seed.to_bytes(16, "big")
        return cls(user_id, SymKey(hkdf_sha256(material, b"PRI1-user-key" + bytes(user_id), length=KEY_SIZE)))

    def __repr__(self) -> str:
        return f"UserKey(user={self.user_id.hex()})"


class SessionKey:
    """A session's traffic key k_S and the user who owns the session."""

    def __init__(self, session_id: bytes, key: SymKey, owner: bytes) -> None:
        self.session_id: bytes = bytes(session_id)
        self.key: SymKey = key
        self.owner: bytes = bytes(owner)

    @classmethod
    def generate(cls, owner: bytes, session_id: bytes | None = None) -> "SessionKey":
        return cls(session_id or secrets.token_bytes(ID_SIZE), SymKey.generate(), owner)

    def __repr__(self) -> str:
        return f"SessionKey(session={self.session_id.hex()}, owner={self.owner.hex()})"


def export_session_key(user: UserKey, session: SessionKey, counter: int) -> KeyDeliveryMessage:
    """Escrows a session key under the user key.

    Args:
        user (UserKey): The session owner.
        session (SessionKey): The session and its key.
        counter (int): Nonce source; strictly increasing per user.

    Returns:
        KeyDeliveryMessage: One message of `KeyDeliveryMessage.FRAME_SIZE` bytes on the wire.
    """
    nonce: bytes = counter_nonce(counter)
    message: KeyDeliveryMessage = KeyDeliveryMessage(user.user_id, session.session_id, counter, nonce, b"")
    message.ciphertext = aead_seal(user.key, nonce, message.aad(), session.key.bytes).ciphertext
    return message


class EnclaveClient:
    """Attests the enclave and exchanges requests with it over an attested channel.

    No channel, and so no secret, exists until the quote has verified.
    """

    def __init__(
        self,
        transport: Transport,
        address: str,
        platform_root_public: bytes,
        expected_measurement: Measurement | bytes,
        enclave_address: str = "enclave",
    ) -> None:
        self.transport: Transport = transport
        self.address: str = address
        self.platform_root_public: bytes = bytes(platform_root_public)
        self.expected_measurement: Measurement | bytes = expected_measurement
        self.enclave_address: str = enclave_address
        self.channel: AttestedChannel | None = None

    def _receive(self, expected: MsgType) -> bytes:
        frame: bytes = self.transport.receive(self.address)
        try:
            msg_type, body, _ = decode_frame(frame)
        except WireFormatError as e:
            raise ChannelFailure("Unreadable reply from the enclave.") from e
        if msg_type == MsgType.ERROR:
            raise ChannelFailure(f"Enclave reported {decode_error(body)[1]}.")
        if msg_type != expected:
            raise ChannelFailure(f"Expected {expected.name}, got {msg_type.name}.")
        return body

    def connect(self) -> AttestedChannel:
        """Verifies a fresh quote and opens an attested channel.

        Raises:
            AttestationRejected: Raised when the quote does not verify.
            ChannelFailure: Raised when the enclave does not answer with a quote.

        Returns:
            AttestedChannel: The client side of the channel.
        """
        nonce: bytes = secrets.token_bytes(32)
        self.transport.send(self.address, self.enclave_address, encode_attest_challenge(nonce))
        try:
            quote: AttestationQuote = AttestationQuote.from_body(self._receive(MsgType.ATTEST_QUOTE))
        except WireFormatError as e:
            raise ChannelFailure("Malformed quote.") from e
        verdict: QuoteVerdict = verify_quote(self.platform_root_public, self.expected_measurement, nonce, quote)
        if not verdict.accepted:
            logger.warning("%s rejected the enclave quote: %s", self.address, verdict.reason)
            raise AttestationRejected(verdict.reason)
        channel, client_public = establish_channel(quote, verdict)
        self.transport.send(
            self.address, self.enclave_address, encode_channel_open(client_public, quote.enclave_ka_public)
        )
        self.channel = channel
        return channel

    def request(self, inner_frame: bytes) -> bytes:
        """Sends a channel message and returns the body of the enclave's Ack.

        Raises:
            ChannelFailure: Raised for an error reply, an unreadable reply, or a rejection.
        """
        if self.channel is None:
            self.connect()
        self.transport.send(self.address, self.enclave_address, self.channel.seal(inner_frame))
        body: bytes = self._receive(MsgType.CHANNEL_MSG)
        try:
            msg_type, ack_body, _ = decode_frame(self.channel.open(body))
            if msg_type != MsgType.ACK:
                raise ChannelFailure(f"Expected ACK, got {msg_type.name}.")
            status, detail = decode_ack(ack_body)
        except (AuthFailure, WireFormatError) as e:
            raise ChannelFailure("Channel reply did not authenticate.") from e
        if status != AckStatus.OK:
            raise ChannelFailure(f"Enclave rejected the request: {detail.decode('ascii', errors='replace')}.")
        return detail


class Agent:
    """One user's agent: registers the user key and escrows session keys.

    Deliveries of one agent are sequential; the counter never repeats.
    """

    def __init__(self, user: UserKey, client: EnclaveClient) -> None:
        self.user: UserKey = user
        self.client: EnclaveClient = client
        self.last_counter: int = -1

    def register(self) -> None:
        """Attests the enclave, then sends k_U over the attested channel.

        Raises:
            AttestationRejected: Raised when the quote does not verify; k_U is not sent.
            ChannelFailure: Raised when the enclave does not acknowledge.
        """
        self.client.connect()
        self.client.request(encode_register_user(self.user.user_id, self.user.key.bytes))
        logger.info("user %s registered with the enclave", self.user.user_id.hex())

    def export_session_key(self, session: SessionKey, counter: int | None = None) -> KeyDeliveryMessage:
        """Builds the delivery for a session with the next (or a given) counter.

        Raises:
            CounterReuse: Raised when `counter` is not above every earlier counter.
        """
        if counter is None:
            counter = self.last_counter + 1
        if counter <= self.last_counter:
            raise CounterReuse(f"Counter {counter} is not above {self.last_counter}.")
        message: KeyDeliveryMessage = export_session_key(self.user, session, counter)
        self.last_counter = counter
        return message

    def send_session_key(self, session: SessionKey) -> KeyDeliveryMessage:
        """Delivers a session key to the enclave as one frame."""
        message: KeyDeliveryMessage = self.export_session_key(session)
        self.client.transport.send(self.client.address, self.client.enclave_address, message.to_frame())
        logger.debug("key for session %s delivered", session.session_id.hex())
        return message


def register_user(
    transport: Transport,
    address: str,
    platform_root_public: bytes,
    expected_measurement: Measurement | bytes,
    user: UserKey,
) -> Agent:
    """Registers `user` with the enclave and returns the agent that did it."""
    agent: Agent = Agent(user, EnclaveClient(transport, address, platform_root_public, expected_measurement))
    agent.register()
    return agent
