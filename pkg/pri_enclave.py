"""Provides the emulated trusted-execution boundary.

This is a software emulation of an SGX-style enclave, not hardware protection.
It provides:

* code measurement (`ManifestEntry`, `measure`, `enclave_manifest`),
* the emulated platform and its attestation quotes (`Platform`,
  `AttestationQuote`, `verify_quote`),
* attested secure channels (`establish_channel`, `AttestedChannel`),
* sealed storage bound to the measurement (`SealedBlob`, `EnclaveRuntime.seal`),
* `HostInterface`, the single path through which enclave output reaches the
  host: frames to the network and sealed blobs to disk.
"""

import hashlib
import json
import logging
import os
import re
import secrets
from enum import IntEnum, StrEnum
from typing import Callable, Final

from pri_crypto import (
    AuthFailure,
    Envelope,
    KeyPair,
    KeyUsage,
    MalformedSignature,
    SymKey,
    aead_open,
    aead_seal,
    counter_nonce,
    derive_key,
    key_agree,
    sign,
    verify,
)
from pri_wire import (
    ID_SIZE,
    MsgType,
    WireFormatError,
    decode_channel_msg,
    decode_frame,
    encode_channel_msg,
    encode_frame,
    take,
    take_int,
)

logger = logging.getLogger(__name__)

# Absolute address for files to prevent issues with
# relative addresses when running from another directory
BASE_DIR: str = os.path.dirname(__file__)

PRI_VERSION: Final[str] = "1.0.0"

MAX_PENDING_HANDSHAKES: Final[int] = 64

# Modules whose code runs inside the enclave boundary, in measurement order
ENCLAVE_MODULES: Final[tuple[str, ...]] = (
    "pri_crypto",
    "pri_wire",
    "pri_enclave",
    "rule_record",
    "pri_matcher",
    "pri_policy",
    "match_record",
    "alert_record",
    "pri_inspector",
    "pri_match_store",
    "pri_server",
)


class EnclaveError(Exception):
    """Base class for errors of the enclave runtime."""


class EmptyManifest(EnclaveError):
    """Exception raised when measuring an empty manifest."""


class MeasurementMismatch(EnclaveError):
    """Exception raised when a sealed blob belongs to another measurement."""


class HandshakeFailure(EnclaveError):
    """Exception raised when an attested channel cannot be established."""


class HostInterfaceViolation(EnclaveError):
    """Exception raised when enclave code tries to emit a disallowed output."""


class QuoteRejectReason(StrEnum):
    BadSignature = "BadSignature"
    MeasurementMismatch = "MeasurementMismatch"
    NonceMismatch = "NonceMismatch"


class BlobKind(IntEnum):
    POLICY = 1
    MATCH = 2
    USERKEY_TABLE = 3
    STATS = 4


class ManifestEntry:
    """One measured module: name, version string and content hash."""

    def __init__(self, name: str, version: str, content_hash: bytes) -> None:
        self.name: str = name
        self.version: str = version
        self.content_hash: bytes = bytes(content_hash)

    def __iter__(self):
        yield "name", self.name
        yield "version", self.version
        yield "content_hash", self.content_hash.hex()

    def to_dict(self) -> dict:
        return dict(self)

    def __repr__(self) -> str:
        return str(dict(self))


class Measurement:
    """32-byte digest of an enclave's manifest and configuration."""

    def __init__(self, digest: bytes) -> None:
        if len(digest) != 32:
            raise EnclaveError("A measurement is exactly 32 bytes.")
        self.digest: bytes = bytes(digest)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Measurement):
            return NotImplemented
        return self.digest == other.digest

    def __hash__(self) -> int:
        return hash(self.digest)

    def hex(self) -> str:
        return self.digest.hex()

    def __repr__(self) -> str:
        return f"Measurement({self.digest.hex()})"


def _length_prefixed(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


def measure(manifest: list[ManifestEntry], config_digest: bytes = b"") -> Measurement:
    """Computes the measurement of an ordered manifest.

    Args:
        manifest (list[ManifestEntry]): Ordered module entries.
        config_digest (bytes): Digest of the measured configuration.

    Raises:
        EmptyManifest: Raised when the manifest has no entries.

    Returns:
        Measurement: Digest that changes with any entry, its order, or the config.
    """
    if not manifest:
        raise EmptyManifest("Cannot measure an empty manifest.")

    h = hashlib.sha256(b"PRI1-measurement")
    h.update(len(manifest).to_bytes(4, "big"))
    for entry in manifest:
        h.update(_length_prefixed(entry.name.encode("utf-8")))
        h.update(_length_prefixed(entry.version.encode("utf-8")))
        h.update(_length_prefixed(entry.content_hash))
    h.update(_length_prefixed(bytes(config_digest)))
    return Measurement(h.digest())


def enclave_manifest(version: str = PRI_VERSION) -> list[ManifestEntry]:
    """Builds the manifest of the enclave code from the module sources on disk.

    Args:
        version (str): Version string recorded for every module.

    Returns:
        list[ManifestEntry]: One entry per module in `ENCLAVE_MODULES`.
    """
    manifest: list[ManifestEntry] = []
    for name in ENCLAVE_MODULES:
        with open(os.path.join(BASE_DIR, f"{name}.py"), "rb") as file:
            content_hash: bytes = hashlib.sha256(file.read()).digest()
        manifest.append(ManifestEntry(name, version, content_hash))
    return manifest


def config_digest(config: dict) -> bytes:
    """Digest of the measured part of the enclave configuration."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).digest()


class AttestationQuote:
    """A platform-signed statement binding a measurement to a fresh key."""

    def __init__(
        self,
        measurement: bytes,
        challenge_nonce: bytes,
        enclave_ka_public: bytes,
        platform_public: bytes,
        signature: bytes,
    ) -> None:
        self.measurement: bytes = bytes(measurement)
        self.challenge_nonce: bytes = bytes(challenge_nonce)
        self.enclave_ka_public: bytes = bytes(enclave_ka_public)
        self.platform_public: bytes = bytes(platform_public)
        self.signature: bytes = bytes(signature)

    @staticmethod
    def signed_payload(measurement: bytes, challenge_nonce: bytes, enclave_ka_public: bytes) -> bytes:
        return bytes(measurement) + bytes(challenge_nonce) + bytes(enclave_ka_public)

    def payload(self) -> bytes:
        return self.signed_payload(self.measurement, self.challenge_nonce, self.enclave_ka_public)

    def to_body(self) -> bytes:
        return (
            self.measurement
            + self.challenge_nonce
            + self.enclave_ka_public
            + self.platform_public
            + len(self.signature).to_bytes(2, "big")
            + self.signature
        )

    def to_frame(self) -> bytes:
        return encode_frame(MsgType.ATTEST_QUOTE, self.to_body())

    @classmethod
    def from_body(cls, body: bytes) -> "AttestationQuote":
        measurement, offset = take(body, 0, 32)
        nonce, offset = take(body, offset, 32)
        ka_public, offset = take(body, offset, 32)
        platform_public, offset = take(body, offset, 32)
        sig_len, offset = take_int(body, offset, 2)
        signature, offset = take(body, offset, sig_len)
        if offset != len(body):
            raise WireFormatError("Trailing bytes after quote.")
        return cls(measurement, nonce, ka_public, platform_public, signature)

    def __repr__(self) -> str:
        return f"AttestationQuote(measurement={self.measurement.hex()}, ka_public={self.enclave_ka_public.hex()})"


class QuoteVerdict:
    """Result of `verify_quote`: accept, or reject with a reason."""

    def __init__(self, reason: QuoteRejectReason | None = None) -> None:
        self.reason: QuoteRejectReason | None = reason

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.accepted

    def __repr__(self) -> str:
        return "accept" if self.accepted else f"reject({self.reason})"


class Platform:
    """The emulated CPU: a quote-signing key pair and the root sealing secret.

    One platform is generated per harness run; its public key is handed to
    agents and issuers out of band as the attestation root.
    """

    def __init__(self, signing_secret: bytes, platform_secret: bytes) -> None:
        self.signing: KeyPair = KeyPair(signing_secret, KeyUsage.signing)
        self.platform_secret: bytes = bytes(platform_secret)

    @classmethod
    def generate(cls) -> "Platform":
        return cls(secrets.token_bytes(32), secrets.token_bytes(32))

    @property
    def root_public(self) -> bytes:
        return self.signing.public

    def quote(self, measurement: Measurement, challenge_nonce: bytes, enclave_ka_public: bytes) -> AttestationQuote:
        """Signs a quote over (measurement ‖ nonce ‖ enclave key-agreement key)."""
        payload: bytes = AttestationQuote.signed_payload(measurement.digest, challenge_nonce, enclave_ka_public)
        return AttestationQuote(
            measurement.digest,
            challenge_nonce,
            enclave_ka_public,
            self.root_public,
            sign(self.signing, payload),
        )

    def to_dict(self) -> dict[str, str]:
        """Serializes the platform fixture, secrets included, for the CLI workspace."""
        return {
            "signing_secret": self.signing.secret.hex(),
            "platform_secret": self.platform_secret.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "Platform":
        return cls(bytes.fromhex(data["signing_secret"]), bytes.fromhex(data["platform_secret"]))


def verify_quote(
    platform_root_public: bytes,
    expected_measurement: Measurement | bytes,
    challenge_nonce: bytes,
    quote: AttestationQuote,
) -> QuoteVerdict:
    """Checks an attestation quote.

    Args:
        platform_root_public (bytes): Attestation root held out of band.
        expected_measurement (Measurement | bytes): Measurement the verifier trusts.
        challenge_nonce (bytes): The nonce the verifier sent.
        quote (AttestationQuote): The quote to check.

    Returns:
        QuoteVerdict: Accept iff the signature, measurement and nonce all check out.
    """
    expected: bytes = (
        expected_measurement.digest if isinstance(expected_measurement, Measurement) else bytes(expected_measurement)
    )
    if quote.platform_public != platform_root_public:
        return QuoteVerdict(QuoteRejectReason.BadSignature)
    try:
        valid: bool = verify(platform_root_public, quote.payload(), quote.signature)
    except MalformedSignature:
        valid = False
    if not valid:
        return QuoteVerdict(QuoteRejectReason.BadSignature)
    if quote.measurement != expected:
        return QuoteVerdict(QuoteRejectReason.MeasurementMismatch)
    if quote.challenge_nonce != challenge_nonce:
        return QuoteVerdict(QuoteRejectReason.NonceMismatch)
    return QuoteVerdict()


class AttestedChannel:
    """An established attested channel: one key per direction plus counters.

    Messages are `ChannelMsg{channel_id, counter, envelope}` frames whose
    envelope is sealed under the sender's direction key with the
    counter-derived nonce and the transcript hash as associated data.
    """

    def __init__(self, channel_id: bytes, transcript: bytes, send_key: SymKey, recv_key: SymKey) -> None:
        self.channel_id: bytes = bytes(channel_id)
        self.transcript: bytes = bytes(transcript)
        self._send_key: SymKey = send_key
        self._recv_key: SymKey = recv_key
        self.send_counter: int = 0
        self.recv_next: int = 0

    def seal(self, payload: bytes) -> bytes:
        """Returns a ChannelMsg frame carrying `payload`."""
        counter: int = self.send_counter
        self.send_counter += 1
        envelope: Envelope = aead_seal(self._send_key, counter_nonce(counter), self.transcript, payload)
        return encode_channel_msg(self.channel_id, counter, envelope.to_bytes())

    def open(self, body: bytes) -> bytes:
        """Opens the body of a ChannelMsg frame addressed to this channel.

        Raises:
            AuthFailure: Raised for a replayed or reordered counter, or a tampered envelope.

        Returns:
            bytes: The payload.
        """
        channel_id, counter, envelope_bytes = decode_channel_msg(body)
        if channel_id != self.channel_id:
            raise AuthFailure("Message belongs to another channel.")
        if counter < self.recv_next:
            raise AuthFailure("Channel counter reused.")
        payload: bytes = aead_open(
            self._recv_key, counter_nonce(counter), self.transcript, Envelope.from_bytes(envelope_bytes)
        )
        self.recv_next = counter + 1
        return payload

    def __repr__(self) -> str:
        return f"AttestedChannel(id={self.channel_id.hex()})"


def _channel_transcript(quote: AttestationQuote, client_ka_public: bytes) -> bytes:
    return hashlib.sha256(b"PRI1-channel" + quote.to_body() + bytes(client_ka_public)).digest()


def _channel_keys(shared: bytes, transcript: bytes) -> tuple[SymKey, SymKey]:
    return derive_key(shared, "chan-c2e", transcript), derive_key(shared, "chan-e2c", transcript)


def establish_channel(quote: AttestationQuote, verdict: QuoteVerdict) -> tuple[AttestedChannel, bytes]:
    """Client side of the channel handshake.

    Args:
        quote (AttestationQuote): The quote the enclave returned.
        verdict (QuoteVerdict): Result of checking that quote.

    Raises:
        HandshakeFailure: Raised when the quote was not accepted.

    Returns:
        tuple[AttestedChannel, bytes]: The channel and the client's key-agreement
        public key, which the enclave needs in a ChannelOpen message.
    """
    if not verdict.accepted:
        raise HandshakeFailure(f"Quote rejected: {verdict.reason}.")
    client: KeyPair = KeyPair.generate(KeyUsage.key_agreement)
    shared: bytes = key_agree(client, quote.enclave_ka_public)
    transcript: bytes = _channel_transcript(quote, client.public)
    c2e, e2c = _channel_keys(shared, transcript)
    return AttestedChannel(transcript[:ID_SIZE], transcript, c2e, e2c), client.public


class SealedBlob:
    """Enclave state encrypted under the measurement-bound sealing key.

    On disk: `blob_kind(1) ‖ measurement_binding(32) ‖ nonce(12) ‖ ct_len(4BE) ‖ ciphertext`.
    """

    def __init__(self, kind: BlobKind, measurement_binding: bytes, envelope: Envelope) -> None:
        self.kind: BlobKind = BlobKind(kind)
        self.measurement_binding: bytes = bytes(measurement_binding)
        self.envelope: Envelope = envelope

    @property
    def nonce(self) -> bytes:
        return self.envelope.nonce

    @property
    def counter(self) -> int:
        """The seal counter carried in the nonce."""
        return int.from_bytes(self.envelope.nonce[4:], "big")

    def aad(self) -> bytes:
        return self.measurement_binding + bytes([int(self.kind)])

    def to_bytes(self) -> bytes:
        ciphertext: bytes = self.envelope.ciphertext
        return (
            bytes([int(self.kind)])
            + self.measurement_binding
            + self.envelope.nonce
            + len(ciphertext).to_bytes(4, "big")
            + ciphertext
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["SealedBlob", int]:
        """Parses one blob at `offset`; returns it and the offset past it."""
        kind, offset = take_int(data, offset, 1)
        binding, offset = take(data, offset, 32)
        nonce, offset = take(data, offset, 12)
        ct_len, offset = take_int(data, offset, 4)
        ciphertext, offset = take(data, offset, ct_len)
        try:
            blob_kind: BlobKind = BlobKind(kind)
        except ValueError as e:
            raise WireFormatError(f"Unknown sealed blob kind {kind}.") from e
        return cls(blob_kind, binding, Envelope(nonce, ciphertext)), offset

    def __repr__(self) -> str:
        return f"SealedBlob(kind={self.kind.name}, ct_len={len(self.envelope.ciphertext)})"


def parse_sealed_blobs(data: bytes) -> list[SealedBlob]:
    """Parses a concatenation of sealed blobs, as written to an append-only log."""
    blobs: list[SealedBlob] = []
    offset: int = 0
    while offset < len(data):
        blob, offset = SealedBlob.from_bytes(data, offset)
        blobs.append(blob)
    return blobs


def _readable_blobs(data: bytes) -> list[SealedBlob]:
    """Parses blobs up to the first malformed one."""
    blobs: list[SealedBlob] = []
    offset: int = 0
    while offset < len(data):
        try:
            blob, offset = SealedBlob.from_bytes(data, offset)
        except WireFormatError:
            break
        blobs.append(blob)
    return blobs


class HostInterface:
    """The only output path of the enclave.

    Everything leaving the enclave passes through `send` (protocol frames of
    an allowed type) or the storage methods (sealed blobs only). `sent` keeps
    every emitted frame so confidentiality tests can inspect this seam.
    """

    ALLOWED_FRAME_TYPES: Final[frozenset[MsgType]] = frozenset(
        {
            MsgType.ATTEST_QUOTE,
            MsgType.CHANNEL_MSG,
            MsgType.ALERT,
            MsgType.FORWARD,
            MsgType.VIEWER_CHALLENGE,
            MsgType.VIEWER_TOKEN,
            MsgType.VIEWER_RESP,
            MsgType.ERROR,
            MsgType.AUDIT_REPORT,
            MsgType.SESSION_SUMMARY,
        }
    )

    __storage_name = re.compile(r"^[A-Za-z0-9_.-]+$")

    def __init__(self, send: Callable[[str, bytes], None], store_dir: str) -> None:
        """Creates a HostInterface.

        Args:
            send (Callable[[str, bytes], None]): Delivers a frame to a network address.
            store_dir (str): Directory of the sealed storage.
        """
        self._send: Callable[[str, bytes], None] = send
        self.store_dir: str = store_dir
        self.sent: list[tuple[str, bytes]] = []
        os.makedirs(store_dir, exist_ok=True)

    def send(self, address: str, frame: bytes) -> None:
        """Emits a protocol frame to `address`.

        Raises:
            HostInterfaceViolation: Raised for a malformed frame or a disallowed type.
        """
        try:
            msg_type, _, end = decode_frame(frame)
        except WireFormatError as e:
            raise HostInterfaceViolation("Enclave output is not a well-formed frame.") from e
        if end != len(frame) or msg_type not in self.ALLOWED_FRAME_TYPES:
            raise HostInterfaceViolation(f"Enclave may not emit {msg_type.name} frames.")
        self.sent.append((address, bytes(frame)))
        self._send(address, bytes(frame))

    def _path(self, name: str) -> str:
        if not self.__storage_name.match(name):
            raise HostInterfaceViolation(f"Illegal storage name '{name}'.")
        return os.path.join(self.store_dir, name)

    def _check_sealed(self, data: bytes) -> None:
        try:
            parse_sealed_blobs(data)
        except WireFormatError as e:
            raise HostInterfaceViolation("Only sealed blobs may be persisted.") from e

    def write_storage(self, name: str, data: bytes) -> None:
        """Replaces a storage file with sealed blob bytes."""
        self._check_sealed(data)
        path: str = self._path(name)
        with open(path + ".tmp", "wb") as file:
            file.write(data)
        os.replace(path + ".tmp", path)

    def append_storage(self, name: str, data: bytes) -> None:
        """Appends sealed blob bytes to a storage log."""
        self._check_sealed(data)
        with open(self._path(name), "ab") as file:
            file.write(data)

    def read_storage(self, name: str) -> bytes | None:
        """Returns a storage file's bytes, or None if it does not exist."""
        path: str = self._path(name)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as file:
            return file.read()

    def storage_names(self) -> list[str]:
        return sorted(name for name in os.listdir(self.store_dir) if not name.endswith(".tmp"))


class EnclaveRuntime:
    """Measurement, attestation and sealing for one enclave instance."""

    def __init__(
        self,
        platform: Platform,
        manifest: list[ManifestEntry],
        host: HostInterface,
        config: dict | None = None,
    ) -> None:
        """Creates an EnclaveRuntime.

        Args:
            platform (Platform): The emulated platform the enclave runs on.
            manifest (list[ManifestEntry]): The code the enclave runs.
            host (HostInterface): The enclave's output channel.
            config (dict | None): Measured configuration values.
        """
        self._platform: Platform = platform
        self.measurement: Measurement = measure(manifest, config_digest(config or {}))
        self._sealing_key: SymKey = derive_key(platform.platform_secret, "seal", self.measurement.digest)
        self.host: HostInterface = host
        self._pending: dict[bytes, tuple[KeyPair, AttestationQuote]] = {}
        self._seal_counter: int = 0
        self.resume_seal_counter()

    def attest(self, challenge_nonce: bytes) -> AttestationQuote:
        """Returns a quote with a fresh key-agreement key for this challenge.

        At most `MAX_PENDING_HANDSHAKES` quotes wait for a channel; the oldest
        is forgotten first.
        """
        ka: KeyPair = KeyPair.generate(KeyUsage.key_agreement)
        quote: AttestationQuote = self._platform.quote(self.measurement, challenge_nonce, ka.public)
        self._pending[ka.public] = (ka, quote)
        while len(self._pending) > MAX_PENDING_HANDSHAKES:
            del self._pending[next(iter(self._pending))]
        logger.debug("quote issued, %d channel handshakes pending", len(self._pending))
        return quote

    def accept_channel(self, client_ka_public: bytes, enclave_ka_public: bytes) -> AttestedChannel:
        """Enclave side of the channel handshake.

        Raises:
            HandshakeFailure: Raised when `enclave_ka_public` was not issued in a quote
                of this enclave, or the client key is degenerate.

        Returns:
            AttestedChannel: The channel, oriented for the enclave.
        """
        pending = self._pending.pop(bytes(enclave_ka_public), None)
        if pending is None:
            raise HandshakeFailure("Key-agreement key was not issued by this enclave.")
        ka, quote = pending
        try:
            shared: bytes = key_agree(ka, client_ka_public)
        except Exception as e:
            raise HandshakeFailure("Client key-agreement key rejected.") from e
        transcript: bytes = _channel_transcript(quote, client_ka_public)
        c2e, e2c = _channel_keys(shared, transcript)
        logger.debug("channel %s accepted", transcript[:ID_SIZE].hex())
        return AttestedChannel(transcript[:ID_SIZE], transcript, e2c, c2e)

    @property
    def pending_handshakes(self) -> int:
        return len(self._pending)

    @property
    def seal_counter(self) -> int:
        return self._seal_counter

    def resume_seal_counter(self) -> int:
        """Moves the seal counter past every blob of this measurement in the store."""
        highest: int = self._seal_counter
        for name in self.host.storage_names():
            for blob in _readable_blobs(self.host.read_storage(name) or b""):
                if blob.measurement_binding == self.measurement.digest:
                    highest = max(highest, blob.counter)
        self._seal_counter = highest
        return highest

    def seal(self, kind: BlobKind, plaintext: bytes) -> SealedBlob:
        """Encrypts enclave state so that only this measurement can recover it.

        Nonces come from a counter that never goes back, also across restarts
        on the same store.
        """
        self._seal_counter += 1
        nonce: bytes = counter_nonce(self._seal_counter)
        binding: bytes = self.measurement.digest
        envelope: Envelope = aead_seal(self._sealing_key, nonce, binding + bytes([int(kind)]), plaintext)
        return SealedBlob(kind, binding, envelope)

    def unseal(self, sealed: SealedBlob) -> bytes:
        """Recovers sealed state.

        Raises:
            MeasurementMismatch: Raised when the blob is bound to another measurement.
            AuthFailure: Raised when the blob was tampered with.

        Returns:
            bytes: The original plaintext.
        """
        if sealed.measurement_binding != self.measurement.digest:
            raise MeasurementMismatch("Sealed blob is bound to a different measurement.")
        return aead_open(self._sealing_key, sealed.nonce, sealed.aad(), sealed.envelope)

