"""Provides the enclave server.

Provides `EnclaveServer`, the single owner of the enclave state. It consumes
PRI1 frames from the network through `handle`, dispatches them to the
attestation, channel, policy, inspection and viewer logic, and emits its
answers only through its `HostInterface`. Long-lived state (user keys, the
policy, rule statistics) is sealed to the store after every change and can be
recovered with `restore` by a server with the same measurement.
"""

import logging
import time
from typing import Callable

from pri_crypto import CryptoError, SymKey
from pri_enclave import (
    AttestedChannel,
    BlobKind,
    EnclaveError,
    EnclaveRuntime,
    HandshakeFailure,
    HostInterface,
    ManifestEntry,
    Measurement,
    Platform,
    config_digest,
    enclave_manifest,
    measure,
    parse_sealed_blobs,
)
from pri_inspector import InspectionMode, Inspector, InspectorError, SessionSummary
from pri_match_store import MatchStore, StoreError, ViewerService
from pri_matcher import CompiledPolicy, MatcherError
from pri_policy import AuditReport, PolicyBook, PolicyError, RuleStats, audit_dynamic, audit_static
from pri_settings import Settings
from pri_wire import (
    ID_SIZE,
    AckStatus,
    KeyDeliveryMessage,
    MsgType,
    TrafficRecord,
    WireFormatError,
    decode_attest_challenge,
    decode_channel_msg,
    decode_channel_open,
    decode_frame,
    decode_policy_submit,
    decode_register_user,
    decode_session_close,
    decode_viewer_auth,
    decode_viewer_fetch,
    decode_viewer_hello,
    encode_ack,
    encode_error,
    encode_viewer_challenge,
    encode_viewer_resp,
    encode_viewer_token,
    take,
    take_int,
)
from rule_record import RuleError

logger = logging.getLogger(__name__)

USER_KEYS_BLOB: str = "userkeys.sealed"
POLICY_BLOB: str = "policy.sealed"
STATS_BLOB: str = "stats.sealed"

# Only these exceptions are reported back to the sender, by class name
_REPORTED_ERRORS: tuple[type[Exception], ...] = (
    CryptoError,
    EnclaveError,
    InspectorError,
    StoreError,
    PolicyError,
    MatcherError,
    RuleError,
    WireFormatError,
)


class ChannelRequired(EnclaveError):
    """Exception raised for a setup message that did not arrive over an attested channel."""


class UnexpectedMessage(EnclaveError):
    """Exception raised for a message type the enclave does not accept."""


def measured_config(settings: Settings) -> dict:
    """The part of the settings that changes enclave behavior, and so its measurement."""
    return {
        "max_span_cap": settings.max_span_cap,
        "max_record_payload": settings.max_record_payload,
        "key_buffer_limit": settings.key_buffer_limit,
        "viewer_token_ttl_s": settings.viewer_token_ttl_s,
    }


def expected_measurement(settings: Settings, manifest: list[ManifestEntry] | None = None) -> Measurement:
    """The measurement an honest enclave built from this code and settings reports."""
    return measure(manifest or enclave_manifest(), config_digest(measured_config(settings)))


def encode_user_table(user_keys: dict[bytes, SymKey]) -> bytes:
    items: list[tuple[bytes, SymKey]] = sorted(user_keys.items())
    return len(items).to_bytes(4, "big") + b"".join(user_id + key.bytes for user_id, key in items)


def decode_user_table(data: bytes) -> dict[bytes, SymKey]:
    count, offset = take_int(data, 0, 4)
    table: dict[bytes, SymKey] = {}
    for _ in range(count):
        user_id, offset = take(data, offset, ID_SIZE)
        key, offset = take(data, offset, 32)
        table[user_id] = SymKey(key)
    if offset != len(data):
        raise WireFormatError("Trailing bytes after user key table.")
    return table


class EnclaveState:
    """Everything the enclave knows: user keys, policy, statistics, open channels."""

    def __init__(self, max_span_cap: int) -> None:
        self.user_keys: dict[bytes, SymKey] = {}
        self.policy_book: PolicyBook = PolicyBook(max_span_cap)
        self.stats: RuleStats = RuleStats()
        self.channels: dict[bytes, AttestedChannel] = {}

    @property
    def policy(self) -> CompiledPolicy:
        return self.policy_book.policy


class EnclaveServer:
    """The enclaved inspection service."""

    def __init__(
        self,
        platform: Platform,
        settings: Settings,
        host: HostInterface,
        manifest: list[ManifestEntry] | None = None,
        corpus: bytes | None = None,
        mode: InspectionMode = InspectionMode.detect,
        clock: Callable[[], int] = lambda: int(time.time() * 1000),
    ) -> None:
        """Creates an EnclaveServer.

        Args:
            platform (Platform): The emulated platform.
            settings (Settings): Limits and thresholds.
            host (HostInterface): The only output path.
            manifest (list[ManifestEntry] | None): Code to measure. Defaults to the modules on disk.
            corpus (bytes | None): Reference corpus for the static audit.
            mode (InspectionMode): Inspection mode of new sessions.
            clock (Callable[[], int]): Milliseconds since the epoch.
        """
        self.settings: Settings = settings
        self.host: HostInterface = host
        self.corpus: bytes | None = corpus
        self.runtime: EnclaveRuntime = EnclaveRuntime(
            platform, manifest or enclave_manifest(), host, measured_config(settings)
        )
        self.state: EnclaveState = EnclaveState(settings.max_span_cap)
        self.match_store: MatchStore = MatchStore(self.runtime)
        self.viewer: ViewerService = ViewerService(
            self.state.user_keys, self.match_store, settings.viewer_token_ttl_s, clock
        )
        self.inspector: Inspector = Inspector(
            self.state.user_keys,
            self.state.policy_book,
            self.state.stats,
            self.match_store,
            host,
            mode=mode,
            key_buffer_limit=settings.key_buffer_limit,
            max_record_payload=settings.max_record_payload,
            clock=clock,
        )
        logger.info("enclave up, measurement %s", self.runtime.measurement.hex())

    @property
    def measurement(self) -> Measurement:
        return self.runtime.measurement

    # Sealed state

    def _seal_to(self, name: str, kind: BlobKind, plaintext: bytes) -> None:
        self.host.write_storage(name, self.runtime.seal(kind, plaintext).to_bytes())

    def _unseal_from(self, name: str) -> bytes | None:
        data: bytes | None = self.host.read_storage(name)
        if not data:
            return None
        plaintext: bytes | None = None
        for blob in parse_sealed_blobs(data):
            plaintext = self.runtime.unseal(blob)
        return plaintext

    def persist_user_keys(self) -> None:
        self._seal_to(USER_KEYS_BLOB, BlobKind.USERKEY_TABLE, encode_user_table(self.state.user_keys))

    def persist_policy(self) -> None:
        self._seal_to(POLICY_BLOB, BlobKind.POLICY, self.state.policy_book.to_bytes())

    def persist_stats(self) -> None:
        self._seal_to(STATS_BLOB, BlobKind.STATS, self.state.stats.to_bytes())

    def restore(self) -> None:
        """Recovers user keys, policy and statistics from sealed storage.

        Raises:
            MeasurementMismatch: Raised when the store was sealed by a different enclave.
            AuthFailure: Raised when a blob was tampered with.
        """
        table: bytes | None = self._unseal_from(USER_KEYS_BLOB)
        if table is not None:
            self.state.user_keys.clear()
            self.state.user_keys.update(decode_user_table(table))
        bundle: bytes | None = self._unseal_from(POLICY_BLOB)
        if bundle is not None:
            self.state.policy_book.load(bundle)
        counters: bytes | None = self._unseal_from(STATS_BLOB)
        if counters is not None:
            restored_stats: RuleStats = RuleStats.from_bytes(counters)
            self.state.stats.hit_count.update(restored_stats.hit_count)
            self.state.stats.bytes_inspected = restored_stats.bytes_inspected
        matches: int = self.match_store.restore()
        self.runtime.resume_seal_counter()
        logger.info(
            "restored %d users, %d rules, %d stored matches",
            len(self.state.user_keys),
            len(self.state.policy),
            matches,
        )

    # Operations

    def register_user(self, user_id: bytes, user_key: bytes) -> None:
        """Stores or replaces a user's key and seals the table.

        A new key restarts the user's delivery counters; re-sending the same key
        keeps them.
        """
        previous: SymKey | None = self.state.user_keys.get(bytes(user_id))
        self.state.user_keys[bytes(user_id)] = SymKey(user_key)
        if previous is not None and previous.bytes != bytes(user_key):
            self.inspector.forget_delivery_counter(user_id)
        self.persist_user_keys()
        logger.info("user %s registered", bytes(user_id).hex())

    def submit_policy(self, issuer_id: bytes, bundle: bytes) -> bytes:
        """Merges an issuer's bundle, seals the policy and returns its version."""
        version: bytes = self.state.policy_book.submit_bundle(issuer_id, bundle).version
        self.persist_policy()
        return version

    def finalize_session(self, session_id: bytes) -> SessionSummary:
        summary: SessionSummary = self.inspector.finalize_session(session_id)
        self.persist_stats()
        return summary

    def audit_report(self) -> AuditReport:
        """Audits the current policy: static part when a corpus is loaded, dynamic part after traffic."""
        policy: CompiledPolicy = self.state.policy
        report: AuditReport = AuditReport()
        if self.corpus is not None:
            report = report.merge(
                audit_static(policy, self.corpus, self.settings.theta_static, self.settings.min_corpus_length)
            )
        if self.state.stats.bytes_inspected:
            report = report.merge(audit_dynamic(policy, self.state.stats, self.settings.theta_dynamic))
        for rule_id in report.flagged():
            logger.warning("rule %s flagged by audit", rule_id.hex())
        return report

    # Network inbox

    def handle(self, frame: bytes, sender: str) -> None:
        """Processes one inbound frame; replies go to `sender` through the host.

        Errors are answered with an Error frame carrying only the exception's
        class name.
        """
        try:
            msg_type, body, end = decode_frame(frame)
            if end != len(frame):
                raise WireFormatError("Trailing bytes after frame.")
            self._dispatch(msg_type, body, sender)
        except _REPORTED_ERRORS as e:
            logger.info("rejected message from %s: %s", sender, type(e).__name__)
            self.host.send(sender, encode_error(1, type(e).__name__))

    def _dispatch(self, msg_type: MsgType, body: bytes, sender: str) -> None:
        match msg_type:
            case MsgType.ATTEST_CHALLENGE:
                nonce: bytes = decode_attest_challenge(body)
                self.host.send(sender, self.runtime.attest(nonce).to_frame())
            case MsgType.CHANNEL_OPEN:
                client_public, enclave_public = decode_channel_open(body)
                channel = self.runtime.accept_channel(client_public, enclave_public)
                self.state.channels[channel.channel_id] = channel
                logger.debug("channel %s opened by %s", channel.channel_id.hex(), sender)
            case MsgType.CHANNEL_MSG:
                self._on_channel_msg(body, sender)
            case MsgType.REGISTER_USER | MsgType.POLICY_SUBMIT:
                raise ChannelRequired(f"{msg_type.name} must arrive over an attested channel.")
            case MsgType.KEY_DELIVERY:
                self.inspector.ingest_key_delivery(KeyDeliveryMessage.from_body(body))
            case MsgType.TRAFFIC_RECORD:
                self.inspector.ingest_record(TrafficRecord.from_body(body))
            case MsgType.SESSION_CLOSE:
                self.host.send(sender, self.finalize_session(decode_session_close(body)).to_frame())
            case MsgType.VIEWER_HELLO:
                self.host.send(sender, encode_viewer_challenge(self.viewer.issue_challenge(decode_viewer_hello(body))))
            case MsgType.VIEWER_AUTH:
                token = self.viewer.viewer_authenticate(*decode_viewer_auth(body))
                self.host.send(sender, encode_viewer_token(token.token_id, token.expiry))
            case MsgType.VIEWER_FETCH:
                count, envelope = self.viewer.fetch_matches(decode_viewer_fetch(body))
                self.host.send(sender, encode_viewer_resp(count, envelope.nonce, envelope.ciphertext))
            case MsgType.AUDIT_REQUEST:
                report: AuditReport = self.audit_report()
                self.persist_stats()
                self.host.send(sender, report.to_frame())
            case _:
                raise UnexpectedMessage(f"The enclave does not accept {msg_type.name}.")

    def _on_channel_msg(self, body: bytes, sender: str) -> None:
        channel_id, _, _ = decode_channel_msg(body)
        channel = self.state.channels.get(channel_id)
        if channel is None:
            raise HandshakeFailure("Unknown channel.")
        payload: bytes = channel.open(body)
        inner_type, inner_body, end = decode_frame(payload)
        if end != len(payload):
            raise WireFormatError("Trailing bytes after channel payload.")
        try:
            match inner_type:
                case MsgType.REGISTER_USER:
                    self.register_user(*decode_register_user(inner_body))
                    reply: bytes = encode_ack(AckStatus.OK)
                case MsgType.POLICY_SUBMIT:
                    reply = encode_ack(AckStatus.OK, self.submit_policy(*decode_policy_submit(inner_body)))
                case _:
                    raise UnexpectedMessage(f"{inner_type.name} is not a channel message.")
        except _REPORTED_ERRORS as e:
            logger.info("channel request from %s rejected: %s", sender, type(e).__name__)
            reply = encode_ack(AckStatus.REJECTED, type(e).__name__.encode("ascii"))
        self.host.send(sender, channel.seal(reply))
