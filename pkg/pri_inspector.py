"""Provides the enclaved inspection pipeline.

Provides `Inspector`, which takes escrowed session keys and encrypted traffic
records, decrypts them, matches the reassembled plaintext stream against the
current policy and reports what it found: content-free alerts to the SIM sink,
sealed matches to the owner's match log and, in prevent mode, the decision to
forward each record unchanged or to drop the session.

Also provides `seal_record` / `open_record`, the record protection shared by
the endpoints and the inspector, and `open_key_delivery`.
"""

import logging
import threading
import time
from collections import deque
from enum import StrEnum, auto
from typing import Callable, Mapping, Protocol

from alert_record import Alert, AlertType
from match_record import Match, MatchRecord
from pri_crypto import AuthFailure, Envelope, SymKey, aead_open, aead_seal, counter_nonce
from pri_enclave import HostInterface
from pri_matcher import CompiledPolicy, match_stream
from pri_policy import RuleStats
from pri_wire import (
    ID_SIZE,
    MsgType,
    KeyDeliveryMessage,
    TrafficRecord,
    encode_forward,
    encode_frame,
    expect_end,
    take,
    take_int,
)
from rule_record import RuleAction

logger = logging.getLogger(__name__)


class InspectorError(Exception):
    """Base class for inspection errors."""


class UnknownUser(InspectorError):
    """Exception raised for a key delivery of a user that never registered."""


class UnknownSession(InspectorError):
    """Exception raised when finalizing a session that was never seen."""


class SeqGap(InspectorError):
    """Exception raised when a record's seq is not the next one of its session."""


class ReplayedDelivery(InspectorError):
    """Exception raised for a key delivery whose counter is not fresh."""


class InspectionMode(StrEnum):
    detect = auto()
    prevent = auto()


class SessionStatus(StrEnum):
    awaiting_key = auto()
    active = auto()
    dropped = auto()
    closed = auto()
    failed = auto()


class OutcomeKind(StrEnum):
    clean = auto()
    matched = auto()
    forward = auto()
    drop = auto()
    held = auto()
    buffered = auto()


def seal_record(session_key: SymKey, session_id: bytes, seq: int, payload: bytes) -> TrafficRecord:
    """Encrypts one chunk of session plaintext as a TrafficRecord."""
    record: TrafficRecord = TrafficRecord(session_id, seq, b"")
    envelope: Envelope = aead_seal(session_key, counter_nonce(seq), record.aad(), payload)
    record.ciphertext = envelope.ciphertext
    return record


def open_record(session_key: SymKey, record: TrafficRecord) -> bytes:
    """Decrypts a TrafficRecord.

    Raises:
        AuthFailure: Raised for a wrong key or a tampered record.
    """
    nonce: bytes = counter_nonce(record.seq)
    return aead_open(session_key, nonce, record.aad(), Envelope(nonce, record.ciphertext))


def open_key_delivery(user_key: SymKey, message: KeyDeliveryMessage) -> SymKey:
    """Recovers the session key from a delivery.

    Raises:
        AuthFailure: Raised for a wrong user key, or when any field was altered.
    """
    nonce: bytes = counter_nonce(message.counter)
    if message.nonce != nonce:
        raise AuthFailure("Delivery nonce does not match its counter.")
    return SymKey(aead_open(user_key, nonce, message.aad(), Envelope(nonce, message.ciphertext)))


class MatchSink(Protocol):
    def store_match(self, record: MatchRecord) -> None: ...


class PolicySource(Protocol):
    policy: CompiledPolicy


class SessionContext:
    """Inspection state of one session."""

    def __init__(self, session_id: bytes, mode: InspectionMode) -> None:
        self.session_id: bytes = bytes(session_id)
        self.mode: InspectionMode = mode
        self.owner: bytes | None = None
        self.key: SymKey | None = None
        self.status: SessionStatus = SessionStatus.awaiting_key
        self.stream_offset: int = 0
        self.carry: bytes = b""
        self.next_seq: int = 0
        self.pending: list[TrafficRecord] = []
        self.pending_bytes: int = 0
        # (record, plaintext start, plaintext end) of records not yet released
        self.held: deque[tuple[TrafficRecord, int, int]] = deque()
        self.cut_seq: int | None = None
        self.records_seen: int = 0
        self.ciphertext_bytes: int = 0
        self.forwarded: int = 0
        self.dropped: int = 0
        self.match_count: int = 0
        self.lock: threading.Lock = threading.Lock()

    @property
    def finished(self) -> bool:
        return self.status in (SessionStatus.dropped, SessionStatus.failed, SessionStatus.closed)

    def __repr__(self) -> str:
        return f"SessionContext(id={self.session_id.hex()}, status={self.status}, offset={self.stream_offset})"


class InspectionOutcome:
    """What one ingest step decided.

    `forwarded` lists every record released by this step, `dropped` every
    record discarded by it; in prevent mode either may include records held
    by earlier steps.
    """

    def __init__(self, kind: OutcomeKind, matches: list[Match] | None = None) -> None:
        self.kind: OutcomeKind = kind
        self.matches: list[Match] = list(matches or [])
        self.forwarded: list[TrafficRecord] = []
        self.dropped: list[TrafficRecord] = []

    def __repr__(self) -> str:
        return f"InspectionOutcome({self.kind}, matches={len(self.matches)}, forwarded={len(self.forwarded)})"


class SessionSummary:
    """End-of-session accounting, free of plaintext.

    Body: `session_id(16) ‖ status(1) ‖ bytes(8) ‖ records(8) ‖ forwarded(8) ‖ dropped(8) ‖ matches(8)`.
    """

    __statuses: list[SessionStatus] = list(SessionStatus)

    def __init__(
        self,
        session_id: bytes,
        status: SessionStatus,
        bytes_inspected: int,
        records_seen: int,
        forwarded: int,
        dropped: int,
        match_count: int,
    ) -> None:
        self.session_id: bytes = bytes(session_id)
        self.status: SessionStatus = SessionStatus(status)
        self.bytes_inspected: int = bytes_inspected
        self.records_seen: int = records_seen
        self.forwarded: int = forwarded
        self.dropped: int = dropped
        self.match_count: int = match_count

    def __iter__(self):
        yield "session_id", self.session_id.hex()
        yield "status", str(self.status)
        yield "bytes_inspected", self.bytes_inspected
        yield "records_seen", self.records_seen
        yield "forwarded", self.forwarded
        yield "dropped", self.dropped
        yield "match_count", self.match_count

    def to_dict(self) -> dict:
        return dict(self)

    def to_frame(self) -> bytes:
        counters: bytes = b"".join(
            value.to_bytes(8, "big")
            for value in (self.bytes_inspected, self.records_seen, self.forwarded, self.dropped, self.match_count)
        )
        return encode_frame(
            MsgType.SESSION_SUMMARY, self.session_id + bytes([self.__statuses.index(self.status)]) + counters
        )

    @classmethod
    def from_body(cls, body: bytes) -> "SessionSummary":
        session_id, offset = take(body, 0, ID_SIZE)
        status, offset = take_int(body, offset, 1)
        values: list[int] = []
        for _ in range(5):
            value, offset = take_int(body, offset, 8)
            values.append(value)
        expect_end(body, offset)
        return cls(session_id, cls.__statuses[status], *values)

    def __repr__(self) -> str:
        return str(dict(self))


def _now_ms() -> int:
    return int(time.time() * 1000)


class Inspector:
    """The enclave's inspection engine.

    Sessions are independent; within one session records are processed
    strictly in seq order under the session's lock.
    """

    def __init__(
        self,
        user_keys: Mapping[bytes, SymKey],
        policy_source: PolicySource,
        stats: RuleStats,
        match_store: MatchSink,
        host: HostInterface,
        mode: InspectionMode = InspectionMode.detect,
        key_buffer_limit: int = 1 << 20,
        max_record_payload: int = 16384,
        clock: Callable[[], int] = _now_ms,
        sim_address: str = "sim",
        forward_address: str = "endpoint",
    ) -> None:
        """Creates an Inspector.

        Args:
            user_keys (Mapping[bytes, SymKey]): Registered user keys by user_id.
            policy_source (PolicySource): Holds the current compiled policy.
            stats (RuleStats): Counters for the dynamic audit.
            match_store (MatchSink): Sealed match persistence.
            host (HostInterface): Output path for alerts and forwarded records.
            mode (InspectionMode): Mode for sessions whose first record names none.
            key_buffer_limit (int): Ciphertext bytes buffered per session before its key.
            max_record_payload (int): Largest plaintext a record may carry.
            clock (Callable[[], int]): Milliseconds since the epoch.
            sim_address (str): Where alerts are sent.
            forward_address (str): Where released records are sent in prevent mode.
        """
        self.user_keys: Mapping[bytes, SymKey] = user_keys
        self.policy_source: PolicySource = policy_source
        self.stats: RuleStats = stats
        self.match_store: MatchSink = match_store
        self.host: HostInterface = host
        self.mode: InspectionMode = InspectionMode(mode)
        self.key_buffer_limit: int = key_buffer_limit
        self.max_record_payload: int = max_record_payload
        self.clock: Callable[[], int] = clock
        self.sim_address: str = sim_address
        self.forward_address: str = forward_address
        self.sessions: dict[bytes, SessionContext] = {}
        self._last_counter: dict[bytes, int] = {}
        self._lock: threading.Lock = threading.Lock()

    def _session(self, session_id: bytes, mode: InspectionMode | None = None) -> SessionContext:
        with self._lock:
            ctx: SessionContext | None = self.sessions.get(session_id)
            if ctx is None:
                ctx = SessionContext(session_id, InspectionMode(mode or self.mode))
                self.sessions[session_id] = ctx
            return ctx

    def _alert(self, alert_type: AlertType, session_id: bytes, rule_id: bytes = bytes(ID_SIZE)) -> None:
        alert: Alert = Alert(alert_type, rule_id, session_id, self.clock())
        logger.debug("alert %s for session %s", alert_type.name, session_id.hex())
        self.host.send(self.sim_address, alert.to_frame())

    def ingest_key_delivery(self, message: KeyDeliveryMessage) -> list[InspectionOutcome]:
        """Installs an escrowed session key and processes buffered records.

        Args:
            message (KeyDeliveryMessage): The delivery from the owner's agent.

        Raises:
            UnknownUser: Raised when `message.user_id` never registered.
            AuthFailure: Raised when the delivery does not open under the user's key.
            ReplayedDelivery: Raised when the counter is not fresh or the session
                already has a key.

        Returns:
            list[InspectionOutcome]: Outcomes of the buffered records, in seq order.
        """
        user_key: SymKey | None = self.user_keys.get(message.user_id)
        if user_key is None:
            raise UnknownUser(f"User {message.user_id.hex()} is not registered.")
        session_key: SymKey = open_key_delivery(user_key, message)
        with self._lock:
            if message.counter <= self._last_counter.get(message.user_id, -1):
                raise ReplayedDelivery(f"Stale delivery counter for user {message.user_id.hex()}.")
            known: SessionContext | None = self.sessions.get(message.session_id)
            if known is not None and known.key is not None:
                raise ReplayedDelivery(f"Session {message.session_id.hex()} already has a key.")
            self._last_counter[message.user_id] = message.counter

        ctx: SessionContext = self._session(message.session_id)
        outcomes: list[InspectionOutcome] = []
        with ctx.lock:
            ctx.key = session_key
            ctx.owner = message.user_id
            logger.info("session %s keyed for user %s", ctx.session_id.hex(), ctx.owner.hex())
            if ctx.status == SessionStatus.awaiting_key:
                ctx.status = SessionStatus.active
                pending, ctx.pending, ctx.pending_bytes = ctx.pending, [], 0
                for record in pending:
                    outcomes.append(self._inspect(ctx, record))
                    if ctx.finished:
                        break
        return outcomes

    def forget_delivery_counter(self, user_id: bytes) -> None:
        """Lets a re-keyed user start delivery counters from 0 again."""
        with self._lock:
            self._last_counter.pop(bytes(user_id), None)

    def ingest_record(self, record: TrafficRecord, mode: InspectionMode | None = None) -> InspectionOutcome:
        """Inspects one traffic record.

        Args:
            record (TrafficRecord): The next record of its session.
            mode (InspectionMode | None): Mode of the session; fixed by its first record.

        Raises:
            SeqGap: Raised when the record is not the session's next seq; the
                session fails.

        Returns:
            InspectionOutcome: In detect mode `clean` or `matched`; in prevent mode
            `forward`, `drop` or `held`; `buffered` while the key is missing.
        """
        ctx: SessionContext = self._session(record.session_id, mode)
        with ctx.lock:
            prevent: bool = ctx.mode == InspectionMode.prevent
            if ctx.finished:
                outcome: InspectionOutcome = InspectionOutcome(OutcomeKind.drop if prevent else OutcomeKind.clean)
                if prevent:
                    ctx.dropped += 1
                    outcome.dropped.append(record)
                return outcome
            if record.seq != ctx.next_seq:
                self._fail(ctx)
                raise SeqGap(f"Session {ctx.session_id.hex()} expected seq {ctx.next_seq}, got {record.seq}.")
            ctx.next_seq += 1
            ctx.records_seen += 1
            ctx.ciphertext_bytes += len(record.ciphertext)

            if ctx.key is None:
                ctx.pending.append(record)
                ctx.pending_bytes += len(record.ciphertext)
                if ctx.pending_bytes <= self.key_buffer_limit:
                    return InspectionOutcome(OutcomeKind.buffered)
                logger.warning("session %s exceeded the key buffer", ctx.session_id.hex())
                self._alert(AlertType.missing_key, ctx.session_id)
                outcome = InspectionOutcome(OutcomeKind.drop if prevent else OutcomeKind.clean)
                self._fail(ctx, outcome)
                return outcome
            return self._inspect(ctx, record)

    def _fail(self, ctx: SessionContext, outcome: InspectionOutcome | None = None) -> None:
        """Marks a session failed; held and buffered records are never forwarded."""
        discarded: list[TrafficRecord] = [record for record, _, _ in ctx.held] + ctx.pending
        if ctx.mode == InspectionMode.prevent:
            ctx.dropped += len(discarded)
            if outcome is not None:
                outcome.dropped.extend(discarded)
        ctx.held.clear()
        ctx.pending, ctx.pending_bytes = [], 0
        ctx.status = SessionStatus.failed

    def _reject(self, ctx: SessionContext, record: TrafficRecord) -> InspectionOutcome:
        """Fails the session on a record that cannot be inspected; prevent mode drops it."""
        self._alert(AlertType.decrypt_fail, ctx.session_id)
        prevent: bool = ctx.mode == InspectionMode.prevent
        outcome: InspectionOutcome = InspectionOutcome(OutcomeKind.drop if prevent else OutcomeKind.clean)
        if prevent:
            ctx.held.append((record, ctx.stream_offset, ctx.stream_offset))
        self._fail(ctx, outcome)
        return outcome

    def _inspect(self, ctx: SessionContext, record: TrafficRecord) -> InspectionOutcome:
        prevent: bool = ctx.mode == InspectionMode.prevent
        try:
            plaintext: bytes = open_record(ctx.key, record)
        except AuthFailure:
            logger.warning("record %d of session %s failed to decrypt", record.seq, ctx.session_id.hex())
            return self._reject(ctx, record)
        if not 1 <= len(plaintext) <= self.max_record_payload:
            logger.warning(
                "record %d of session %s carries %d bytes", record.seq, ctx.session_id.hex(), len(plaintext)
            )
            return self._reject(ctx, record)

        policy: CompiledPolicy = self.policy_source.policy
        start: int = ctx.stream_offset
        carry: bytes = ctx.carry[len(ctx.carry) - min(len(ctx.carry), policy.carry_length) :]
        matches, ctx.carry = match_stream(policy, carry, plaintext, start, session_id=ctx.session_id)
        ctx.stream_offset += len(plaintext)
        self.stats.add_bytes(len(plaintext))
        self._report(ctx, matches)

        if not prevent:
            return InspectionOutcome(OutcomeKind.matched if matches else OutcomeKind.clean, matches)
        ctx.held.append((record, start, ctx.stream_offset))
        return self._decide(ctx, policy, matches, record)

    def _report(self, ctx: SessionContext, matches: list[Match]) -> None:
        for match in matches:
            self.stats.add_hit(match.rule_id)
            ctx.match_count += 1
            self._alert(AlertType.match, ctx.session_id, match.rule_id)
            self.match_store.store_match(MatchRecord(ctx.owner, match, self.clock()))

    def _decide(
        self,
        ctx: SessionContext,
        policy: CompiledPolicy,
        matches: list[Match],
        record: TrafficRecord | None,
        final: bool = False,
    ) -> InspectionOutcome:
        """Applies drop-action matches and releases records that can no longer be cut."""
        for match in matches:
            rule = policy.by_id.get(match.rule_id)
            if rule is None or rule.action != RuleAction.drop:
                continue
            containing: int = ctx.held[0][0].seq if ctx.held else ctx.next_seq
            for held_record, begin, end in ctx.held:
                if begin < match.end_offset <= end:
                    containing = held_record.seq
                    break
            if ctx.cut_seq is None or containing < ctx.cut_seq:
                ctx.cut_seq = containing

        outcome: InspectionOutcome = InspectionOutcome(OutcomeKind.held, matches)
        while ctx.held:
            front, _, end = ctx.held[0]
            if ctx.cut_seq is not None and front.seq >= ctx.cut_seq:
                ctx.dropped += len(ctx.held)
                outcome.dropped.extend(held_record for held_record, _, _ in ctx.held)
                ctx.held.clear()
                ctx.status = SessionStatus.dropped
                logger.info("session %s dropped before record %d", ctx.session_id.hex(), ctx.cut_seq)
                break
            if not final and ctx.stream_offset < end + policy.hold_length:
                break
            ctx.held.popleft()
            ctx.forwarded += 1
            outcome.forwarded.append(front)
            self.host.send(self.forward_address, encode_forward(front.to_frame()))

        if record is not None:
            if any(released is record for released in outcome.forwarded):
                outcome.kind = OutcomeKind.forward
            elif any(discarded is record for discarded in outcome.dropped):
                outcome.kind = OutcomeKind.drop
        return outcome

    def finalize_session(self, session_id: bytes) -> SessionSummary:
        """Ends a session: resolves pending regex windows and releases held records.

        Raises:
            UnknownSession: Raised when the session was never seen.

        Returns:
            SessionSummary: Counts and final status, no plaintext.
        """
        ctx: SessionContext | None = self.sessions.get(session_id)
        if ctx is None:
            raise UnknownSession(f"Session {bytes(session_id).hex()} is unknown.")
        with ctx.lock:
            if ctx.status == SessionStatus.awaiting_key:
                if ctx.records_seen:
                    self._alert(AlertType.missing_key, ctx.session_id)
                    self._fail(ctx)
                else:
                    ctx.status = SessionStatus.closed
            elif ctx.status == SessionStatus.active:
                policy: CompiledPolicy = self.policy_source.policy
                carry: bytes = ctx.carry[len(ctx.carry) - min(len(ctx.carry), policy.carry_length) :]
                matches, ctx.carry = match_stream(
                    policy, carry, b"", ctx.stream_offset, final=True, session_id=ctx.session_id
                )
                self._report(ctx, matches)
                if ctx.mode == InspectionMode.prevent:
                    self._decide(ctx, policy, matches, None, final=True)
                if ctx.status == SessionStatus.active:
                    ctx.status = SessionStatus.closed
            ctx.carry = b""
            summary: SessionSummary = SessionSummary(
                ctx.session_id,
                ctx.status,
                ctx.stream_offset,
                ctx.records_seen,
                ctx.forwarded,
                ctx.dropped,
                ctx.match_count,
            )
        logger.info(
            "session %s finalized: %s, %d matches", ctx.session_id.hex(), ctx.status, ctx.match_count
        )
        return summary
