"""Provides the enclave's policy state and the rule-abuse audit.

Provides `PolicyBook`, which merges rule submissions by issuer and keeps the
current `CompiledPolicy`; `RuleStats`, the live hit and byte counters; and the
static and dynamic audits that flag rule sets able to exfiltrate traffic,
reported as an `AuditReport` carrying rates and flags only.
"""

import logging
import threading
from enum import StrEnum, auto
from fractions import Fraction

import pandas as pd

from pri_matcher import CompiledPolicy, compile_policy, count_matches
from pri_wire import ID_SIZE, MsgType, WireFormatError, encode_frame, expect_end, take, take_int
from rule_record import MAX_SPAN_CAP, Rule, decode_bundle, encode_bundle

logger = logging.getLogger(__name__)


class PolicyError(Exception):
    """Base class for policy and audit errors."""


class CorpusTooSmall(PolicyError):
    """Exception raised when the reference corpus is too short for a static audit."""


class NoTrafficYet(PolicyError):
    """Exception raised when hits per byte are requested before any traffic."""


class PolicyBook:
    """The rule sets of every issuer and the policy compiled from their union.

    A submission replaces the issuer's previous rules; an empty submission
    withdraws them. The compiled policy is swapped atomically, so a record is
    always inspected under one policy.
    """

    def __init__(self, max_span_cap: int = MAX_SPAN_CAP) -> None:
        self.max_span_cap: int = max_span_cap
        self._by_issuer: dict[bytes, list[Rule]] = {}
        self._lock: threading.Lock = threading.Lock()
        self.policy: CompiledPolicy = compile_policy([])

    def rules(self) -> list[Rule]:
        return list(self.policy.rules)

    def issuers(self) -> list[bytes]:
        return sorted(self._by_issuer)

    def submit(self, issuer_id: bytes, rules: list[Rule]) -> CompiledPolicy:
        """Replaces an issuer's rules and recompiles.

        Args:
            issuer_id (bytes): The submitting issuer.
            rules (list[Rule]): Its complete new rule set.

        Raises:
            DuplicateRuleId: Raised when a rule_id collides with any other rule;
                the book is left unchanged.

        Returns:
            CompiledPolicy: The new policy.
        """
        owned: list[Rule] = [
            Rule(rule.rule_id, rule.kind, rule.action, rule.max_span, rule.pattern, issuer_id) for rule in rules
        ]
        with self._lock:
            merged: dict[bytes, list[Rule]] = dict(self._by_issuer)
            if owned:
                merged[bytes(issuer_id)] = owned
            else:
                merged.pop(bytes(issuer_id), None)
            policy: CompiledPolicy = compile_policy([rule for group in merged.values() for rule in group])
            self._by_issuer = merged
            self.policy = policy
        logger.info(
            "issuer %s now holds %d rules; policy %s has %d rules",
            bytes(issuer_id).hex(),
            len(owned),
            policy.version.hex()[:16],
            len(policy),
        )
        return policy

    def submit_bundle(self, issuer_id: bytes, bundle: bytes) -> CompiledPolicy:
        """Decodes, validates and submits a binary rule bundle."""
        return self.submit(issuer_id, decode_bundle(bundle, self.max_span_cap))

    def to_bytes(self) -> bytes:
        """The full rule set as one bundle; issuer ids travel inside each entry."""
        return encode_bundle(list(self.policy.rules))

    def load(self, data: bytes) -> CompiledPolicy:
        """Replaces the whole book with a bundle written by `to_bytes`."""
        grouped: dict[bytes, list[Rule]] = {}
        for rule in decode_bundle(data, self.max_span_cap):
            grouped.setdefault(rule.issuer_id, []).append(rule)
        policy: CompiledPolicy = compile_policy([rule for group in grouped.values() for rule in group])
        with self._lock:
            self._by_issuer = grouped
            self.policy = policy
        return policy

    @classmethod
    def from_bytes(cls, data: bytes, max_span_cap: int = MAX_SPAN_CAP) -> "PolicyBook":
        book: PolicyBook = cls(max_span_cap)
        book.load(data)
        return book


class RuleStats:
    """Monotone counters for the dynamic audit, safe to update from many sessions."""

    def __init__(self) -> None:
        self._lock: threading.Lock = threading.Lock()
        self.hit_count: dict[bytes, int] = {}
        self.bytes_inspected: int = 0

    def add_bytes(self, count: int) -> None:
        if count < 0:
            raise ValueError("Byte counts never decrease.")
        with self._lock:
            self.bytes_inspected += count

    def add_hit(self, rule_id: bytes, count: int = 1) -> None:
        if count < 0:
            raise ValueError("Hit counts never decrease.")
        with self._lock:
            self.hit_count[rule_id] = self.hit_count.get(rule_id, 0) + count

    def hits(self, rule_id: bytes) -> int:
        return self.hit_count.get(rule_id, 0)

    def hits_per_byte(self, rule_id: bytes) -> Fraction:
        """Returns the exact hit rate of a rule.

        Raises:
            NoTrafficYet: Raised when no byte has been inspected.
        """
        with self._lock:
            if self.bytes_inspected == 0:
                raise NoTrafficYet("No traffic has been inspected yet.")
            return Fraction(self.hit_count.get(rule_id, 0), self.bytes_inspected)

    def to_bytes(self) -> bytes:
        """`bytes_inspected(8) ‖ count(4) ‖ {rule_id(16) ‖ hits(8)}*`."""
        with self._lock:
            items: list[tuple[bytes, int]] = sorted(self.hit_count.items())
            return (
                self.bytes_inspected.to_bytes(8, "big")
                + len(items).to_bytes(4, "big")
                + b"".join(rule_id + hits.to_bytes(8, "big") for rule_id, hits in items)
            )

    @classmethod
    def from_bytes(cls, data: bytes) -> "RuleStats":
        stats: RuleStats = cls()
        stats.bytes_inspected, offset = take_int(data, 0, 8)
        count, offset = take_int(data, offset, 4)
        for _ in range(count):
            rule_id, offset = take(data, offset, ID_SIZE)
            stats.hit_count[rule_id], offset = take_int(data, offset, 8)
        expect_end(data, offset)
        return stats


class AuditFlag(StrEnum):
    static_abnormal = auto()
    dynamic_abnormal = auto()


def _threshold(theta: float | Fraction) -> Fraction:
    # str() keeps 1e-4 as exactly 1/10000 instead of the nearest binary float
    return theta if isinstance(theta, Fraction) else Fraction(str(theta))


class AuditEntry:
    """Audit result for one rule: exact rates and the flags they raise."""

    def __init__(
        self,
        rule_id: bytes,
        static_rate: Fraction | None = None,
        dynamic_rate: Fraction | None = None,
        flags: set[AuditFlag] | None = None,
    ) -> None:
        self.rule_id: bytes = bytes(rule_id)
        self.static_rate: Fraction | None = static_rate
        self.dynamic_rate: Fraction | None = dynamic_rate
        self.flags: set[AuditFlag] = set(flags or ())

    def __iter__(self):
        yield "rule_id", self.rule_id.hex()
        yield "static_rate", None if self.static_rate is None else float(self.static_rate)
        yield "dynamic_rate", None if self.dynamic_rate is None else float(self.dynamic_rate)
        yield "static_abnormal", AuditFlag.static_abnormal in self.flags
        yield "dynamic_abnormal", AuditFlag.dynamic_abnormal in self.flags

    def to_dict(self) -> dict:
        return dict(self)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def __repr__(self) -> str:
        return str(dict(self))


def _put_rate(rate: Fraction | None) -> bytes:
    if rate is None:
        return bytes(16)
    return rate.numerator.to_bytes(8, "big") + rate.denominator.to_bytes(8, "big")


def _take_rate(data: bytes, offset: int) -> tuple[Fraction | None, int]:
    numerator, offset = take_int(data, offset, 8)
    denominator, offset = take_int(data, offset, 8)
    return (None if denominator == 0 else Fraction(numerator, denominator)), offset


class AuditReport:
    """Per-rule audit results; never carries a pattern.

    Wire body: `count(4) ‖ {rule_id(16) ‖ flags(1) ‖ static num/den(8+8) ‖ dynamic num/den(8+8)}*`
    where a zero denominator means the rate was not computed.
    """

    __flag_bits: dict[AuditFlag, int] = {AuditFlag.static_abnormal: 1, AuditFlag.dynamic_abnormal: 2}

    def __init__(self, entries: list[AuditEntry] | None = None) -> None:
        self.entries: dict[bytes, AuditEntry] = {}
        for entry in entries or []:
            self.entries[entry.rule_id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries.values(), key=lambda entry: entry.rule_id))

    def __getitem__(self, rule_id: bytes) -> AuditEntry:
        return self.entries[rule_id]

    def entry(self, rule_id: bytes) -> AuditEntry:
        if rule_id not in self.entries:
            self.entries[rule_id] = AuditEntry(rule_id)
        return self.entries[rule_id]

    def flagged(self) -> list[bytes]:
        return [entry.rule_id for entry in self if entry.flagged]

    def merge(self, other: "AuditReport") -> "AuditReport":
        """Combines a static and a dynamic report into one."""
        merged: AuditReport = AuditReport()
        for report in (self, other):
            for entry in report:
                target: AuditEntry = merged.entry(entry.rule_id)
                if entry.static_rate is not None:
                    target.static_rate = entry.static_rate
                if entry.dynamic_rate is not None:
                    target.dynamic_rate = entry.dynamic_rate
                target.flags |= entry.flags
        return merged

    def to_body(self) -> bytes:
        parts: list[bytes] = [len(self.entries).to_bytes(4, "big")]
        for entry in self:
            bits: int = sum(bit for flag, bit in self.__flag_bits.items() if flag in entry.flags)
            parts.append(entry.rule_id + bytes([bits]) + _put_rate(entry.static_rate) + _put_rate(entry.dynamic_rate))
        return b"".join(parts)

    def to_frame(self) -> bytes:
        return encode_frame(MsgType.AUDIT_REPORT, self.to_body())

    @classmethod
    def from_body(cls, body: bytes) -> "AuditReport":
        count, offset = take_int(body, 0, 4)
        entries: list[AuditEntry] = []
        for _ in range(count):
            rule_id, offset = take(body, offset, ID_SIZE)
            bits, offset = take_int(body, offset, 1)
            static_rate, offset = _take_rate(body, offset)
            dynamic_rate, offset = _take_rate(body, offset)
            flags: set[AuditFlag] = {flag for flag, bit in cls.__flag_bits.items() if bits & bit}
            entries.append(AuditEntry(rule_id, static_rate, dynamic_rate, flags))
        if offset != len(body):
            raise WireFormatError("Trailing bytes after audit report.")
        return cls(entries)

    def to_dataframe(self) -> pd.DataFrame:
        """Returns the report as a DataFrame, one row per rule."""
        columns: list[str] = ["rule_id", "static_rate", "dynamic_rate", "static_abnormal", "dynamic_abnormal"]
        return pd.DataFrame([entry.to_dict() for entry in self], columns=columns)

    def to_csv(self, file_path: str) -> None:
        self.to_dataframe().to_csv(file_path, index=False)

    def __repr__(self) -> str:
        return f"AuditReport(rules={len(self.entries)}, flagged={len(self.flagged())})"


def audit_static(
    policy: CompiledPolicy,
    corpus: bytes,
    theta_static: float | Fraction,
    min_corpus_length: int = 100_000,
) -> AuditReport:
    """Rates every rule by its match density on a reference corpus.

    Args:
        policy (CompiledPolicy): The rules to audit.
        corpus (bytes): Plain-language reference text.
        theta_static (float | Fraction): Matches per byte above which a rule is flagged.
        min_corpus_length (int): Shortest corpus that gives meaningful rates.

    Raises:
        CorpusTooSmall: Raised when the corpus is shorter than `min_corpus_length`.

    Returns:
        AuditReport: Static rates and `static_abnormal` flags.
    """
    if len(corpus) < min_corpus_length:
        raise CorpusTooSmall(f"Corpus has {len(corpus)} bytes, at least {min_corpus_length} are needed.")
    theta: Fraction = _threshold(theta_static)
    report: AuditReport = AuditReport()
    for rule_id, hits in count_matches(policy, corpus).items():
        rate: Fraction = Fraction(hits, len(corpus))
        report.entries[rule_id] = AuditEntry(
            rule_id, static_rate=rate, flags={AuditFlag.static_abnormal} if rate > theta else set()
        )
    logger.info("static audit over %d rules flagged %d", len(report), len(report.flagged()))
    return report


def audit_dynamic(policy: CompiledPolicy, stats: RuleStats, theta_dynamic: float | Fraction) -> AuditReport:
    """Rates every rule by its hits per inspected traffic byte.

    Raises:
        NoTrafficYet: Raised when no traffic has been inspected.
    """
    if stats.bytes_inspected == 0:
        raise NoTrafficYet("No traffic has been inspected yet.")
    theta: Fraction = _threshold(theta_dynamic)
    report: AuditReport = AuditReport()
    for rule in policy.rules:
        rate: Fraction = stats.hits_per_byte(rule.rule_id)
        report.entries[rule.rule_id] = AuditEntry(
            rule.rule_id, dynamic_rate=rate, flags={AuditFlag.dynamic_abnormal} if rate > theta else set()
        )
    logger.info("dynamic audit over %d rules flagged %d", len(report), len(report.flagged()))
    return report

