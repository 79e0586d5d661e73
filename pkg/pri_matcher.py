"""Provides the streaming rule matcher.

Compiles a rule set into a `CompiledPolicy` (an Aho-Corasick automaton over
all exact patterns plus the compiled regex set) and matches it against a
plaintext stream delivered in arbitrary chunks. `match_stream` keeps a carry
of the trailing `max_span - 1` bytes so that matches crossing chunk
boundaries are found exactly once, independently of how the stream was cut.

Regex rules use windowed semantics: a rule with span `m` matches at start `s`
iff the pattern matches at `s` within `stream[s : min(s + m, end)]`. A regex
match at `s` is therefore only final once `s + m` bytes of the stream have
been seen, or the stream has ended.
"""

import hashlib
import re
from typing import Iterator

import ahocorasick

from match_record import Match
from pri_wire import ZERO_ID
from rule_record import Rule, RuleAction, RuleKind, encode_bundle


class MatcherError(Exception):
    """Base class for errors while compiling a policy."""


class DuplicateRuleId(MatcherError):
    """Exception raised when two rules of one policy share a rule_id."""


class ExactMatcher:
    """Multi-pattern byte string matcher on a `pyahocorasick` automaton.

    Bytes map 1:1 onto code points through latin-1. Patterns are added with an
    integer value; `scan` reports every `(value, end)` pair, overlaps included.
    Equal patterns share one automaton key.
    """

    def __init__(self) -> None:
        self._automaton: ahocorasick.Automaton = ahocorasick.Automaton()
        self._values: dict[bytes, list[int]] = {}
        self.built: bool = False
        self.max_length: int = 0

    def __len__(self) -> int:
        return len(self._values)

    def add(self, pattern: bytes, value: int) -> None:
        if self.built:
            raise MatcherError("Cannot add patterns to a built automaton.")
        self._values.setdefault(bytes(pattern), []).append(value)
        self.max_length = max(self.max_length, len(pattern))

    def build(self) -> None:
        for pattern, values in self._values.items():
            self._automaton.add_word(pattern.decode("latin-1"), (len(pattern), tuple(values)))
        if self._values:
            self._automaton.make_automaton()
        self.built = True

    def scan(self, data: bytes, start: int = 0, end: int | None = None) -> Iterator[tuple[int, int]]:
        """Yields `(value, end_position)` for every pattern occurrence in `data[start:end]`."""
        if not self.built:
            raise MatcherError("Automaton is not built.")
        if not self._values:
            return
        stop: int = len(data) if end is None else end
        if stop <= start:
            return
        text: str = data[start:stop].decode("latin-1")
        for last, (_, values) in self._automaton.iter(text):
            for value in values:
                yield value, start + last + 1


class CompiledPolicy:
    """An immutable, compiled rule set.

    Attributes:
        rules: Rules sorted by rule_id.
        carry_length: Largest `max_span - 1` over all rules.
        hold_length: Largest `max_span - 1` over drop-action regex rules; how
            far a prevent-mode inspector must look past a record before the
            record can be released.
        version: SHA-256 over the canonically sorted rule bundle.
    """

    def __init__(self, rules: list[Rule]) -> None:
        self.rules: tuple[Rule, ...] = tuple(sorted(rules, key=lambda rule: rule.rule_id))
        self.by_id: dict[bytes, Rule] = {rule.rule_id: rule for rule in self.rules}

        self.exact_rules: list[Rule] = [rule for rule in self.rules if rule.kind == RuleKind.exact]
        self.automaton: ExactMatcher = ExactMatcher()
        for value, rule in enumerate(self.exact_rules):
            self.automaton.add(rule.pattern, value)
        self.automaton.build()

        self.regexes: list[tuple[Rule, re.Pattern]] = [
            (rule, rule.compile_regex()) for rule in self.rules if rule.kind == RuleKind.regex
        ]

        self.carry_length: int = max((rule.max_span - 1 for rule in self.rules), default=0)
        self.hold_length: int = max(
            (rule.max_span - 1 for rule, _ in self.regexes if rule.action == RuleAction.drop), default=0
        )
        self.has_drop_regex: bool = any(rule.action == RuleAction.drop for rule, _ in self.regexes)
        self.version: bytes = hashlib.sha256(b"PRI1-policy" + encode_bundle(list(self.rules))).digest()

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __repr__(self) -> str:
        return f"CompiledPolicy(rules={len(self.rules)}, version={self.version.hex()[:16]})"


def compile_policy(rules: list[Rule]) -> CompiledPolicy:
    """Compiles rules into a streaming matcher.

    Args:
        rules (list[Rule]): Validated rules, in any order.

    Raises:
        DuplicateRuleId: Raised when two rules share a rule_id.

    Returns:
        CompiledPolicy: The compiled policy; an empty list matches nothing.
    """
    seen: set[bytes] = set()
    for rule in rules:
        if rule.rule_id in seen:
            raise DuplicateRuleId(f"Rule id {rule.rule_id.hex()} appears twice.")
        seen.add(rule.rule_id)
    return CompiledPolicy(rules)


def _windowed_regex(
    regex: re.Pattern, span: int, buffer: bytes, lo: int, hi: int, limit: int
) -> Iterator[tuple[int, int]]:
    """Yields `(start, end)` for starts in `[lo, hi]` with a match inside their window."""
    search_end: int = min(limit, hi + span)
    position: int = lo
    while position <= hi:
        found: re.Match | None = regex.search(buffer, position, search_end)
        if found is None:
            return
        start: int = found.start()
        if start > hi:
            return
        hit: re.Match | None = regex.match(buffer, start, min(start + span, limit))
        if hit is not None and hit.end() > start:
            yield start, hit.end()
        position = start + 1


def match_stream(
    policy: CompiledPolicy,
    carry: bytes,
    chunk: bytes,
    base_offset: int,
    final: bool = False,
    session_id: bytes = ZERO_ID,
) -> tuple[list[Match], bytes]:
    """Matches the next chunk of a stream.

    Args:
        policy (CompiledPolicy): The compiled rules.
        carry (bytes): The carry returned by the previous call (empty at stream start).
        chunk (bytes): The next plaintext bytes.
        base_offset (int): Global stream offset of `chunk[0]`.
        final (bool): Whether the stream ends after `chunk`; resolves every
            pending regex window.
        session_id (bytes): Session the reported matches belong to.

    Returns:
        tuple[list[Match], bytes]: Matches completed by this call, sorted by
        `(end, start, rule_id)`, and the new carry.
    """
    buffer: bytes = bytes(carry) + bytes(chunk)
    buffer_base: int = base_offset - len(carry)
    stream_end: int = base_offset + len(chunk)
    found: list[Match] = []

    if chunk and policy.automaton.max_length:
        scan_from: int = max(0, len(carry) - (policy.automaton.max_length - 1))
        for value, end in policy.automaton.scan(buffer, scan_from):
            if end <= len(carry):
                continue
            rule: Rule = policy.exact_rules[value]
            start: int = end - len(rule.pattern)
            found.append(Match(rule.rule_id, session_id, buffer_base + start, buffer_base + end, buffer[start:end]))

    for rule, regex in policy.regexes:
        span: int = rule.max_span
        lo: int = max(base_offset - span + 1, buffer_base, 0)
        hi: int = stream_end - 1 if final else stream_end - span
        if hi < lo:
            continue
        for start, end in _windowed_regex(regex, span, buffer, lo - buffer_base, hi - buffer_base, len(buffer)):
            found.append(Match(rule.rule_id, session_id, buffer_base + start, buffer_base + end, buffer[start:end]))

    found.sort(key=lambda match: (match.end_offset, match.start_offset, match.rule_id))
    keep: int = policy.carry_length
    new_carry: bytes = buffer[max(0, len(buffer) - keep) :] if keep else b""
    return found, new_carry


def match_buffer(policy: CompiledPolicy, data: bytes, session_id: bytes = ZERO_ID) -> list[Match]:
    """Matches a complete buffer in one call."""
    matches, _ = match_stream(policy, b"", data, 0, final=True, session_id=session_id)
    return matches


def count_matches(policy: CompiledPolicy, data: bytes) -> dict[bytes, int]:
    """Returns the number of matches of every rule on `data`, zeros included."""
    counts: dict[bytes, int] = {rule.rule_id: 0 for rule in policy.rules}
    for match in match_buffer(policy, data):
        counts[match.rule_id] += 1
    return counts


def oracle_matches(rules: list[Rule], stream: bytes) -> set[tuple[bytes, int, int]]:
    """Naive per-rule scan of a whole stream, used as the reference result.

    Returns:
        set[tuple[bytes, int, int]]: Every `(rule_id, start, end)`.
    """
    result: set[tuple[bytes, int, int]] = set()
    for rule in rules:
        if rule.kind == RuleKind.exact:
            position: int = stream.find(rule.pattern)
            while position != -1:
                result.add((rule.rule_id, position, position + len(rule.pattern)))
                position = stream.find(rule.pattern, position + 1)
            continue
        regex: re.Pattern = rule.compile_regex()
        for start in range(len(stream)):
            hit: re.Match | None = regex.match(stream, start, min(start + rule.max_span, len(stream)))
            if hit is not None and hit.end() > start:
                result.add((rule.rule_id, start, hit.end()))
    return result
