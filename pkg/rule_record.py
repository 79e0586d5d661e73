"""Provides a class for storing inspection rules.

Provides the class `Rule` for representing one confidential inspection rule,
together with functions for reading rules in the tab-separated authoring
format and for packing rule sets into the binary bundle carried to the
enclave.

Authoring format, one rule per line, tab separated::

    <rule_id: 32 hex>  <exact|regex>  <alert|drop>  <max_span>  <hex:..|re:..>

Lines starting with `#` and blank lines are ignored.
"""

import re
from enum import IntEnum, StrEnum, auto
from typing import Final

MAX_SPAN_CAP: Final[int] = 4096
RULE_ID_SIZE: Final[int] = 16
REGEX_FLAGS: Final[int] = re.DOTALL


class RuleKind(StrEnum):
    exact = auto()
    regex = auto()


class RuleAction(StrEnum):
    alert = auto()
    drop = auto()


class _BundleKind(IntEnum):
    exact = 0
    regex = 1


class _BundleAction(IntEnum):
    alert = 0
    drop = 1


class RuleError(Exception):
    """Base class for rule validation errors."""


class ParseError(RuleError):
    """Exception raised when a rule line or bundle field is malformed."""

    def __init__(self, field: str, reason: str) -> None:
        super().__init__(f"{field}: {reason}")
        self.field: str = field
        self.reason: str = reason


class EmptyPattern(RuleError):
    """Exception raised when a rule has an empty pattern."""


class RegexMatchesEmpty(RuleError):
    """Exception raised when a regex rule can match the empty string."""


class Rule:
    """Represents one inspection rule.

    Class for representing a rule. Allows easy conversion to dict, tuple,
    list, authoring line, and the binary bundle layout.
    """

    def __init__(
        self,
        rule_id: bytes,
        kind: RuleKind,
        action: RuleAction,
        max_span: int,
        pattern: bytes,
        issuer_id: bytes = bytes(RULE_ID_SIZE),
    ) -> None:
        """Creates a Rule object.

        Args:
            rule_id (bytes): 16-byte rule identifier.
            kind (RuleKind): Exact byte string or regular expression.
            action (RuleAction): What a match triggers in prevention mode.
            max_span (int): Declared maximum match length in bytes (1..4096).
            pattern (bytes): The byte string, or the regex source as UTF-8.
            issuer_id (bytes): 16-byte identifier of the submitting issuer.
        """
        self.rule_id: bytes = bytes(rule_id)
        self.kind: RuleKind = RuleKind(kind)
        self.action: RuleAction = RuleAction(action)
        self.max_span: int = int(max_span)
        self.pattern: bytes = bytes(pattern)
        self.issuer_id: bytes = bytes(issuer_id)

    def __iter__(self):
        """Allows for iterating over attributes.

        Allows for iterating over attributes and casting to other
        data structures.
        """
        yield "rule_id", self.rule_id.hex()
        yield "issuer_id", self.issuer_id.hex()
        yield "kind", str(self.kind)
        yield "action", str(self.action)
        yield "max_span", self.max_span
        yield "pattern", self.pattern_text()

    def to_dict(self) -> dict:
        """Returns dict representation of Rule.

        Returns:
            A dict representation of the Rule object.
        """
        return dict(self)

    def to_tuple(self) -> tuple:
        """Returns tuple representation of Rule."""
        return tuple(dict(self).values())

    def pattern_text(self) -> str:
        """Returns the pattern field as written in the authoring format."""
        if self.kind == RuleKind.exact:
            return "hex:" + self.pattern.hex()
        return "re:" + self.pattern.decode("utf-8")

    def to_line(self) -> str:
        """Returns the canonical authoring line for this rule."""
        return "\t".join(
            [self.rule_id.hex(), str(self.kind), str(self.action), str(self.max_span), self.pattern_text()]
        )

    def compile_regex(self) -> re.Pattern:
        """Returns the compiled bytes regex of a regex rule."""
        return re.compile(self.pattern, REGEX_FLAGS)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rule):
            return NotImplemented
        return self.to_bundle_entry() == other.to_bundle_entry()

    def __hash__(self) -> int:
        return hash(self.to_bundle_entry())

    def to_bundle_entry(self) -> bytes:
        """Returns `rule_id ‖ issuer_id ‖ kind ‖ action ‖ max_span(2BE) ‖ pat_len(2BE) ‖ pattern`."""
        return (
            self.rule_id
            + self.issuer_id
            + bytes([_BundleKind[self.kind].value, _BundleAction[self.action].value])
            + self.max_span.to_bytes(2, "big")
            + len(self.pattern).to_bytes(2, "big")
            + self.pattern
        )

    def __repr__(self) -> str:
        """Returns a str representation without the pattern."""
        return f"Rule(id={self.rule_id.hex()}, kind={self.kind}, action={self.action}, max_span={self.max_span})"


# Tokens that make a match depend on text outside its window
_POSITIONAL_ESCAPES: Final[str] = "AbBZ"


def _check_no_positional_assertions(source: str) -> None:
    """Rejects anchors, word boundaries and lookaround in a regex source.

    Raises:
        ParseError: Raised when the source uses a position-sensitive construct.
    """
    in_class: bool = False
    i: int = 0
    while i < len(source):
        char: str = source[i]
        if char == "\\":
            if not in_class and i + 1 < len(source) and source[i + 1] in _POSITIONAL_ESCAPES:
                raise ParseError("pattern", f"positional assertion '\\{source[i + 1]}' is not allowed")
            i += 2
            continue
        if in_class:
            if char == "]":
                in_class = False
        elif char == "[":
            in_class = True
            # a leading ']' or '^]' is a literal inside the class
            if source[i + 1 : i + 2] == "^":
                i += 1
            if source[i + 1 : i + 2] == "]":
                i += 1
        elif char in "^$":
            raise ParseError("pattern", f"anchor '{char}' is not allowed")
        elif source.startswith(("(?=", "(?!", "(?<=", "(?<!"), i):
            raise ParseError("pattern", "lookaround is not allowed")
        i += 1


def validate_rule(rule: Rule, max_span_cap: int = MAX_SPAN_CAP) -> Rule:
    """Checks a rule's invariants.

    Args:
        rule (Rule): The rule to check.
        max_span_cap (int): Largest allowed max_span.

    Raises:
        ParseError: Raised for a bad identifier, span, or regex.
        EmptyPattern: Raised for an empty pattern.
        RegexMatchesEmpty: Raised for a regex that can match the empty string.

    Returns:
        Rule: The same rule, for chaining.
    """
    if len(rule.rule_id) != RULE_ID_SIZE:
        raise ParseError("rule_id", "must be 16 bytes")
    if len(rule.issuer_id) != RULE_ID_SIZE:
        raise ParseError("issuer_id", "must be 16 bytes")
    if not 1 <= rule.max_span <= max_span_cap:
        raise ParseError("max_span", f"must be between 1 and {max_span_cap}")
    if not rule.pattern:
        raise EmptyPattern(f"Rule {rule.rule_id.hex()} has an empty pattern.")

    if rule.kind == RuleKind.exact:
        if len(rule.pattern) > rule.max_span:
            raise ParseError("pattern", "exact pattern is longer than max_span")
        return rule

    try:
        source: str = rule.pattern.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError("pattern", "regex source must be UTF-8") from e
    _check_no_positional_assertions(source)
    try:
        compiled: re.Pattern = rule.compile_regex()
    except re.error as e:
        raise ParseError("pattern", f"regex does not compile ({e})") from e
    if compiled.fullmatch(b"") is not None:
        raise RegexMatchesEmpty(f"Rule {rule.rule_id.hex()} can match the empty string.")
    return rule


def parse_rule_line(line: str, issuer_id: bytes = bytes(RULE_ID_SIZE)) -> Rule:
    """Parses one line of the authoring format.

    Args:
        line (str): The line, without trailing newline.
        issuer_id (bytes): Issuer to attribute the rule to.

    Raises:
        ParseError: Raised when a field is malformed.
        EmptyPattern: Raised for an empty pattern.
        RegexMatchesEmpty: Raised for a regex that can match the empty string.

    Returns:
        Rule: The parsed rule.
    """
    fields: list[str] = line.rstrip("\r\n").split("\t", 4)
    if len(fields) != 5:
        raise ParseError("line", f"expected 5 tab-separated fields, got {len(fields)}")
    rule_id_hex, kind_text, action_text, span_text, pattern_text = fields

    try:
        rule_id: bytes = bytes.fromhex(rule_id_hex)
    except ValueError as e:
        raise ParseError("rule_id", "not hexadecimal") from e
    if len(rule_id) != RULE_ID_SIZE:
        raise ParseError("rule_id", "must be 32 hex characters")

    try:
        kind: RuleKind = RuleKind(kind_text)
    except ValueError as e:
        raise ParseError("kind", f"unknown kind '{kind_text}'") from e
    try:
        action: RuleAction = RuleAction(action_text)
    except ValueError as e:
        raise ParseError("action", f"unknown action '{action_text}'") from e

    if not span_text.isdigit():
        raise ParseError("max_span", "not a decimal number")

    if kind == RuleKind.exact:
        if not pattern_text.startswith("hex:"):
            raise ParseError("pattern", "exact patterns are written as hex:<hexbytes>")
        try:
            pattern: bytes = bytes.fromhex(pattern_text[4:])
        except ValueError as e:
            raise ParseError("pattern", "not hexadecimal") from e
    else:
        if not pattern_text.startswith("re:"):
            raise ParseError("pattern", "regex patterns are written as re:<pattern>")
        pattern = pattern_text[3:].encode("utf-8")

    return validate_rule(Rule(rule_id, kind, action, int(span_text), pattern, issuer_id))


def parse_rule_lines(lines: list[str], issuer_id: bytes = bytes(RULE_ID_SIZE)) -> list[Rule]:
    """Parses authoring lines, skipping comments and blank lines."""
    rules: list[Rule] = []
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rules.append(parse_rule_line(line, issuer_id))
        except ParseError as e:
            raise ParseError(e.field, f"line {number}: {e.reason}") from e
    return rules


def read_rule_file(file_path: str, issuer_id: bytes = bytes(RULE_ID_SIZE)) -> list[Rule]:
    """Returns the rules of an authoring-format file.

    Args:
        file_path (str): Path to the rule file.
        issuer_id (bytes): Issuer to attribute the rules to.

    Returns:
        list[Rule]: Rules in file order.
    """
    with open(file_path, "r", encoding="utf-8") as file:
        return parse_rule_lines(file.read().splitlines(), issuer_id)


def write_rule_file(file_path: str, rules: list[Rule]) -> None:
    """Writes rules to a file in the canonical authoring format."""
    with open(file_path, "w", encoding="utf-8") as file:
        for rule in rules:
            file.write(rule.to_line() + "\n")


def encode_bundle(rules: list[Rule]) -> bytes:
    """Packs rules as `count(4BE)` followed by their bundle entries."""
    return len(rules).to_bytes(4, "big") + b"".join(rule.to_bundle_entry() for rule in rules)


def decode_bundle(data: bytes, max_span_cap: int = MAX_SPAN_CAP) -> list[Rule]:
    """Unpacks and validates a rule bundle.

    Raises:
        ParseError: Raised when the bundle is truncated or a field is invalid.

    Returns:
        list[Rule]: The rules in bundle order.
    """
    if len(data) < 4:
        raise ParseError("bundle", "truncated count")
    count: int = int.from_bytes(data[:4], "big")
    offset: int = 4
    rules: list[Rule] = []
    for _ in range(count):
        if len(data) - offset < 38:
            raise ParseError("bundle", "truncated rule header")
        rule_id: bytes = data[offset : offset + 16]
        issuer_id: bytes = data[offset + 16 : offset + 32]
        kind_code, action_code = data[offset + 32], data[offset + 33]
        max_span: int = int.from_bytes(data[offset + 34 : offset + 36], "big")
        pat_len: int = int.from_bytes(data[offset + 36 : offset + 38], "big")
        offset += 38
        if len(data) - offset < pat_len:
            raise ParseError("bundle", "truncated pattern")
        pattern: bytes = data[offset : offset + pat_len]
        offset += pat_len
        try:
            kind: RuleKind = RuleKind(_BundleKind(kind_code).name)
            action: RuleAction = RuleAction(_BundleAction(action_code).name)
        except ValueError as e:
            raise ParseError("bundle", "unknown kind or action code") from e
        rules.append(validate_rule(Rule(rule_id, kind, action, max_span, pattern, issuer_id), max_span_cap))
    if offset != len(data):
        raise ParseError("bundle", "trailing bytes")
    return rules


if __name__ == "__main__":
    from rich import print

    x = parse_rule_line("0102030405060708090a0b0c0d0e0f10\texact\talert\t32\thex:534543524554")
    print(f"Dictionary: {dict(x)}")
    print(f"Line: {x.to_line()!r}")
    print(f"String representation: {x}")
