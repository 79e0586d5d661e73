import os

import pytest

from conftest import RULE_DIR, exact, regex, rule_id
from rule_record import (
    EmptyPattern,
    ParseError,
    RegexMatchesEmpty,
    Rule,
    RuleAction,
    RuleKind,
    decode_bundle,
    encode_bundle,
    parse_rule_line,
    parse_rule_lines,
    read_rule_file,
    validate_rule,
    write_rule_file,
)

ID_HEX: str = "0102030405060708090a0b0c0d0e0f10"


def test_parse_exact_line():
    rule = parse_rule_line(f"{ID_HEX}\texact\talert\t32\thex:534543524554")
    assert rule.rule_id == bytes.fromhex(ID_HEX)
    assert rule.kind == RuleKind.exact
    assert rule.action == RuleAction.alert
    assert rule.max_span == 32
    assert rule.pattern == b"SECRET"
    assert rule.to_line() == f"{ID_HEX}\texact\talert\t32\thex:534543524554"


def test_parse_regex_line_keeps_tabs_in_pattern():
    rule = parse_rule_line(f"{ID_HEX}\tregex\tdrop\t16\tre:a\tb+")
    assert rule.kind == RuleKind.regex
    assert rule.action == RuleAction.drop
    assert rule.pattern == b"a\tb+"


@pytest.mark.parametrize(
    "line, field",
    [
        (f"{ID_HEX}\texact\talert\t32", "line"),
        (f"zz{ID_HEX[2:]}\texact\talert\t32\thex:41", "rule_id"),
        (f"{ID_HEX[:30]}\texact\talert\t32\thex:41", "rule_id"),
        (f"{ID_HEX}\tfuzzy\talert\t32\thex:41", "kind"),
        (f"{ID_HEX}\texact\tblock\t32\thex:41", "action"),
        (f"{ID_HEX}\texact\talert\tten\thex:41", "max_span"),
        (f"{ID_HEX}\texact\talert\t0\thex:41", "max_span"),
        (f"{ID_HEX}\texact\talert\t4097\thex:41", "max_span"),
        (f"{ID_HEX}\texact\talert\t32\tre:abc", "pattern"),
        (f"{ID_HEX}\texact\talert\t32\thex:4g", "pattern"),
        (f"{ID_HEX}\texact\talert\t2\thex:414243", "pattern"),
        (f"{ID_HEX}\tregex\talert\t32\thex:41", "pattern"),
        (f"{ID_HEX}\tregex\talert\t32\tre:(unclosed", "pattern"),
    ],
)
def test_malformed_lines_name_the_field(line, field):
    with pytest.raises(ParseError) as info:
        parse_rule_line(line)
    assert info.value.field == field


@pytest.mark.parametrize("source", ["^abc", "abc$", r"\bword", r"a\Z", r"\Aabc", "(?=x)y", "(?<!x)y", r"\Bx"])
def test_positional_assertions_are_rejected(source):
    with pytest.raises(ParseError):
        parse_rule_line(f"{ID_HEX}\tregex\talert\t32\tre:{source}")


@pytest.mark.parametrize("source", ["[$^]x", r"a\$", r"[\b]c", "[]^]z"])
def test_literal_dollar_and_caret_are_allowed(source):
    assert parse_rule_line(f"{ID_HEX}\tregex\talert\t32\tre:{source}").pattern == source.encode()


def test_regex_matching_empty_string_is_rejected():
    with pytest.raises(RegexMatchesEmpty):
        parse_rule_line(f"{ID_HEX}\tregex\talert\t8\tre:a*")


def test_empty_pattern_is_rejected():
    with pytest.raises(EmptyPattern):
        parse_rule_line(f"{ID_HEX}\texact\talert\t8\thex:")


def test_parse_lines_skips_comments_and_reports_line_numbers():
    lines = ["# comment", "", f"{ID_HEX}\texact\talert\t6\thex:534543524554", f"{ID_HEX}\texact\talert"]
    with pytest.raises(ParseError) as info:
        parse_rule_lines(lines)
    assert "line 4" in str(info.value)
    assert len(parse_rule_lines(lines[:3])) == 1


def test_bundle_round_trip_keeps_issuer():
    issuer = b"\x07" * 16
    rules = [
        Rule(rule_id(1), RuleKind.exact, RuleAction.alert, 6, b"SECRET", issuer),
        Rule(rule_id(2), RuleKind.regex, RuleAction.drop, 20, b"card=[0-9]{4}", issuer),
    ]
    decoded = decode_bundle(encode_bundle(rules))
    assert decoded == rules
    assert all(rule.issuer_id == issuer for rule in decoded)


def test_bundle_truncation_and_trailing_bytes():
    bundle = encode_bundle([exact(1, b"abc")])
    with pytest.raises(ParseError):
        decode_bundle(bundle[:-1])
    with pytest.raises(ParseError):
        decode_bundle(bundle + b"\x00")
    with pytest.raises(ParseError):
        decode_bundle(b"\x00\x00")


def test_bundle_is_validated_against_the_span_cap():
    with pytest.raises(ParseError):
        decode_bundle(encode_bundle([regex(1, b"x+", 100)]), max_span_cap=64)


def test_rule_files(tmp_path):
    rules = read_rule_file(os.path.join(RULE_DIR, "drop.rules"))
    assert [rule.action for rule in rules] == [RuleAction.drop, RuleAction.drop, RuleAction.alert]
    path = str(tmp_path / "copy.rules")
    write_rule_file(path, rules)
    assert read_rule_file(path) == rules


def test_repr_hides_the_pattern():
    rule = exact(1, b"TOPSECRETWORD")
    assert "TOPSECRETWORD" not in repr(rule)
    assert b"TOPSECRETWORD".hex() not in repr(rule)


def test_validate_rule_rejects_bad_ids():
    with pytest.raises(ParseError):
        validate_rule(Rule(b"short", RuleKind.exact, RuleAction.alert, 3, b"abc"))
