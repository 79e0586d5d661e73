import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import exact, regex, rule_id
from pri_matcher import DuplicateRuleId, ExactMatcher, compile_policy, count_matches, match_buffer, match_stream, oracle_matches
from rule_record import RuleAction

RULES = [
    exact(1, b"SECRET"),
    exact(2, b"ab"),
    exact(3, b"aba"),
    exact(4, b"e"),
    regex(5, b"card=[0-9]{4}", 16),
    regex(6, b"x[a-c]+y", 5),
    regex(7, b"q.", 2, RuleAction.drop),
]

SIZES = [1, 7, 64, 1500, 16384]


def stream_matches(policy, data: bytes, sizes: list[int]) -> set[tuple[bytes, int, int]]:
    found: set[tuple[bytes, int, int]] = set()
    carry, offset, index = b"", 0, 0
    while offset < len(data):
        size = sizes[index % len(sizes)]
        chunk = data[offset : offset + size]
        matches, carry = match_stream(policy, carry, chunk, offset)
        found |= {match.key() for match in matches}
        offset += len(chunk)
        index += 1
    matches, _ = match_stream(policy, carry, b"", offset, final=True)
    found |= {match.key() for match in matches}
    return found


def test_exact_matcher_reports_overlaps():
    automaton = ExactMatcher()
    for value, pattern in enumerate([b"he", b"she", b"his", b"hers"]):
        automaton.add(pattern, value)
    automaton.build()
    assert sorted(automaton.scan(b"ushers")) == [(0, 4), (1, 4), (3, 6)]


def test_exact_matcher_handles_binary_and_shared_patterns():
    automaton = ExactMatcher()
    automaton.add(b"\x00\xff", 0)
    automaton.add(b"\x00\xff", 1)
    automaton.build()
    assert sorted(automaton.scan(b"a\x00\xff\x00\xff", 2)) == [(0, 5), (1, 5)]
    empty = ExactMatcher()
    empty.build()
    assert list(empty.scan(b"anything")) == []


def test_match_buffer_reports_offsets_and_bytes():
    policy = compile_policy(RULES)
    data = b"my SECRET card=1234!"
    matches = {match.key(): match for match in match_buffer(policy, data)}
    assert (rule_id(1), 3, 9) in matches
    card = matches[(rule_id(5), 10, 19)]
    assert card.matched_bytes == b"card=1234"
    assert all(match.matched_bytes == data[match.start_offset : match.end_offset] for match in matches.values())


def test_overlapping_exact_patterns_all_match():
    keys = {match.key() for match in match_buffer(compile_policy(RULES), b"ababa")}
    assert {(rule_id(2), 0, 2), (rule_id(2), 2, 4), (rule_id(3), 0, 3), (rule_id(3), 2, 5)} <= keys


def test_regex_window_limits_match_length():
    policy = compile_policy([regex(6, b"x[a-c]+y", 5)])
    assert {match.key() for match in match_buffer(policy, b"xabcy")} == {(rule_id(6), 0, 5)}
    assert match_buffer(policy, b"xabcay") == []


def test_regex_is_final_only_after_its_window():
    policy = compile_policy([regex(5, b"card=[0-9]{4}", 16)])
    matches, carry = match_stream(policy, b"", b"card=1234", 0)
    assert matches == []
    matches, carry = match_stream(policy, carry, b"-" * 7, 9)
    assert [match.key() for match in matches] == [(rule_id(5), 0, 9)]
    matches, _ = match_stream(policy, carry, b"", 16, final=True)
    assert matches == []


def test_final_call_flushes_pending_windows():
    policy = compile_policy([regex(5, b"card=[0-9]{4}", 16)])
    matches, carry = match_stream(policy, b"", b"card=9999", 0)
    assert matches == []
    matches, _ = match_stream(policy, carry, b"", 9, final=True)
    assert [match.key() for match in matches] == [(rule_id(5), 0, 9)]


def test_match_crossing_a_boundary_is_reported_once():
    policy = compile_policy([exact(1, b"SECRET")])
    first, carry = match_stream(policy, b"", b"xxSEC", 0)
    second, carry = match_stream(policy, carry, b"RETyy", 5)
    third, _ = match_stream(policy, carry, b"", 10, final=True)
    assert first == [] and third == []
    assert [match.key() for match in second] == [(rule_id(1), 2, 8)]


def test_empty_policy_matches_nothing():
    assert match_buffer(compile_policy([]), b"anything at all") == []


def test_duplicate_rule_ids_are_rejected():
    with pytest.raises(DuplicateRuleId):
        compile_policy([exact(1, b"a"), exact(1, b"b")])


def test_policy_version_ignores_rule_order():
    assert compile_policy(RULES).version == compile_policy(list(reversed(RULES))).version
    assert compile_policy(RULES).version != compile_policy(RULES[:-1]).version


def test_carry_and_hold_lengths():
    policy = compile_policy(RULES)
    assert policy.carry_length == 15
    assert policy.hold_length == 1
    assert policy.has_drop_regex


def test_count_matches_includes_zero_counts():
    counts = count_matches(compile_policy(RULES), b"e e e")
    assert counts[rule_id(4)] == 3
    assert counts[rule_id(1)] == 0


text = st.lists(st.sampled_from([b"SECRET", b"ab", b"a", b"card=", b"12345", b"x", b"bc", b"y", b"q", b"e", b"\x00"]))


@settings(max_examples=200, deadline=None)
@given(parts=text, sizes=st.lists(st.sampled_from(SIZES), min_size=1, max_size=4))
def test_segmentation_does_not_change_matches(parts, sizes):
    data = b"".join(parts)
    policy = compile_policy(RULES)
    assert stream_matches(policy, data, sizes) == oracle_matches(RULES, data)


@settings(max_examples=100, deadline=None)
@given(data=st.binary(max_size=400), sizes=st.lists(st.integers(1, 50), min_size=1, max_size=5))
def test_random_bytes_agree_with_oracle(data, sizes):
    policy = compile_policy(RULES)
    assert stream_matches(policy, data, sizes) == oracle_matches(RULES, data)


@pytest.mark.parametrize("size", SIZES)
def test_every_record_size_agrees_with_the_oracle(size):
    data = (b"xx SECRET card=1234 ababa xbcy qq e " * 600)[:20000]
    policy = compile_policy(RULES)
    assert stream_matches(policy, data, [size]) == oracle_matches(RULES, data)
