import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from policy_gen import ALPHABET, INVOCATIONS, agrees_with_oracle, random_policy, trace_of
from polifed.policy import (
    ONE,
    TOP,
    ZERO,
    Cmd,
    CommandInvocation,
    CommandPattern,
    Intersect,
    Neg,
    PolicySyntaxError,
    Seq,
    Star,
    Union,
    UnknownMacro,
    accepts_trace,
    derive,
    emptiness,
    expand_macros,
    invocation,
    matches_command,
    node_count,
    parse_policy,
    reduce,
    to_text,
)

USE_CASE_POLICIES = [
    'get_data(data_type="reddit") . runFL . enforce_privacy_budget(max_eps=1) . return',
    'get_data(data_type="reddit") . runFL . enforce_privacy_budget(max_eps=2) . return',
    'get_data(data_type="cifar") . runFL . check_privacy_budget(max_eps=2) . return',
    'get_data(data_type="cifar") . runFL . check_privacy_budget(max_eps=5) . return',
    'get_data(data_type="MPU") . runFL . return',
    "get_data(data_type=\"MPU\") . filter(sensors=['mic', 'loc']) . runFL . return",
]

seeds = st.integers(min_value=0, max_value=2**32 - 1)
depths = st.integers(min_value=1, max_value=6)
words = st.lists(st.sampled_from(ALPHABET), max_size=6)


def cmd(name, **params):
    return Cmd(CommandPattern(name, tuple(params.items())))


# parsing


def test_parse_sequence_is_left_nested():
    p = parse_policy("get_data . runFL . return")
    assert p == Seq(Seq(cmd("get_data"), cmd("runFL")), cmd("return"))


def test_parse_zero_and_one():
    assert parse_policy("0") == ZERO
    assert parse_policy("1") == ONE


def test_parse_list_param():
    p = parse_policy("filter(sensors=['mic','loc'])")
    assert p == cmd("filter", sensors=("mic", "loc"))


def test_precedence():
    p = parse_policy("a . b + c & d . e")
    assert p == Union(Seq(cmd("a"), cmd("b")), Intersect(cmd("c"), Seq(cmd("d"), cmd("e"))))
    assert parse_policy("!a*") == Neg(Star(cmd("a")))


def test_param_literals():
    p = parse_policy("f(s='x', d=\"y\", i=3, x=-1.5, b=true, g=GF)")
    assert p.pattern.param_dict() == {"s": "x", "d": "y", "i": 3, "x": -1.5, "b": True, "g": "GF"}


@pytest.mark.parametrize(
    "text, offset",
    [("a . ", 4), ("(a . b", 6), ("a . b)", 5), ("a(x=)", 4), ("a(x=1, x=2)", 7), ("'abc", 0)],
)
def test_syntax_error_offsets(text, offset):
    with pytest.raises(PolicySyntaxError) as info:
        parse_policy(text)
    assert info.value.offset == offset


def test_unknown_escape_rejected():
    with pytest.raises(PolicySyntaxError):
        parse_policy(r"f(x='a\qb')")


def test_empty_text_rejected():
    with pytest.raises(PolicySyntaxError):
        parse_policy("   ")


def test_offsets_are_bytes():
    with pytest.raises(PolicySyntaxError) as info:
        parse_policy("f(x='é') . )")
    assert info.value.offset == len("f(x='é') . ".encode())


@settings(max_examples=300, deadline=None)
@given(seeds, depths)
def test_text_round_trip(seed, depth):
    p = random_policy(np.random.default_rng(seed), depth)
    assert parse_policy(to_text(p)) == p
    r = reduce(p)
    assert reduce(parse_policy(to_text(r))) == r


def test_round_trip_escapes():
    p = parse_policy("f(x='a\\'b\"c', y=[1, 'z'])")
    assert parse_policy(to_text(p)) == p


# emptiness and derivatives


def test_emptiness_examples():
    assert emptiness(Star(cmd("a")))
    assert not emptiness(cmd("c"))
    assert emptiness(TOP)
    assert not emptiness(ZERO)
    assert emptiness(ONE)


def test_derive_examples():
    p = reduce(parse_policy("fetch_data . return"))
    assert derive(p, invocation("fetch_data")) == parse_policy("return")
    assert derive(cmd("c"), invocation("c")) == ONE
    assert derive(cmd("c"), invocation("d")) == ZERO


def test_derive_consumes_first_command():
    p = reduce(parse_policy("get_data . runFL . return"))
    assert derive(p, invocation("get_data")) == reduce(parse_policy("runFL . return"))


def test_matches_command_examples():
    pat = CommandPattern("filter", (("sensors", ("mic", "loc")),))
    assert matches_command(pat, invocation("filter", sensors=["loc", "mic"]))
    narrow = CommandPattern("filter", (("sensors", ("mic",)),))
    assert not matches_command(narrow, invocation("filter", sensors=["mic", "loc"]))
    assert matches_command(CommandPattern("get_data"), invocation("get_data", data_type="reddit"))


def test_matches_command_type_strict():
    pat = CommandPattern("f", (("x", 1),))
    assert matches_command(pat, invocation("f", x=1))
    assert not matches_command(pat, invocation("f", x=True))
    assert not matches_command(pat, invocation("f", x="1"))
    assert not matches_command(pat, invocation("f"))
    assert not matches_command(pat, invocation("g", x=1))


def test_accepts_trace_examples():
    assert accepts_trace(parse_policy("a . b"), trace_of("ab"))
    assert not accepts_trace(parse_policy("a . b"), trace_of("b"))
    assert accepts_trace(reduce(parse_policy("(a + b)* . c")), trace_of("abac"))


@settings(max_examples=300, deadline=None)
@given(seeds, depths)
def test_derivatives_match_automaton(seed, depth):
    assert agrees_with_oracle(random_policy(np.random.default_rng(seed), depth))


@settings(max_examples=300, deadline=None)
@given(seeds, depths)
def test_empty_trace_is_emptiness(seed, depth):
    p = reduce(random_policy(np.random.default_rng(seed), depth))
    assert accepts_trace(p, []) == emptiness(p)


# reduction


def test_reduce_examples():
    p = cmd("p")
    assert reduce(Seq(ONE, p)) == p
    assert reduce(Union(p, p)) == p
    assert reduce(Intersect(ZERO, p)) == ZERO
    assert reduce(Star(Star(p))) == Star(p)
    assert reduce(Neg(Neg(p))) == p
    assert reduce(Union(ZERO, p)) == p
    assert reduce(Seq(p, ZERO)) == ZERO


def _forbidden(p) -> bool:
    if isinstance(p, Seq):
        if ZERO in (p.left, p.right) or p.left == ONE:
            return True
    if isinstance(p, (Union, Intersect)) and p.left == p.right:
        return True
    if isinstance(p, Union) and ZERO in (p.left, p.right):
        return True
    if isinstance(p, Intersect) and ZERO in (p.left, p.right):
        return True
    if isinstance(p, Star) and isinstance(p.body, Star):
        return True
    if isinstance(p, Neg) and isinstance(p.body, Neg):
        return True
    return any(_forbidden(c) for c in p.children())


@settings(max_examples=300, deadline=None)
@given(seeds, depths, words)
def test_reduce_preserves_acceptance(seed, depth, word):
    p = random_policy(np.random.default_rng(seed), depth)
    r = reduce(p)
    assert accepts_trace(p, trace_of(word)) == accepts_trace(r, trace_of(word))
    assert node_count(r) <= node_count(p)
    assert reduce(r) == r
    assert not _forbidden(r)


@settings(max_examples=300, deadline=None)
@given(seeds, depths, st.sampled_from(ALPHABET))
def test_derivative_size_bound(seed, depth, sym):
    p = reduce(random_policy(np.random.default_rng(seed), depth))
    assert node_count(derive(p, INVOCATIONS[sym])) <= 4 * node_count(p)


def test_derivatives_are_reduced():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p = reduce(random_policy(rng))
        for sym in ALPHABET:
            d = derive(p, INVOCATIONS[sym])
            assert reduce(d) == d


# macros


def test_runfl_expansion():
    p = expand_macros(parse_policy("runFL"))
    assert p == parse_policy("train_local . accumulate* . (train_local . accumulate* + average*)*")


def test_expansion_leaves_plain_policies():
    p = parse_policy("get_data . train_local . return")
    assert expand_macros(p) == p


def test_unknown_macro():
    with pytest.raises(UnknownMacro):
        expand_macros(parse_policy("get_data . runXYZ"))


def test_runfl_multi_round_trace():
    p = reduce(expand_macros(parse_policy("get_data . runFL . return")))
    rounds = ["train_local", "accumulate", "average"] * 5
    assert accepts_trace(p, [invocation("get_data")] + [invocation(c) for c in rounds] + [invocation("return")])
    assert not accepts_trace(p, [invocation("get_data"), invocation("average"), invocation("return")])


@pytest.mark.parametrize("text", USE_CASE_POLICIES)
def test_use_case_policy_size_stays_bounded(text):
    p = reduce(expand_macros(parse_policy(text)))
    data_type = next(t for t in ("reddit", "cifar", "MPU") if t in text)
    trace = [invocation("get_data", data_type=data_type)]
    if "filter" in text:
        trace.append(invocation("filter", sensors=["mic", "loc"]))
    trace +=[invocation(c) for c in (["train_local", "accumulate", "average"] * 40)[: 100 - len(trace)]]
    initial = node_count(p)
    for c in trace:
        p = derive(p, c)
        assert p != ZERO
        assert node_count(p) <= 10 * initial


def test_invocation_str():
    assert str(CommandInvocation("filter", {"sensors": ["mic"]})) == "filter(sensors=['mic'])"
