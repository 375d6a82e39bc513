import ast

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcurate.fcall import (
    JSON_GRAMMAR,
    CallList,
    FCallSyntaxError,
    FunctionCall,
    Grammar,
    ast_equal,
    from_json,
    parse_lenient,
    parse_strict,
    serialize,
    to_json,
    values_equal,
)
from strategies import call_lists, calls, identifiers, simple_values

XLAM = '[ forecast_weather_api(q="Chicago", days=7), forecast_weather_api(q="Toronto", days=7)]'


def codes(text, grammar=None):
    with pytest.raises(FCallSyntaxError) as exc:
        parse_strict(text, grammar or Grammar())
    return exc.value.codes


# -- strict -----------------------------------------------------------------


def test_case_study_call():
    calls_ = parse_strict("[matchschedules(day=28, month=2, year=2024)]")
    assert len(calls_) == 1
    assert calls_[0].name == "matchschedules"
    assert calls_[0].kwargs == {"day": 28, "month": 2, "year": 2024}
    assert all(type(v) is int for v in calls_[0].kwargs.values())


def test_serialize_case_study():
    c = CallList([FunctionCall.of("matchschedules", day=28, month=2, year=2024)])
    assert serialize(c) == "[matchschedules(day=28, month=2, year=2024)]"


def test_strict_rejects_leading_space():
    assert codes(XLAM)[0] == "LEADING_SPACE"


def test_empty_list_is_fatal():
    assert codes("[]") == ["EMPTY_CALL_LIST"]


def test_empty_input():
    assert "EMPTY_INPUT" in codes("")


@pytest.mark.parametrize("text,code", [
    ("[f(x=1]", "UNBALANCED"),
    ("[f(x=1)", "MISSING_BRACKET"),
    ("[f(x=[1)]", "UNBALANCED"),
    ("[f(x=1, x=2)]", "DUPLICATE_PARAM"),
    ("[f(x=@)]", "BAD_VALUE_LITERAL"),
    ("[9f(x=1)]", "BAD_IDENTIFIER"),
    ('[f("x"=1)]', "QUOTED_PARAM_NAME"),
    ("[f(x='a')]", "QUOTE_STYLE"),
    ("[f(x=true)]", "LITERAL_STYLE"),
    ("[f(x=1,)]", "TRAILING_COMMA"),
    ("f(x=1)", "MISSING_BRACKET"),
    ("[f(x = 1)]", "WHITESPACE"),
    ("[f(x=1) ]", "TRAILING_SPACE"),
    ("[f(x=01)]", "NUMBER_FORMAT"),
])
def test_strict_error_codes(text, code):
    assert code in codes(text)


def test_offsets_within_input():
    for text in [XLAM, "[f(x=1", "[]", "[f(x=@)]", "héllo(", "[f(x='é')]"]:
        with pytest.raises(FCallSyntaxError) as exc:
            parse_strict(text)
        for d in exc.value.diagnostics:
            assert 0 <= d.offset <= len(text.encode("utf-8"))


def test_offsets_are_bytes():
    # the stray space sits after a two-byte character
    text = '[f(x="é") ]'
    with pytest.raises(FCallSyntaxError) as exc:
        parse_strict(text)
    d = exc.value.diagnostics[0]
    assert d.code == "TRAILING_SPACE"
    assert d.offset == len('[f(x="é")'.encode("utf-8"))


def test_depth_cap():
    g = Grammar(max_depth=3)
    assert "DEPTH_EXCEEDED" in codes("[f(x=[[[[1]]]])]", g)
    parse_strict("[f(x=[[1]])]", g)


def test_nested_values():
    c = parse_strict('[f(a=[1, 2.5, "s"], b={"k": [True, None]}, c=-3)]')
    assert c[0].kwargs == {"a": [1, 2.5, "s"], "b": {"k": [True, None]}, "c": -3}


def test_zero_arg_calls():
    c = parse_strict("[f(), g()]")
    assert [x.name for x in c] == ["f", "g"]


def test_extended_identifiers():
    g = Grammar(identifiers="extended")
    assert parse_strict("[api.v2-get(x=1)]", g)[0].name == "api.v2-get"
    assert "BAD_IDENTIFIER" in codes("[api.v2-get(x=1)]")


def test_json_literal_profile():
    c = parse_strict("[f(x=true, y=null)]", JSON_GRAMMAR)
    assert c[0].kwargs == {"x": True, "y": None}
    assert serialize(c, JSON_GRAMMAR) == "[f(x=true, y=null)]"


# -- lenient ----------------------------------------------------------------


def test_lenient_xlam_single():
    c, diags = parse_lenient('[ forecast_weather_api(q="Chicago", days=7)]')
    assert c[0].kwargs == {"q": "Chicago", "days": 7}
    assert [d.code for d in diags] == ["LEADING_SPACE"]
    assert all(d.severity == "repairable" for d in diags)


def test_lenient_xlam_two_calls():
    c, diags = parse_lenient(XLAM)
    assert [x.kwargs for x in c] == [{"q": "Chicago", "days": 7}, {"q": "Toronto", "days": 7}]
    assert [d.code for d in diags] == ["LEADING_SPACE"]


def test_lenient_quoted_param():
    c, diags = parse_lenient('[getPrivacyViolationRisk("data"="v1")]')
    assert c[0].kwargs == {"data": "v1"}
    assert [d.code for d in diags] == ["QUOTED_PARAM_NAME"]


def test_lenient_multiple_repairs():
    c, diags = parse_lenient("f(a=1,b=[1, {'x': true}],)")
    assert c[0].kwargs == {"a": 1, "b": [1, {"x": True}]}
    assert [d.code for d in diags] == ["MISSING_BRACKET", "WHITESPACE", "QUOTE_STYLE", "LITERAL_STYLE",
                                       "TRAILING_COMMA"]


@pytest.mark.parametrize("text,code", [
    ("[f(x=1", "UNBALANCED"),
    ("[f(x=1, x=2)]", "DUPLICATE_PARAM"),
    ("[]", "EMPTY_CALL_LIST"),
    ("[f(x=@)]", "BAD_VALUE_LITERAL"),
    ("hello world", "UNEXPECTED"),
])
def test_lenient_fatal(text, code):
    with pytest.raises(FCallSyntaxError) as exc:
        parse_lenient(text)
    assert code in exc.value.codes
    assert all(d.severity == "fatal" for d in exc.value.diagnostics if d.code == code)


def test_lenient_never_rewrites_names():
    c, _ = parse_lenient("[ Get_Data(ID=1)]")
    assert c[0].name == "Get_Data"
    assert c[0].kwargs == {"ID": 1}


# -- equality ---------------------------------------------------------------


def test_ast_equal_order_flag():
    a = parse_strict("[f(day=28, month=2)]")
    b = parse_strict("[f(month=2, day=28)]")
    assert not ast_equal(a, b)
    assert ast_equal(a, b, order_insensitive_args=True)


def test_call_order_significant():
    a = parse_strict("[f(), g()]")
    b = parse_strict("[g(), f()]")
    assert not ast_equal(a, b, order_insensitive_args=True)


def test_int_vs_string_differ():
    assert not ast_equal(parse_strict("[f(days=7)]"), parse_strict('[f(days="7")]'))


def test_type_exact_values():
    assert not values_equal(1, 1.0)
    assert not values_equal(1, True)
    assert values_equal([1, {"a": None}], [1, {"a": None}])


def test_string_escapes_roundtrip():
    c = CallList([FunctionCall.of("f", s='he said "hi" \\ \n\t\x01')])
    assert parse_strict(serialize(c)) == c


def test_float_format():
    c = CallList([FunctionCall.of("f", a=1.0, b=1e20, c=2.5e-7)])
    text = serialize(c)
    assert text == "[f(a=1.0, b=1.0e+20, c=2.5e-07)]"
    assert parse_strict(text) == c


def test_json_form_roundtrip():
    c = parse_strict('[f(a=1, b="x"), g()]')
    assert to_json(c) == [{"name": "f", "arguments": {"a": 1, "b": "x"}}, {"name": "g", "arguments": {}}]
    assert from_json(to_json(c)) == c


# -- properties -------------------------------------------------------------


@settings(max_examples=300)
@given(call_lists)
def test_roundtrip_property(x):
    assert parse_strict(serialize(x)) == x


@settings(max_examples=200)
@given(call_lists)
def test_canonical_needs_no_repair(x):
    c, diags = parse_lenient(serialize(x))
    assert c == x and diags == []


@settings(max_examples=200)
@given(st.text(max_size=40))
def test_strict_subset_of_lenient(text):
    try:
        strict = parse_strict(text)
    except FCallSyntaxError:
        return
    lenient, diags = parse_lenient(text)
    assert lenient == strict and diags == []


@settings(max_examples=300)
@given(st.text(alphabet='[](){}=,"\' abcx1.-_TrueNn', max_size=30))
def test_idempotent_normalization(text):
    try:
        c, _ = parse_lenient(text)
    except FCallSyntaxError as exc:
        assert exc.diagnostics and any(d.severity == "fatal" for d in exc.diagnostics)
        return
    again, diags = parse_lenient(serialize(c))
    assert again == c and diags == []


def _noisy(call_list, rng):
    """Render with random whitespace and quote style; python-literal syntax only."""
    def ws():
        return rng.choice(["", " ", "  ", "\t"])

    def val(v):
        if isinstance(v, str):
            return ws() + (f"'{v}'" if rng.random() < 0.5 else f'"{v}"')
        if isinstance(v, list):
            return ws() + "[" + ",".join(val(x) + ws() for x in v) + "]"
        return ws() + repr(v)

    parts = []
    for c in call_list:
        args = ",".join(f"{ws()}{k}{ws()}={val(v)}{ws()}" for k, v in c.args)
        parts.append(f"{ws()}{c.name}{ws()}({args})")
    return "[" + ",".join(parts) + ws() + "]"


def _oracle(text):
    """Triples from Python's own expression parser."""
    tree = ast.parse(text.strip(), mode="eval").body
    return [(node.func.id, kw.arg, ast.literal_eval(kw.value)) for node in tree.elts for kw in node.keywords]


@settings(max_examples=300)
@given(st.lists(calls(simple_values), min_size=1, max_size=3).map(CallList), st.randoms(use_true_random=False))
def test_lenient_matches_python_oracle(x, rng):
    text = _noisy(x, rng)
    repaired, _ = parse_lenient(text)
    ours = [(c.name, k, v) for c in repaired for k, v in c.args]
    theirs = _oracle(text)
    assert len(ours) == len(theirs)
    assert all(a[:2] == b[:2] and values_equal(a[2], b[2]) for a, b in zip(ours, theirs))
    assert [c.name for c in repaired] == [c.name for c in x]


@given(identifiers)
def test_identifiers_accepted(name):
    assert parse_strict(f"[{name}()]")[0].name == name
