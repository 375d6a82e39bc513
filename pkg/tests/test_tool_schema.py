import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcurate.fcall import FunctionCall, parse_strict
from fcurate.tool_schema import (
    CatalogError,
    coerce_default,
    load_catalog,
    normalize_type,
    type_matches,
    validate_call,
    validate_calls,
)


def test_weather_catalog(weather_tools):
    cat = load_catalog(json.dumps(weather_tools))
    assert len(cat) == 4
    daily = cat.get("daily")
    assert len(daily.params) == 6
    assert all(p.has_default for p in daily.params)
    assert not any(p.required for p in daily.params)


def test_string_defaults_coerced(weather_tools):
    cat = load_catalog(weather_tools)
    days = cat.get("forecast_weather_api").param("days")
    assert days.default == 3 and days.default_ok


def test_non_integer_default_warns(weather_tools):
    cat = load_catalog(weather_tools)
    lat = cat.get("get_forecastdata_by_lat_lon").param("lat")
    assert lat.default == "51.5" and not lat.default_ok
    assert {w["param"] for w in cat.warnings if w["code"] == "DEFAULT_TYPE"} == {"lat", "lon"}
    call = cat.get("get_forecastdata_by_lat_lon").default_call()
    assert call.kwargs == {"lang": "en"}


def test_empty_catalog():
    cat = load_catalog("[]")
    assert len(cat) == 0
    result = validate_call(FunctionCall.of("f"), cat)
    assert result.codes == ["UNKNOWN_FUNCTION"]


def test_duplicate_tools_rejected():
    with pytest.raises(CatalogError):
        load_catalog('[{"name": "a"}, {"name": "b"}, {"name": "a"}]')


def test_malformed_json():
    with pytest.raises(CatalogError):
        load_catalog("[{")


def test_unknown_type_warns():
    cat = load_catalog('[{"name": "a", "parameters": {"x": {"type": "Widget"}}}]')
    assert cat.get("a").param("x").type == "any"
    assert cat.warnings[0]["code"] == "UNKNOWN_TYPE"


def test_xlam_answer_validates(weather_tools):
    cat = load_catalog(weather_tools)
    assert validate_call(FunctionCall.of("forecast_weather_api", q="Chicago", days=7), cat).passed
    calls = parse_strict('[forecast_weather_api(q="Chicago", days=7), forecast_weather_api(q="Toronto", days=7)]')
    assert validate_calls(calls, cat).passed


def test_type_mismatch(match_tools):
    cat = load_catalog(match_tools)
    result = validate_call(FunctionCall.of("matchschedules", day="28"), cat)
    assert not result.passed
    assert result.codes == ["TYPE_MISMATCH"]


def test_case_study_passes(match_tools):
    cat = load_catalog(match_tools)
    assert validate_calls(parse_strict("[matchschedules(day=28, month=2, year=2024)]"), cat).passed


def test_unknown_param_and_missing_required():
    cat = load_catalog('[{"name": "f", "parameters": {"a": {"type": "int"}, "b": {"type": "str, optional"}}}]')
    result = validate_call(FunctionCall.of("f", c=1), cat)
    assert sorted(result.codes) == ["MISSING_REQUIRED", "UNKNOWN_PARAM"]
    assert not cat.get("f").param("b").required


def test_int_widens_to_float_only():
    assert type_matches(3, "float")
    assert not type_matches(3.0, "int")
    assert not type_matches(True, "int")
    assert not type_matches(1, "bool")
    assert not type_matches("3", "int")


@pytest.mark.parametrize("declared,expected", [
    ("int", ("int", False, True)),
    ("str, optional", ("str", True, True)),
    ("Optional[float]", ("float", True, True)),
    ("List[int]", ("list", False, True)),
    ("Dict[str, Any]", ("dict", False, True)),
    ("boolean", ("bool", False, True)),
    ("weird", ("any", False, False)),
])
def test_normalize_type(declared, expected):
    assert normalize_type(declared) == expected


@given(st.integers())
def test_int_text_default_coerces(n):
    assert coerce_default(str(n), "int") == (n, True)


@given(st.one_of(st.integers(), st.floats(), st.booleans(), st.text(), st.none()),
       st.sampled_from(["int", "float", "bool", "str", "list", "dict", "any"]))
def test_accepted_values_keep_their_type(value, declared):
    # a value that already type-checks is never altered, except int widening to float
    if type_matches(value, declared):
        out, ok = coerce_default(value, declared)
        assert ok
        assert out == value or (out != out and value != value)
