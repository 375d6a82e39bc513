import io
import json

import pytest

from fcurate.dataset_io import (
    Sample,
    SampleFormatError,
    calls_text_from_json,
    read_samples,
    report,
    write_samples,
)
from fcurate.fcall import parse_lenient

XLAM_JSON = [
    {"name": " forecast_weather_api", "arguments": {"q": "Chicago", "days": 7}},
    {"name": "forecast_weather_api", "arguments": {"q": "Toronto", "days": 7}},
]


def _jsonl(tmp_path, records, name="data.jsonl"):
    path = tmp_path / name
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_xlam_json_answer_kept_verbatim():
    text = calls_text_from_json(XLAM_JSON)
    assert text == '[ forecast_weather_api(q="Chicago", days=7), forecast_weather_api(q="Toronto", days=7)]'
    calls, diags = parse_lenient(text)
    assert [d.code for d in diags] == ["LEADING_SPACE"]


def test_field_map_and_json_answer_string():
    s = Sample.from_dict({"id": 1, "query": "q", "tools": "[]", "answers": json.dumps(XLAM_JSON)})
    assert s.id == "1"
    assert s.answer.startswith("[ forecast_weather_api(")


def test_think_split_from_answer():
    s = Sample.from_dict({"id": "a", "answer": "<think>why</think>\n[f(x=1)]"})
    assert s.cot == "why"
    assert s.answer == "[f(x=1)]"


def test_missing_id_is_content_hash():
    a = Sample.from_dict({"query": "q", "answer": "[f()]"})
    b = Sample.from_dict({"answer": "[f()]", "query": "q"})
    assert a.id == b.id and len(a.id) == 16


def test_empty_answer_rejected():
    with pytest.raises(SampleFormatError):
        Sample.from_dict({"id": "a", "answer": ""})


def test_unknown_keys_roundtrip(tmp_path):
    recs = [{"id": "a", "query": "q", "tools": [], "answer": "[f()]", "source": "x", "score": 3}]
    path = _jsonl(tmp_path, recs)
    out = tmp_path / "out.jsonl"
    write_samples(read_samples(path), out)
    assert json.loads(out.read_text()) == recs[0]


def test_read_errors_report_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "answer": "[f()]"}\nnot json\n')
    with pytest.raises(SampleFormatError) as exc:
        list(read_samples(path))
    assert exc.value.line == 2


def test_lenient_skips_bad_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "answer": "[f()]"}\n[1, 2]\n\n{"id": "b", "answer": "[g()]"}\n')
    assert [s.id for s in read_samples(path, lenient=True)] == ["a", "b"]


def test_duplicate_ids(tmp_path):
    path = _jsonl(tmp_path, [{"id": "a", "answer": "[f()]"}, {"id": "a", "answer": "[g()]"}])
    with pytest.raises(SampleFormatError, match="duplicate"):
        list(read_samples(path))


def test_stdin(monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO('{"id": "a", "answer": "[f()]"}\n'))
    assert [s.id for s in read_samples("-")] == ["a"]


def test_split_turns():
    rec = {
        "id": "conv",
        "tools": [],
        "conversations": [
            {"from": "human", "value": "first"},
            {"from": "gpt", "value": "<think>t1</think>[a()]"},
            {"from": "observation", "value": "ok"},
            {"from": "gpt", "value": "[b(x=1)]"},
            {"from": "human", "value": "second"},
            {"from": "gpt", "value": "<think>only thinking</think>"},
            {"from": "gpt", "value": "[c()]"},
        ],
    }
    turns = Sample.from_dict(rec).split_turns()
    assert [t.id for t in turns] == ["conv#0", "conv#1", "conv#2"]
    assert [t.answer for t in turns] == ["[a()]", "[b(x=1)]", "[c()]"]
    assert turns[0].cot == "t1" and turns[1].cot is None
    assert turns[2].query == "second"
    assert len(turns[2].history) == 4


def test_report(tmp_path):
    recs = [
        {"id": "a", "tools": [{"name": "f"}, {"name": "g"}], "answer": "[f()]", "cot": "x y", "category": "c1"},
        {"id": "b", "tools": [{"name": "g"}], "answer": "[g(a=1), g(a=2)]", "category": "c2"},
        {"id": "c", "tools": [{"name": "h"}], "category": "c1",
         "messages": [{"role": "user", "content": "q"}, {"role": "assistant", "content": "[h()]"},
                      {"role": "user", "content": "q2"}, {"role": "assistant", "content": "<think>z</think>[h()]"}]},
    ]
    rep = report(_jsonl(tmp_path, recs))
    assert (rep.n_samples, rep.n_apis) == (3, 3)
    assert rep.categories == {"c1": 2, "c2": 1}
    assert rep.multi_turn_split == 2
    assert rep.tokens.count == 4
    assert rep.tokens.cot == (1.5, 1.5)
    d = rep.to_dict()
    assert d["categories"] == 2
    assert "CoT tokens" in rep.to_text()
