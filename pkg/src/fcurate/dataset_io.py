"""Sample schema and streaming JSONL readers/writers.

One JSONL line holds one record::

    {"id": "...", "query": "...", "tools": [...], "cot": "...",
     "answer": "[f(x=1)]", "history": [{"role": ..., "content": ...}],
     "category": "..."}

Corpus dialects are mapped onto these names with a field map (see
:data:`DEFAULT_FIELD_MAP`).  Keys the schema does not know are kept in
``Sample.extra`` and written back unchanged.  A record may instead carry a
whole conversation under ``turns``; :meth:`Sample.split_turns` cuts it into
one sample per assistant turn.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping

from .fcall import serialize_value
from .loss import TokenCounter, TokenStats, corpus_token_stats, split_think

logger = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "SampleFormatError",
    "DEFAULT_FIELD_MAP",
    "read_samples",
    "write_samples",
    "CorpusReport",
    "report",
    "calls_text_from_json",
]

SCHEMA_FIELDS = ("id", "query", "tools", "cot", "answer", "history", "category", "turns")

# source key -> schema key; applied only when the schema key is absent
DEFAULT_FIELD_MAP = {
    "answers": "answer",
    "reasoning": "cot",
    "thought": "cot",
    "conversations": "turns",
    "conversation": "turns",
    "messages": "turns",
    "categories": "category",
    "functions": "tools",
}

_ROLE_ALIASES = {"human": "user", "gpt": "assistant", "model": "assistant", "observation": "tool", "function": "tool"}


class SampleFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def calls_text_from_json(calls: list) -> str:
    """Render a JSON call list (``[{"name": ..., "arguments": {...}}]``) in bracket form.

    Names are copied verbatim, so a corrupt name such as ``" forecast"``
    stays visible to the format check instead of being silently fixed.
    """
    parts = []
    for call in calls:
        args = call.get("arguments", call.get("parameters", {}))
        if isinstance(args, str):
            args = json.loads(args) if args.strip() else {}
        body = ", ".join(f"{k}={serialize_value(v)}" for k, v in args.items())
        parts.append(f"{call['name']}({body})")
    return "[" + ", ".join(parts) + "]"


def _looks_like_json_calls(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(isinstance(c, dict) and "name" in c for c in value)


def _normalize_answer(value: Any) -> str:
    if isinstance(value, str):
        text = value.strip()
        if text.startswith("[{") or text.startswith('[ {') or text.startswith("[\n"):
            try:
                decoded = json.loads(text)
            except ValueError:
                return value
            if _looks_like_json_calls(decoded):
                return calls_text_from_json(decoded)
        return value
    if _looks_like_json_calls(value):
        return calls_text_from_json(value)
    if isinstance(value, dict) and "name" in value:
        return calls_text_from_json([value])
    raise SampleFormatError(f"answer must be text or a JSON call list, got {type(value).__name__}")


def _normalize_turns(turns: Any) -> list[dict]:
    out = []
    for t in turns:
        if not isinstance(t, Mapping):
            raise SampleFormatError("conversation turns must be objects")
        role = t.get("role", t.get("from"))
        content = t.get("content", t.get("value", ""))
        role = _ROLE_ALIASES.get(role, role)
        out.append({"role": role, "content": content if content is not None else ""})
    return out


@dataclass
class Sample:
    id: str
    query: str = ""
    tools: Any = field(default_factory=list)  # tool JSON: decoded list or raw text
    answer: str = ""
    cot: str | None = None
    history: list[dict] = field(default_factory=list)
    category: str | None = None
    turns: list[dict] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.answer and not self.turns:
            raise SampleFormatError(f"sample {self.id!r} has an empty answer")

    @classmethod
    def from_dict(cls, record: Mapping, field_map: Mapping[str, str] | None = None) -> "Sample":
        fmap = DEFAULT_FIELD_MAP if field_map is None else field_map
        data = dict(record)
        for src, dst in fmap.items():
            if src in data and dst not in data:
                data[dst] = data.pop(src)
        extra = {k: v for k, v in data.items() if k not in SCHEMA_FIELDS}
        sid = data.get("id")
        if sid is None:
            digest = hashlib.sha1(json.dumps(record, sort_keys=True, ensure_ascii=False).encode()).hexdigest()
            sid = digest[:16]
        answer = data.get("answer")
        cot = data.get("cot")
        if isinstance(answer, str) and cot is None and "<think>" in answer:
            cot, answer = split_think(answer)
            answer = answer.strip()
        turns = data.get("turns")
        return cls(
            id=str(sid),
            query=data.get("query") or "",
            tools=data.get("tools") if data.get("tools") is not None else [],
            answer=_normalize_answer(answer) if answer not in (None, "") else "",
            cot=cot,
            history=_normalize_turns(data.get("history") or []),
            category=data.get("category"),
            turns=_normalize_turns(turns) if turns else None,
            extra=extra,
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "query": self.query, "tools": self.tools}
        if self.cot is not None:
            out["cot"] = self.cot
        if self.answer:
            out["answer"] = self.answer
        if self.history:
            out["history"] = self.history
        if self.category is not None:
            out["category"] = self.category
        if self.turns is not None:
            out["turns"] = self.turns
        out.update(self.extra)
        return out

    @property
    def tools_json(self) -> str:
        return self.tools if isinstance(self.tools, str) else json.dumps(self.tools, ensure_ascii=False)

    @property
    def is_multi_turn(self) -> bool:
        return bool(self.turns)

    def split_turns(self) -> list["Sample"]:
        """One sample per assistant turn; single-turn samples come back as ``[self]``."""
        if not self.turns:
            return [self]
        out = []
        last_user = None
        for i, turn in enumerate(self.turns):
            if turn["role"] == "user":
                last_user = i
            elif turn["role"] == "assistant" and turn["content"].strip():
                cot, answer = split_think(turn["content"])
                if not answer.strip():
                    continue
                start = last_user if last_user is not None else i
                out.append(Sample(
                    id=f"{self.id}#{len(out)}",
                    query=self.turns[last_user]["content"] if last_user is not None else self.query,
                    tools=self.tools,
                    answer=_normalize_answer(answer.strip()),
                    cot=cot,
                    history=self.turns[:start],
                    category=self.category,
                    extra={"source_id": self.id, "turn": i},
                ))
        return out


@contextlib.contextmanager
def _open(path, mode: str):
    if hasattr(path, "read") or hasattr(path, "write"):
        yield path
    elif str(path) == "-":
        stream = sys.stdin if "r" in mode else sys.stdout
        yield stream
    else:
        with open(path, mode, encoding="utf-8") as fh:
            yield fh


def read_samples(
    path,
    lenient: bool = False,
    split_turns: bool = False,
    field_map: Mapping[str, str] | None = None,
) -> Iterator[Sample]:
    """Stream samples from a JSONL file (``-`` for stdin).

    Malformed lines abort with the line number, or are skipped with a
    warning when ``lenient`` is set.  Only one record is held at a time.
    """
    seen: set[str] = set()
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise SampleFormatError("record is not a JSON object", lineno)
                sample = Sample.from_dict(record, field_map)
                if sample.id in seen:
                    raise SampleFormatError(f"duplicate id {sample.id!r}", lineno)
            except (ValueError, KeyError, TypeError) as exc:
                err = exc if isinstance(exc, SampleFormatError) and exc.line else SampleFormatError(str(exc), lineno)
                if not lenient:
                    raise err from None
                logger.warning("skipping %s", err)
                continue
            seen.add(sample.id)
            if split_turns:
                yield from sample.split_turns()
            else:
                yield sample


def write_samples(samples: Iterable[Sample | Mapping], path) -> int:
    n = 0
    with _open(path, "w") as fh:
        for s in samples:
            record = s.to_dict() if isinstance(s, Sample) else dict(s)
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            n += 1
    return n


def iter_catalog_names(tools: Any) -> list[str]:
    if isinstance(tools, str):
        try:
            tools = json.loads(tools)
        except ValueError:
            return []
    if isinstance(tools, dict):
        tools = [tools]
    if not isinstance(tools, list):
        return []
    return [t["name"] for t in tools if isinstance(t, dict) and isinstance(t.get("name"), str)]


@dataclass
class CorpusReport:
    n_samples: int
    n_apis: int
    categories: dict[str, int]
    multi_turn_split: int  # per-turn samples cut from multi-turn records
    tokens: TokenStats
    tokenizer: str = "whitespace"

    def to_dict(self) -> dict:
        return {
            "samples": self.n_samples,
            "apis": self.n_apis,
            "categories": len(self.categories),
            "category_counts": self.categories,
            "multi_turn_split": self.multi_turn_split,
            "tokenizer": self.tokenizer,
            "token_stats": self.tokens.to_dict(),
        }

    def to_text(self) -> str:
        t = self.tokens
        rows = [
            ("", "Mean", "Median"),
            ("CoT tokens", f"{t.cot_mean:.2f}", f"{t.cot_median:.2f}"),
            ("Result tokens", f"{t.result_mean:.2f}", f"{t.result_median:.2f}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{a:<{width}}  {b:>10}  {c:>10}" for a, b, c in rows]
        lines.append("")
        lines.append(f"samples {self.n_samples}  apis {self.n_apis}  categories {len(self.categories)}  "
                     f"split turns {self.multi_turn_split}  counted {t.count}")
        for name, count in sorted(self.categories.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"  {name:<{width}}  {count:>10}")
        return "\n".join(lines)


def report(source, tokenizer: TokenCounter | None = None, lenient: bool = False,
           field_map: Mapping[str, str] | None = None) -> CorpusReport:
    """Corpus statistics: sample/API/category counts and token statistics."""
    if isinstance(source, (str, os.PathLike, io.IOBase)):
        samples = read_samples(source, lenient, False, field_map)
    else:
        samples = source
    categories: Counter = Counter()
    apis: set[str] = set()
    n = 0
    n_split = 0

    def stream():
        nonlocal n, n_split
        for s in samples:
            n += 1
            if s.category is not None:
                for c in s.category if isinstance(s.category, list) else [s.category]:
                    categories[str(c)] += 1
            apis.update(iter_catalog_names(s.tools))
            turns = s.split_turns()
            if s.is_multi_turn:
                n_split += len(turns)
            yield from turns

    stats = corpus_token_stats(stream(), tokenizer)
    name = getattr(tokenizer, "name", "whitespace") if tokenizer else "whitespace"
    return CorpusReport(n, len(apis), dict(categories), n_split, stats, name)
