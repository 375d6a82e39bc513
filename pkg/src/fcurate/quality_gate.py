"""Two-stage filtration: base quality check, then answer check.

Each sample lands in exactly one bucket:

* ``qualified``: base check and answer check both pass
* ``hard``: base check passes, answer check fails (kept for resampling)
* ``dropped``: base check fails (the answer check is never run)

The base check asks three questions in order (is the answer a call? can
the call be derived from the query and tools? does the reasoning lead to
it?) and stops at the first failure unless ``full_evaluation`` is set.  The
answer check is a deterministic format check plus schema validation,
optionally followed by a judge for semantic plausibility.
"""
from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator

from sklearn.base import BaseEstimator

from .checks import (
    BQC_CHECKS,
    COT_ID,
    FAIL,
    FORMAT,
    FUNC_PARAM,
    JUDGE,
    PASS,
    QUERY_TOOL_ID,
    RESPONSE_ID,
    GateCheckResult,
)
from .dataset_io import Sample
from .endpoints import Port, render_prompt
from .fcall import DEFAULT_GRAMMAR, CallList, FCallSyntaxError, Grammar, ast_equal, parse_lenient, parse_strict
from .tool_schema import CatalogError, load_catalog, validate_calls

logger = logging.getLogger(__name__)

__all__ = [
    "GateVerdict",
    "Partition",
    "parse_judge_verdict",
    "run_bqc",
    "run_ac",
    "evaluate",
    "partition",
    "QualityGate",
]

QUALIFIED, HARD, DROPPED = "qualified", "hard", "dropped"

_JUDGE_TAG = re.compile(r"<judge>(.*?)</judge>", re.S | re.I)
_NEWFC = re.compile(r"<NewFC>(.*?)</NewFC>", re.S | re.I)
_CALL_LIKE = re.compile(r"[A-Za-z_][\w.\-]*\s*\(")

JUDGE_RETRIES = 2


def parse_judge_verdict(reply: str) -> bool | None:
    """First well-formed ``<judge>True|False</judge>`` tag, or None."""
    for m in _JUDGE_TAG.finditer(reply or ""):
        word = m.group(1).strip().lower()
        if word in ("true", "false"):
            return word == "true"
    return None


def parse_new_fc(reply: str) -> str | None:
    m = _NEWFC.search(reply or "")
    return m.group(1).strip() if m else None


@dataclass
class GateVerdict:
    sample_id: str
    bqc_pass: bool
    ac_pass: bool | None  # None when the answer check was skipped
    results: list[GateCheckResult] = field(default_factory=list)
    corrected_call: CallList | None = None

    @property
    def label(self) -> str:
        if not self.bqc_pass:
            return DROPPED
        return QUALIFIED if self.ac_pass else HARD

    def to_dict(self) -> dict:
        out = {
            "id": self.sample_id,
            "label": self.label,
            "bqc_pass": self.bqc_pass,
            "ac_pass": self.ac_pass,
            "results": [r.to_dict() for r in self.results],
        }
        if self.corrected_call is not None:
            out["corrected_call"] = str(self.corrected_call)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GateVerdict":
        corrected = parse_strict(d["corrected_call"]) if d.get("corrected_call") else None
        return cls(d["id"], d["bqc_pass"], d.get("ac_pass"),
                   [GateCheckResult.from_dict(r) for r in d.get("results", [])], corrected)


@dataclass
class Partition:
    qualified: list[str] = field(default_factory=list)
    hard: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def add(self, verdict: GateVerdict) -> None:
        getattr(self, verdict.label).append(verdict.sample_id)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.qualified), len(self.hard), len(self.dropped)

    def to_dict(self) -> dict:
        return {QUALIFIED: self.qualified, HARD: self.hard, DROPPED: self.dropped}


def _ask(judge: Port, template: str, fields: dict, sample_id: str, check: str) -> tuple[str | None, list[str]]:
    """Query the judge, re-asking when the reply carries no usable verdict.

    Returns ``(reply_with_verdict | None, all_replies)``.  Transport errors
    propagate.
    """
    messages = render_prompt(template, fields)
    replies = []
    for attempt in range(JUDGE_RETRIES + 1):
        reply = judge.complete(messages, sample_id=sample_id, purpose=template, attempt=attempt)
        replies.append(reply)
        if parse_judge_verdict(reply) is not None:
            return reply, replies
    return None, replies


def _judge_result(check: str, sample_id: str, reply: str | None, replies: list[str]) -> GateCheckResult:
    ref = f"{sample_id}/{check}"
    if reply is None:
        result = GateCheckResult(check, FAIL, JUDGE, transcript=ref)
        result.add("MALFORMED_JUDGE", f"no <judge> verdict after {len(replies)} replies", replies=replies)
        return result
    verdict = parse_judge_verdict(reply)
    result = GateCheckResult(check, PASS if verdict else FAIL, JUDGE, transcript=ref)
    result.add("JUDGE_VERDICT", f"judge said {verdict}", replies=replies)
    return result


def _response_id(sample: Sample, judge: Port, grammar: Grammar) -> GateCheckResult:
    answer = sample.answer
    try:
        parse_strict(answer.strip(), grammar)
        result = GateCheckResult(RESPONSE_ID, PASS)
        result.add("STRICT_PARSE", "answer is a canonical call list")
        return result
    except FCallSyntaxError:
        pass
    try:
        _, diags = parse_lenient(answer, grammar)
        result = GateCheckResult(RESPONSE_ID, PASS)
        result.add("LENIENT_PARSE", "answer is a call list after format repair", repairs=[d.code for d in diags])
        return result
    except FCallSyntaxError as exc:
        diagnostics = [d.to_dict() for d in exc.diagnostics]
    if not _CALL_LIKE.search(answer):
        result = GateCheckResult(RESPONSE_ID, FAIL)
        result.add("NOT_A_CALL", "answer contains nothing shaped like a function call", diagnostics=diagnostics)
        return result
    reply, replies = _ask(judge, "response_id", {"refANS": answer}, sample.id, RESPONSE_ID)
    return _judge_result(RESPONSE_ID, sample.id, reply, replies)


def _query_tool_id(sample: Sample, judge: Port) -> GateCheckResult:
    reply, replies = _ask(judge, "query_tool_id", {"query": sample.query, "tools": sample.tools_json},
                          sample.id, QUERY_TOOL_ID)
    return _judge_result(QUERY_TOOL_ID, sample.id, reply, replies)


def _cot_id(sample: Sample, judge: Port) -> GateCheckResult:
    if not sample.cot or not sample.cot.strip():
        result = GateCheckResult(COT_ID, PASS)
        result.add("NO_COT", "sample carries no reasoning text; nothing to check")
        return result
    reply, replies = _ask(judge, "cot_id", {"cot": sample.cot, "refFC": sample.answer}, sample.id, COT_ID)
    return _judge_result(COT_ID, sample.id, reply, replies)


def run_bqc(sample: Sample, judge: Port, full_evaluation: bool = False,
            grammar: Grammar = DEFAULT_GRAMMAR) -> tuple[bool, list[GateCheckResult]]:
    if judge is None:
        raise ValueError("the base quality check needs a judge port")
    steps: list[Callable[[], GateCheckResult]] = [
        lambda: _response_id(sample, judge, grammar),
        lambda: _query_tool_id(sample, judge),
        lambda: _cot_id(sample, judge),
    ]
    results = []
    for step in steps:
        result = step()
        results.append(result)
        if not result.passed and not full_evaluation:
            break
    passed = len({r.check for r in results}) == len(BQC_CHECKS) and all(r.passed for r in results)
    return passed, results


def run_ac(sample: Sample, judge: Port | None = None,
           grammar: Grammar = DEFAULT_GRAMMAR) -> tuple[bool, list[GateCheckResult], CallList | None]:
    """Format check and function/parameter check.

    The format check is deterministic: a canonical answer passes, a
    repairable one fails and yields the repair as ``corrected_call``.
    The schema check is deterministic too; the judge is consulted only when
    it passes, and a strictly parseable ``<NewFC>`` block that differs from
    the answer replaces the correction.
    """
    results: list[GateCheckResult] = []
    corrected: CallList | None = None
    calls: CallList | None = None

    fmt = GateCheckResult(FORMAT, PASS)
    try:
        calls = parse_strict(sample.answer, grammar)
        fmt.add("CANONICAL", "answer is in canonical form")
    except FCallSyntaxError as strict_exc:
        fmt.verdict = FAIL
        fmt.evidence.extend({"code": d.code, "message": d.message, "offset": d.offset} for d in strict_exc.diagnostics)
        try:
            calls, _ = parse_lenient(sample.answer, grammar)
            corrected = calls
            fmt.add("REPAIRED", "format repaired", corrected_call=str(calls))
        except FCallSyntaxError:
            fmt.add("UNREPAIRABLE", "answer cannot be repaired by format-only edits")
    results.append(fmt)

    schema = GateCheckResult(FUNC_PARAM, FAIL)
    if calls is None:
        schema.add("UNPARSEABLE", "no call list to validate")
    else:
        try:
            catalog = load_catalog(sample.tools)
        except CatalogError as exc:
            schema.add("CATALOG_ERROR", str(exc))
        else:
            schema = validate_calls(calls, catalog)
    results.append(schema)

    if schema.passed and judge is not None:
        reply, replies = _ask(judge, "func_param_id",
                              {"query": sample.query, "tools": sample.tools_json, "refFC": sample.answer},
                              sample.id, FUNC_PARAM)
        verdict = _judge_result(FUNC_PARAM, sample.id, reply, replies)
        new_fc = parse_new_fc(reply) if reply else None
        if new_fc:
            try:
                proposal = parse_strict(new_fc, grammar)
            except FCallSyntaxError as exc:
                verdict.add("NEWFC_DISCARDED", f"judge correction is not canonical: {exc}")
            else:
                if not ast_equal(proposal, calls):
                    corrected = proposal
                    verdict.add("JUDGE_CORRECTION", "judge proposed a corrected call", corrected_call=str(proposal))
        results.append(verdict)

    return all(r.passed for r in results), results, corrected


def evaluate(sample: Sample, judge: Port, ac_judge: Port | None | bool = True, full_evaluation: bool = False,
             grammar: Grammar = DEFAULT_GRAMMAR) -> GateVerdict:
    """Base check, then (only if it passed) the answer check."""
    bqc_pass, results = run_bqc(sample, judge, full_evaluation, grammar)
    if not bqc_pass:
        return GateVerdict(sample.id, False, None, results)
    port = judge if ac_judge is True else (ac_judge or None)
    ac_pass, ac_results, corrected = run_ac(sample, port, grammar)
    return GateVerdict(sample.id, True, ac_pass, results + ac_results, corrected)


def bounded_map(fn: Callable[[Any], Any], items: Iterable[Any], workers: int) -> Iterator[Any]:
    """``map`` over a thread pool with at most ``2 * workers`` items in flight, in input order."""
    if workers <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def partition(samples: Iterable[Sample], judge: Port, ac_judge: Port | None | bool = True, parallelism: int = 1,
              full_evaluation: bool = False, grammar: Grammar = DEFAULT_GRAMMAR,
              on_verdict: Callable[[GateVerdict], None] | None = None) -> tuple[Partition, list[GateVerdict]]:
    """Sort every sample into qualified / hard / dropped.

    Verdicts come back in input order whatever the parallelism.
    ``on_verdict`` sees each verdict as soon as it is final, which lets a
    caller persist progress for resumption.
    """
    part = Partition()
    verdicts = []
    seen: set[str] = set()

    def work(sample: Sample) -> GateVerdict:
        return evaluate(sample, judge, ac_judge, full_evaluation, grammar)

    def unique(stream):
        for s in stream:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            yield s

    for verdict in bounded_map(work, unique(samples), parallelism):
        part.add(verdict)
        verdicts.append(verdict)
        if on_verdict is not None:
            on_verdict(verdict)
    return part, verdicts


class QualityGate(BaseEstimator):
    """Estimator-style wrapper around :func:`partition`.

    Nothing is learned; ``fit`` only checks the configuration.  ``predict``
    returns one label per sample (``"qualified"``, ``"hard"`` or
    ``"dropped"``) and keeps the verdicts on ``verdicts_``.

    ``use_judge_in_ac`` controls whether the answer check also consults the
    judge after the deterministic checks pass.
    """

    def __init__(self, judge=None, use_judge_in_ac=True, parallelism=1, full_evaluation=False, grammar=None):
        self.judge = judge
        self.use_judge_in_ac = use_judge_in_ac
        self.parallelism = parallelism
        self.full_evaluation = full_evaluation
        self.grammar = grammar

    def fit(self, X=None, y=None):
        if self.judge is None:
            raise ValueError("QualityGate needs a judge port")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.grammar_ = self.grammar or DEFAULT_GRAMMAR
        return self

    def _run(self, X) -> tuple[Partition, list[GateVerdict]]:
        if not hasattr(self, "grammar_"):
            self.fit()
        part, verdicts = partition(X, self.judge, self.use_judge_in_ac, self.parallelism,
                                   self.full_evaluation, self.grammar_)
        self.partition_, self.verdicts_ = part, verdicts
        return part, verdicts

    def transform(self, X) -> list[GateVerdict]:
        return self._run(X)[1]

    def predict(self, X) -> list[str]:
        return [v.label for v in self._run(X)[1]]

    def split(self, X) -> Partition:
        return self._run(X)[0]
