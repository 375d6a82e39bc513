"""Iterative resampling of hard samples.

Each iteration the current model answers every hard query ``n_gen`` times,
an ensemble of ``k`` judges scores every candidate, and a sample whose
candidate clears the acceptance rule leaves the hard set; its accepted
response joins that iteration's new training data, which is handed to a
fine-tune hook that returns the next model tag.  The loop stops when the
hard set is empty or after ``t_max`` iterations.

A candidate's score is the fraction of judges whose raw score reaches
``tau``.  ``unanimous`` acceptance needs every judge; ``majority`` needs
more than half.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset_io import Sample
from .endpoints import Port, TransportError, render_prompt
from .fcall import CallList, FCallSyntaxError, parse_lenient, serialize
from .loss import SegmentationError, split_think
from .quality_gate import bounded_map

logger = logging.getLogger(__name__)

__all__ = [
    "LoopConfig",
    "CandidateResponse",
    "JudgeVerdictSet",
    "LoopState",
    "FineTunePort",
    "DeskFineTune",
    "CommandFineTune",
    "CheckpointError",
    "extract_score",
    "generate_candidates",
    "score_candidate",
    "accept",
    "run_iteration",
    "run_loop",
    "HDRLoop",
]

UNANIMOUS, MAJORITY = "unanimous", "majority"
RUNNING, CONVERGED, MAX_ITERATIONS = "running", "converged", "max_iterations"
CHECKPOINT_NAME = "checkpoint.json"

_THINK_BLOCK = re.compile(r"<think>.*?</think>", re.S)
_NUMBER = re.compile(r"(?<![\w.])[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    t_max: int = 10
    tau: float = 0.5
    n_gen: int = 3
    temperature: float = 0.7
    judge_temperature: float = 0.7
    acceptance: str = UNANIMOUS
    k: int | None = None  # judge count; checked against the ports when set
    seed: int = 0
    judge_retries: int = 2
    parallelism: int = 8

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.n_gen < 1:
            raise ValueError("n_gen must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.acceptance not in (UNANIMOUS, MAJORITY):
            raise ValueError(f"acceptance must be {UNANIMOUS!r} or {MAJORITY!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    def config_hash(self) -> str:
        # parallelism never changes results, so it stays out of the hash
        d = asdict(self)
        d.pop("parallelism")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def accepts(self, score: Fraction) -> bool:
        if self.acceptance == UNANIMOUS:
            return score == 1
        return score > Fraction(1, 2)


@dataclass
class CandidateResponse:
    sample_id: str
    attempt: int
    text: str | None
    calls: CallList | None = None
    generator: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.text is not None


@dataclass
class JudgeVerdictSet:
    raw_scores: list[float | None]
    tau: float
    evidence: list[dict] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.raw_scores)

    @property
    def pass_bits(self) -> list[int]:
        return [int(s is not None and s >= self.tau) for s in self.raw_scores]

    @property
    def score(self) -> Fraction:
        return Fraction(sum(self.pass_bits), self.k)

    def to_dict(self) -> dict:
        return {"raw": self.raw_scores, "pass": self.pass_bits, "score": str(self.score)}


def extract_score(reply: str) -> float | None:
    """First number in the reply outside any think block, if it lies in [0, 1]."""
    text = _THINK_BLOCK.sub(" ", reply or "")
    m = _NUMBER.search(text)
    if not m:
        return None
    value = float(m.group())
    return value if 0.0 <= value <= 1.0 else None


def _derived_seed(seed: int, *parts: Any) -> int:
    h = hashlib.sha256(json.dumps([seed, *parts]).encode()).digest()
    return int.from_bytes(h[:4], "big")


def _parse_response(text: str) -> CallList | None:
    try:
        _, answer = split_think(text)
    except SegmentationError:
        return None
    try:
        return parse_lenient(answer)[0]
    except FCallSyntaxError:
        return None


def generate_candidates(hard: Sequence[Sample], generator: Port, cfg: LoopConfig, t: int = 0,
                        model_tag: str = "") -> list[CandidateResponse]:
    """``n_gen`` candidates per hard sample; failed calls come back with ``text=None``."""
    jobs = [(s, j) for s in hard for j in range(cfg.n_gen)]
    tag = getattr(generator, "name", type(generator).__name__)

    def run(job) -> CandidateResponse:
        sample, j = job
        messages = render_prompt("generator", {"tools": sample.tools_json, "query": sample.query,
                                               "history": sample.history})
        try:
            text = generator.complete(messages, sample_id=sample.id, purpose="generator", attempt=j,
                                      iteration=t, model_tag=model_tag, temperature=cfg.temperature,
                                      seed=_derived_seed(cfg.seed, t, sample.id, j))
        except TransportError as exc:
            return CandidateResponse(sample.id, j, None, None, tag, error=str(exc))
        return CandidateResponse(sample.id, j, text, _parse_response(text), tag)

    return list(bounded_map(run, jobs, cfg.parallelism))


def score_candidate(candidate: CandidateResponse, judges: Sequence[Port], cfg: LoopConfig,
                    sample: Sample | None = None) -> JudgeVerdictSet:
    """Ask each judge for a raw score in [0, 1].

    Unparseable replies are re-asked up to ``judge_retries`` times; a judge
    that still has no score, or whose transport fails, contributes a zero
    pass bit.
    """
    fields = {
        "query": sample.query if sample else "",
        "tools": sample.tools_json if sample else "[]",
        "response": candidate.text or "",
    }
    messages = render_prompt("judge_score", fields)
    scores: list[float | None] = []
    evidence = []
    for m, judge in enumerate(judges):
        score = None
        try:
            for retry in range(cfg.judge_retries + 1):
                reply = judge.complete(messages, sample_id=candidate.sample_id, purpose="judge_score",
                                       attempt=candidate.attempt, judge_index=m, retry=retry,
                                       temperature=cfg.judge_temperature)
                score = extract_score(reply)
                if score is not None:
                    break
            else:
                evidence.append({"judge": m, "code": "MALFORMED_SCORE", "reply": reply})
        except TransportError as exc:
            evidence.append({"judge": m, "code": "JUDGE_UNAVAILABLE", "message": str(exc)})
        scores.append(score)
    return JudgeVerdictSet(scores, cfg.tau, evidence)


def accept(scored: Sequence[tuple[CandidateResponse, JudgeVerdictSet]], cfg: LoopConfig,
           evidence: list | None = None) -> tuple[CandidateResponse, JudgeVerdictSet] | None:
    """Lowest-attempt candidate meeting the acceptance rule and carrying a parseable call."""
    for cand, verdict in sorted(scored, key=lambda cv: cv[0].attempt):
        if not cfg.accepts(verdict.score):
            continue
        if cand.calls is None:
            if evidence is not None:
                evidence.append({"id": cand.sample_id, "attempt": cand.attempt, "code": "DEMOTED_UNPARSEABLE"})
            continue
        return cand, verdict
    return None


class FineTunePort(Protocol):
    def fine_tune(self, records: list[dict], model_tag: str, iteration: int) -> str: ...


class DeskFineTune:
    """Records each fine-tune request and returns a synthetic model tag."""

    def __init__(self):
        self.requests: list[tuple[int, str, int]] = []

    def fine_tune(self, records, model_tag, iteration):
        self.requests.append((iteration, model_tag, len(records)))
        digest = hashlib.sha256(json.dumps([r["id"] for r in records]).encode()).hexdigest()[:8]
        return f"{model_tag}+t{iteration}-{digest}"


class CommandFineTune:
    """Runs an external training command on the D_new file and reads the new model id.

    The command receives the JSONL path as its last argument and must print
    the new model identifier as the last line of stdout.
    """

    def __init__(self, command: Sequence[str], workdir: str | Path | None = None):
        self.command = list(command)
        self.workdir = Path(workdir) if workdir else None

    def fine_tune(self, records, model_tag, iteration):
        with tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False, dir=self.workdir,
                                         encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, ensure_ascii=False) + "\n")
            path = fh.name
        env = {**os.environ, "FCURATE_MODEL_TAG": model_tag, "FCURATE_ITERATION": str(iteration)}
        try:
            out = subprocess.run(self.command + [path], check=True, capture_output=True, text=True, env=env)
        finally:
            os.unlink(path)
        lines = [line for line in out.stdout.splitlines() if line.strip()]
        if not lines:
            raise RuntimeError("fine-tune command printed no model identifier")
        return lines[-1].strip()


@dataclass(frozen=True)
class LoopState:
    t: int
    hard_ids: tuple[str, ...]
    model_tag: str = "M0"
    termination: str = RUNNING
    dnew: tuple[tuple[dict, ...], ...] = ()  # accepted records, one tuple per iteration
    dnew_paths: tuple[str, ...] = ()
    report: tuple[dict, ...] = ()

    def to_checkpoint(self, cfg: LoopConfig) -> dict:
        return {
            "t": self.t,
            "hard_ids": list(self.hard_ids),
            "dnew_manifest_paths": list(self.dnew_paths),
            "model_tag": self.model_tag,
            "termination": self.termination,
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
            "report": list(self.report),
        }

    @property
    def accepted_ids(self) -> list[str]:
        return [r["id"] for batch in self.dnew for r in batch]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps_checkpoint(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def run_iteration(state: LoopState, samples: dict[str, Sample], generator: Port, judges: Sequence[Port],
                  cfg: LoopConfig, finetune: FineTunePort | None = None,
                  checkpoint_dir: str | Path | None = None) -> LoopState:
    if state.termination != RUNNING:
        raise ValueError(f"loop already terminated ({state.termination})")
    if not judges:
        raise ValueError("at least one judge is required")
    if cfg.k is not None and cfg.k != len(judges):
        raise ValueError(f"config expects {cfg.k} judges, got {len(judges)}")
    hard = [samples[i] for i in state.hard_ids]
    candidates = generate_candidates(hard, generator, cfg, state.t, state.model_tag)

    def judge(c: CandidateResponse):
        return c, score_candidate(c, judges, cfg, samples[c.sample_id])

    scored = list(bounded_map(judge, [c for c in candidates if c.ok], cfg.parallelism))
    by_sample: dict[str, list] = {s.id: [] for s in hard}
    for cand, verdict in scored:
        by_sample[cand.sample_id].append((cand, verdict))

    evidence: list[dict] = []
    records = []
    for sample in hard:
        if not by_sample[sample.id]:
            evidence.append({"id": sample.id, "code": "NO_CANDIDATES"})
            continue
        chosen = accept(by_sample[sample.id], cfg, evidence)
        if chosen is None:
            continue
        cand, verdict = chosen
        records.append({
            "id": sample.id,
            "query": sample.query,
            "tools": sample.tools,
            "response_text": cand.text,
            "call_canonical": serialize(cand.calls),
            "scores": verdict.to_dict(),
            "attempt": cand.attempt,
            "iteration": state.t,
        })

    model_tag = state.model_tag
    if records and finetune is not None:
        model_tag = finetune.fine_tune(records, state.model_tag, state.t)

    accepted = {r["id"] for r in records}
    hard_after = tuple(i for i in state.hard_ids if i not in accepted)
    t = state.t + 1
    if not hard_after:
        termination = CONVERGED
    elif t >= cfg.t_max:
        termination = MAX_ITERATIONS
    else:
        termination = RUNNING
    entry = {
        "t": state.t,
        "hard_before": len(hard),
        "candidates": len(candidates),
        "missing_attempts": sum(1 for c in candidates if not c.ok),
        "accepted": len(records),
        "acceptance_rate": len(records) / len(hard) if hard else 0.0,
        "hard_after": len(hard_after),
        "model_tag": model_tag,
        "evidence": evidence,
    }
    new_state = LoopState(t, hard_after, model_tag, termination, state.dnew + (tuple(records),),
                          state.dnew_paths, state.report + (entry,))
    if checkpoint_dir is not None:
        new_state = _write_checkpoint(new_state, records, state.t, Path(checkpoint_dir), cfg)
    return new_state


def _write_checkpoint(state: LoopState, records: list[dict], t: int, root: Path, cfg: LoopConfig) -> LoopState:
    name = f"dnew_t{t:03d}.jsonl"
    state = replace(state, dnew_paths=state.dnew_paths + (name,))
    try:
        _atomic_write(root / name, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records))
        _atomic_write(root / CHECKPOINT_NAME, _dumps_checkpoint(state.to_checkpoint(cfg)))
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint for iteration {t}: {exc}") from exc
    return state


def load_checkpoint(checkpoint_dir: str | Path, cfg: LoopConfig) -> LoopState | None:
    root = Path(checkpoint_dir)
    path = root / CHECKPOINT_NAME
    if not path.exists():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("config_hash") != cfg.config_hash() or data.get("seed") != cfg.seed:
        raise CheckpointError("checkpoint was written under a different loop configuration")
    dnew = []
    for name in data["dnew_manifest_paths"]:
        lines = (root / name).read_text(encoding="utf-8").splitlines()
        dnew.append(tuple(json.loads(line) for line in lines if line.strip()))
    return LoopState(data["t"], tuple(data["hard_ids"]), data["model_tag"], data["termination"], tuple(dnew),
                     tuple(data["dnew_manifest_paths"]), tuple(data.get("report", [])))


def run_loop(hard: Iterable[Sample], generator: Port, judges: Sequence[Port], cfg: LoopConfig | None = None,
             finetune: FineTunePort | None = None, checkpoint_dir: str | Path | None = None, resume: bool = False,
             model_tag: str = "M0") -> LoopState:
    """Iterate until the hard set empties or ``t_max`` iterations have run.

    With ``resume`` the loop continues from the checkpoint in
    ``checkpoint_dir`` when one exists.
    """
    cfg = cfg or LoopConfig()
    samples = {}
    for s in hard:
        if s.id in samples:
            raise ValueError(f"duplicate sample id {s.id!r}")
        samples[s.id] = s
    state = None
    if resume and checkpoint_dir is not None:
        state = load_checkpoint(checkpoint_dir, cfg)
        if state is not None:
            unknown = [i for i in state.hard_ids if i not in samples]
            if unknown:
                raise CheckpointError(f"checkpoint names hard samples not in the input: {unknown[:5]}")
            logger.info("resuming at t=%d with %d hard samples", state.t, len(state.hard_ids))
    if state is None:
        state = LoopState(0, tuple(samples), model_tag, RUNNING if samples else CONVERGED)
        if checkpoint_dir is not None:
            _atomic_write(Path(checkpoint_dir) / CHECKPOINT_NAME, _dumps_checkpoint(state.to_checkpoint(cfg)))
    while state.termination == RUNNING:
        state = run_iteration(state, samples, generator, judges, cfg, finetune, checkpoint_dir)
        logger.info("iteration %d: %d hard left (%s)", state.t, len(state.hard_ids), state.termination)
    return state


class HDRLoop(BaseEstimator):
    """Estimator wrapper: ``fit`` runs the loop over a hard set.

    After fitting, ``state_`` holds the final loop state, ``report_`` the
    per-iteration report and ``dnew_`` every accepted record.  ``predict``
    maps samples to the iteration that accepted them, or -1.
    """

    def __init__(self, generator=None, judges=(), finetune=None, t_max=10, tau=0.5, n_gen=3, temperature=0.7,
                 acceptance=UNANIMOUS, seed=0, parallelism=8, checkpoint_dir=None, resume=False):
        self.generator = generator
        self.judges = judges
        self.finetune = finetune
        self.t_max = t_max
        self.tau = tau
        self.n_gen = n_gen
        self.temperature = temperature
        self.acceptance = acceptance
        self.seed = seed
        self.parallelism = parallelism
        self.checkpoint_dir = checkpoint_dir
        self.resume = resume

    def config(self) -> LoopConfig:
        return LoopConfig(t_max=self.t_max, tau=self.tau, n_gen=self.n_gen, temperature=self.temperature,
                          judge_temperature=self.temperature, acceptance=self.acceptance, k=len(self.judges),
                          seed=self.seed, parallelism=self.parallelism)

    def fit(self, X, y=None):
        if self.generator is None:
            raise ValueError("HDRLoop needs a generator port")
        finetune = self.finetune if self.finetune is not None else DeskFineTune()
        self.state_ = run_loop(X, self.generator, list(self.judges), self.config(), finetune,
                               self.checkpoint_dir, self.resume)
        self.report_ = list(self.state_.report)
        self.dnew_ = [r for batch in self.state_.dnew for r in batch]
        return self

    def predict(self, X) -> list[int]:
        check_is_fitted(self, "state_")
        when = {r["id"]: r["iteration"] for r in self.dnew_}
        return [when.get(s.id if isinstance(s, Sample) else s, -1) for s in X]
