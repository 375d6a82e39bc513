"""Span-decomposed SFT loss and the balanced reasoning/call reweighting.

A response is split into a reasoning span (the ``<think>...</think>`` block,
delimiters included) followed by a call span.  With per-token losses
``l_i`` and span sizes ``n_think + n_result = n_all``::

    loss_sft  = mean(l)                    = w_think * loss_think + w_result * loss_result
    loss_ssb  = alpha * loss_think + (1 - alpha) * loss_result

where ``w_think = n_think / n_all`` and ``w_result = 1 - w_think``.  Plain
SFT is the special case ``alpha == w_think``; because the reasoning span is
usually ten times longer than the call, SFT spends most of its signal on
reasoning tokens.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "TokenCounter",
    "WhitespaceTokenizer",
    "TokenizerFileCounter",
    "SegmentationError",
    "SpanMask",
    "LossBreakdown",
    "AlphaState",
    "segment",
    "decompose",
    "nll_from_logits",
    "alpha_step",
    "corpus_token_stats",
    "TokenStats",
    "SSBLoss",
]

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ALPHA_MODES = ("fixed", "sgd", "balance")
_THETA_BOUND = 30.0  # keeps logistic(theta) strictly inside (0, 1) in float64


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class WhitespaceTokenizer:
    """Counts whitespace-separated tokens."""

    name = "whitespace"

    def count(self, text: str) -> int:
        return len(text.split())


class TokenizerFileCounter:
    """Counts tokens with a byte-pair vocabulary loaded from a ``tokenizer.json``."""

    def __init__(self, path: str):
        from tokenizers import Tokenizer

        self.name = str(path)
        self._tok = Tokenizer.from_file(str(path))

    def count(self, text: str) -> int:
        if not text:
            return 0
        return len(self._tok.encode(text, add_special_tokens=False).ids)


def make_tokenizer(spec: str | None) -> TokenCounter:
    if spec in (None, "", "whitespace"):
        return WhitespaceTokenizer()
    return TokenizerFileCounter(spec)


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SpanMask:
    n_think: int
    n_result: int

    def __post_init__(self):
        if self.n_think < 0:
            raise ValueError("n_think must be >= 0")
        if self.n_result < 1:
            raise ValueError("the result span must hold at least one token")

    @property
    def n_all(self) -> int:
        return self.n_think + self.n_result

    @property
    def think(self) -> slice:
        return slice(0, self.n_think)

    @property
    def result(self) -> slice:
        return slice(self.n_think, self.n_all)


def split_think(text: str) -> tuple[str | None, str]:
    """Return ``(think_inner, answer)``; ``think_inner`` is None when there is no block."""
    body = text.lstrip()
    if THINK_OPEN not in text:
        if THINK_CLOSE in text:
            raise SegmentationError(f"{THINK_CLOSE} without a matching {THINK_OPEN}")
        return None, text
    if not body.startswith(THINK_OPEN):
        raise SegmentationError("think block appears after answer text")
    end = body.find(THINK_CLOSE)
    if end < 0:
        raise SegmentationError(f"unterminated {THINK_OPEN} block")
    inner = body[len(THINK_OPEN) : end]
    rest = body[end + len(THINK_CLOSE) :]
    if THINK_OPEN in inner or THINK_OPEN in rest or THINK_CLOSE in rest:
        raise SegmentationError("more than one think block")
    return inner, rest


def segment(response_text: str, tokenizer: TokenCounter | None = None) -> SpanMask:
    """Token counts of the reasoning span (delimiters included) and the call span."""
    tokenizer = tokenizer or WhitespaceTokenizer()
    inner, rest = split_think(response_text)
    n_think = 0
    if inner is not None:
        n_think = tokenizer.count(THINK_OPEN) + tokenizer.count(inner) + tokenizer.count(THINK_CLOSE)
    n_result = tokenizer.count(rest)
    if n_result == 0:
        raise SegmentationError("empty result span")
    return SpanMask(n_think, n_result)


@dataclass(frozen=True)
class LossBreakdown:
    n_think: int
    n_result: int
    w_think: float
    w_result: float
    loss_think: float
    loss_result: float
    loss_sft: float
    alpha: float
    loss_ssb: float

    def to_dict(self) -> dict:
        return {
            "n_think": self.n_think,
            "n_result": self.n_result,
            "w_think": self.w_think,
            "w_result": self.w_result,
            "loss_think": self.loss_think,
            "loss_result": self.loss_result,
            "loss_sft": self.loss_sft,
            "alpha": self.alpha,
            "loss_ssb": self.loss_ssb,
        }


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p) - math.log1p(-p)


@dataclass(frozen=True)
class AlphaState:
    """Weight on the reasoning span and its update rule.

    ``sgd`` keeps a logistic-parameterized ``theta`` and descends the
    balanced loss; ``balance`` sets alpha so both spans contribute equally;
    ``fixed`` never moves.
    """

    mode: str = "fixed"
    alpha: float = 0.7
    theta: float = field(default=math.nan)
    lr: float = 1e-3
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise ValueError(f"alpha mode must be one of {ALPHA_MODES}, got {self.mode!r}")
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError("alpha clamp bounds must satisfy 0 <= lower <= upper <= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode == "sgd":
            if not 0.0 < self.alpha < 1.0:
                raise ValueError("sgd mode needs alpha strictly inside (0, 1)")
            if math.isnan(self.theta):
                theta = min(max(_logit(self.alpha), -_THETA_BOUND), _THETA_BOUND)
                object.__setattr__(self, "theta", theta)
                object.__setattr__(self, "alpha", _sigmoid(theta))
        elif math.isnan(self.theta):
            object.__setattr__(self, "theta", _logit(self.alpha))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "alpha": self.alpha, "lr": self.lr}


def _as_losses(losses: Any) -> np.ndarray:
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("per-token losses must be a flat sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("per-token losses contain NaN or inf")
    if np.any(arr < 0):
        raise ValueError("per-token losses must be non-negative")
    return arr


def decompose(losses: Sequence[float], mask: SpanMask, alpha: float | AlphaState = 0.7) -> LossBreakdown:
    arr = _as_losses(losses)
    if len(arr) != mask.n_all:
        raise ValueError(f"{len(arr)} losses for a mask of {mask.n_all} tokens")
    a = alpha.alpha if isinstance(alpha, AlphaState) else float(alpha)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {a}")
    values = arr.tolist()
    nt, nf, n = mask.n_think, mask.n_result, mask.n_all
    loss_think = math.fsum(values[:nt]) / nt if nt else 0.0
    loss_result = math.fsum(values[nt:]) / nf
    w_think = nt / n
    w_result = 1.0 - w_think
    return LossBreakdown(
        n_think=nt,
        n_result=nf,
        w_think=w_think,
        w_result=w_result,
        loss_think=loss_think,
        loss_result=loss_result,
        loss_sft=math.fsum(values) / n,
        alpha=a,
        loss_ssb=a * loss_think + (1.0 - a) * loss_result,
    )


def nll_from_logits(logits: Any, targets: Sequence[int]) -> np.ndarray:
    """Per-token negative log-likelihood of ``targets`` under row-wise softmax."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if x.ndim != 2:
        raise ValueError("logits must be an (n_tokens, vocab) matrix")
    if t.ndim != 1 or len(t) != x.shape[0]:
        raise ValueError(f"{len(t)} targets for {x.shape[0]} logit rows")
    if len(t) and (not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= x.shape[1]):
        raise ValueError("targets must be integer ids in [0, vocab)")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    return lse - x[np.arange(len(t)), t]


def alpha_step(state: AlphaState, breakdown: LossBreakdown) -> AlphaState:
    if state.mode == "fixed":
        return state
    if state.mode == "sgd":
        a = state.alpha
        grad = (breakdown.loss_think - breakdown.loss_result) * a * (1.0 - a)
        theta = min(max(state.theta - state.lr * grad, -_THETA_BOUND), _THETA_BOUND)
        return replace(state, theta=theta, alpha=_sigmoid(theta))
    total = breakdown.loss_think + breakdown.loss_result
    if total == 0.0:
        return state
    a = min(max(breakdown.loss_result / total, state.lower), state.upper)
    return replace(state, alpha=a, theta=_logit(a))


# --------------------------------------------------------------------------
# corpus token statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenStats:
    count: int  # samples after per-turn splitting
    cot_count: int  # of those, samples carrying reasoning text
    cot_mean: float
    cot_median: float
    result_mean: float
    result_median: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "cot": {"n": self.cot_count, "mean": self.cot_mean, "median": self.cot_median},
            "result": {"n": self.count, "mean": self.result_mean, "median": self.result_median},
        }

    @property
    def cot(self) -> tuple[float, float]:
        return self.cot_mean, self.cot_median

    @property
    def result(self) -> tuple[float, float]:
        return self.result_mean, self.result_median


def _text_parts(sample: Any) -> tuple[str | None, str]:
    if isinstance(sample, Mapping):
        cot, answer = sample.get("cot"), sample.get("answer", "")
    else:
        cot, answer = sample.cot, sample.answer
    if cot is None and THINK_OPEN in answer:
        cot, answer = split_think(answer)
    return cot, answer


def corpus_token_stats(samples: Iterable[Any], tokenizer: TokenCounter | None = None) -> TokenStats:
    """Mean and median token counts of reasoning text and call text.

    Multi-turn records are split per turn before counting.  Samples without
    reasoning text count toward the call statistics only.
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    cot_counts: list[int] = []
    result_counts: list[int] = []
    for sample in samples:
        turns = sample.split_turns() if hasattr(sample, "split_turns") else [sample]
        for turn in turns:
            cot, answer = _text_parts(turn)
            if cot is not None:
                cot_counts.append(tokenizer.count(cot))
            result_counts.append(tokenizer.count(answer))

    def summary(xs):
        return (float(statistics.fmean(xs)), float(statistics.median(xs))) if xs else (0.0, 0.0)

    cot_mean, cot_median = summary(cot_counts)
    res_mean, res_median = summary(result_counts)
    return TokenStats(len(result_counts), len(cot_counts), cot_mean, cot_median, res_mean, res_median)


# --------------------------------------------------------------------------
# estimator wrapper
# --------------------------------------------------------------------------


def _record_to_pair(record: Any, tokenizer: TokenCounter) -> tuple[np.ndarray, SpanMask]:
    if isinstance(record, tuple) and len(record) == 2 and isinstance(record[1], SpanMask):
        return _as_losses(record[0]), record[1]
    if not isinstance(record, Mapping):
        raise TypeError("records are (losses, SpanMask) pairs or mappings")
    losses = record.get("per_token_losses")
    if losses is None:
        raise ValueError("record carries no per_token_losses")
    losses = _as_losses(losses)
    if "response_text" in record:
        mask = segment(record["response_text"], tokenizer)
    else:
        n_think = int(record.get("n_think", 0))
        mask = SpanMask(n_think, len(losses) - n_think)
    return losses, mask


class SSBLoss(TransformerMixin, BaseEstimator):
    """Decompose per-token losses into reasoning and call spans and track alpha.

    ``fit`` streams the records once, decomposing each with the current
    alpha and then applying the configured update.  ``transform`` decomposes
    with the fitted alpha and leaves it untouched.

    Records are ``(losses, SpanMask)`` pairs or mappings with
    ``per_token_losses`` plus either ``n_think`` or ``response_text``.
    """

    def __init__(self, alpha_mode="fixed", alpha_init=0.7, learning_rate=1e-3, tokenizer=None):
        self.alpha_mode = alpha_mode
        self.alpha_init = alpha_init
        self.learning_rate = learning_rate
        self.tokenizer = tokenizer

    def _initial_state(self) -> AlphaState:
        return AlphaState(mode=self.alpha_mode, alpha=self.alpha_init, lr=self.learning_rate)

    def fit(self, X, y=None):
        self._fit(X)
        return self

    def fit_transform(self, X, y=None, **fit_params):
        return self._fit(X)

    def _fit(self, X) -> list[LossBreakdown]:
        tokenizer = self.tokenizer or WhitespaceTokenizer()
        state = self._initial_state()
        history = []
        for record in X:
            losses, mask = _record_to_pair(record, tokenizer)
            breakdown = decompose(losses, mask, state)
            history.append(breakdown)
            state = alpha_step(state, breakdown)
        self.alpha_state_ = state
        self.alpha_ = state.alpha
        self.n_records_ = len(history)
        return history

    def transform(self, X) -> list[LossBreakdown]:
        check_is_fitted(self, "alpha_state_")
        tokenizer = self.tokenizer or WhitespaceTokenizer()
        return [decompose(*_record_to_pair(r, tokenizer), self.alpha_state_) for r in X]
