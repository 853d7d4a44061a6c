"""Length-normalized pseudo-label filtering.

A fused decode score grows roughly linearly in transcript length with
fluctuations on the order of the square root of the length. The filter model
standardizes it: fit (mu, beta) by least squares of score on length over dev
transcripts, take sigma as the standard deviation of the per-sqrt-length
residuals, and rank every generated transcript by

    (score - mu * length - beta) / (sigma * sqrt(length)).

Relaxing the cutoff on this statistic over training generations grows the
kept set while holding its quality roughly constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import Dataset, MissingTranscriptError
from .errors import NstError
from .scoring import corpus_wer

SIGMA_FLOOR = 1e-12

NEG_INF = float("-inf")


class FilteringError(NstError):
    pass


class TooFewPointsError(FilteringError):
    pass


class DegenerateDesignError(FilteringError):
    pass


class MissingScoreError(FilteringError):
    def __init__(self, utterance_id: str):
        super().__init__(f"utterance {utterance_id!r} carries no score")
        self.utterance_id = utterance_id


@dataclass(frozen=True)
class FilterModel:
    """Fitted normalization (mu: score per token, beta: offset, sigma: scale)."""

    mu: float
    beta: float
    sigma: float

    def __post_init__(self):
        for name in ("mu", "beta", "sigma"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise FilteringError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.sigma <= 0:
            raise FilteringError("sigma must be positive")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "beta": self.beta, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, record: Mapping) -> "FilterModel":
        return cls(float(record["mu"]), float(record["beta"]), float(record["sigma"]))


def fit_filter(pairs: Sequence[tuple[int, float]]) -> FilterModel:
    """Fit the filter model on (length, fused score) pairs.

    mu and beta are the ordinary least squares fit of score on length; sigma
    is the population standard deviation of the residuals divided by
    sqrt(length), floored at SIGMA_FLOOR so noiseless data stays usable.
    """
    if len(pairs) < 3:
        raise TooFewPointsError(f"need >= 3 pairs, got {len(pairs)}")
    lengths = np.array([p[0] for p in pairs], dtype=np.float64)
    scores = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.any(lengths < 1) or np.any(lengths != np.round(lengths)):
        raise FilteringError("lengths must be integers >= 1")
    if not np.all(np.isfinite(scores)):
        raise FilteringError("scores must be finite")
    if np.unique(lengths).size < 2:
        raise DegenerateDesignError("all lengths equal; slope is unidentifiable")
    l_mean = lengths.mean()
    s_mean = scores.mean()
    sxx = float(np.sum((lengths - l_mean) ** 2))
    sxy = float(np.sum((lengths - l_mean) * (scores - s_mean)))
    mu = sxy / sxx
    beta = s_mean - mu * l_mean
    normalized = (scores - mu * lengths - beta) / np.sqrt(lengths)
    sigma = max(float(np.std(normalized)), SIGMA_FLOOR)
    return FilterModel(mu=mu, beta=beta, sigma=sigma)


def filter_score(model: FilterModel, fused: float, length: int) -> float:
    """Normalized filtering score; a blank transcript scores -inf."""
    if length < 0:
        raise FilteringError("length must be >= 0")
    if length == 0:
        return NEG_INF
    return (fused - model.mu * length - model.beta) / (model.sigma * math.sqrt(length))


def apply_filter(dataset: Dataset, model: FilterModel, cutoff: float) -> Dataset:
    """Keep utterances whose filter score is strictly above ``cutoff``.

    A cutoff of -inf disables filtering entirely, so blank transcripts (which
    score -inf) survive only that setting. Order is preserved.
    """
    kept = []
    for u in dataset:
        if u.transcript is None:
            raise MissingTranscriptError(u.id)
        if u.score is None:
            raise MissingScoreError(u.id)
        if cutoff == NEG_INF:
            kept.append(u)
        elif filter_score(model, u.score, len(u.transcript)) > cutoff:
            kept.append(u)
    return Dataset(kept)


@dataclass(frozen=True)
class FilterSchedule:
    """Per-generation cutoffs, applied from ``start_generation`` onward.

    Generations before the start are unfiltered (``cutoff_for`` returns
    None); generations past the end stick at the last cutoff.
    """

    cutoffs: tuple[float, ...]
    start_generation: int = 1

    def __post_init__(self):
        if len(self.cutoffs) < 1:
            raise FilteringError("schedule needs at least one cutoff")
        object.__setattr__(self, "cutoffs", tuple(float(c) for c in self.cutoffs))

    def cutoff_for(self, generation: int) -> float | None:
        if generation < self.start_generation:
            return None
        index = min(generation - self.start_generation, len(self.cutoffs) - 1)
        return self.cutoffs[index]


@dataclass(frozen=True)
class ScoredTranscript:
    """A generated transcript with its fused score, keyed by utterance id."""

    tokens: tuple[str, ...]
    fused: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(str(t) for t in self.tokens))
        fused = float(self.fused)
        if not math.isfinite(fused):
            raise FilteringError("fused score must be finite")
        object.__setattr__(self, "fused", fused)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    utterance_fraction: float
    token_fraction: float
    wer: float | None


def default_thresholds(low: float = -3.0, high: float = 3.0, step: float = 0.1) -> tuple[float, ...]:
    count = int(round((high - low) / step)) + 1
    return tuple(float(x) for x in np.linspace(low, high, count))


def score_curves(
    dev: Dataset,
    hyps: Mapping[str, ScoredTranscript],
    model: FilterModel,
    thresholds: Sequence[float] | None = None,
) -> list[CurvePoint]:
    """Survival curves of the filter score over a scored dev set.

    For each threshold: the fraction of utterances above it, the fraction of
    generated tokens above it, and the aggregate WER of the transcripts above
    it (None when nothing survives).
    """
    if thresholds is None:
        thresholds = default_thresholds()
    entries = []
    for u in dev:
        if u.transcript is None:
            raise MissingTranscriptError(u.id)
        try:
            hyp = hyps[u.id]
        except KeyError:
            raise FilteringError(f"no scored transcript for utterance {u.id!r}") from None
        score = filter_score(model, hyp.fused, len(hyp.tokens))
        entries.append((score, u.transcript, hyp.tokens))
    if not entries:
        raise FilteringError("dev set is empty")
    total_utts = len(entries)
    total_tokens = sum(len(tokens) for _, _, tokens in entries)
    points = []
    for threshold in thresholds:
        if threshold == NEG_INF:
            selected = entries
        else:
            selected = [e for e in entries if e[0] > threshold]
        utt_fraction = len(selected) / total_utts
        token_fraction = (
            sum(len(tokens) for _, _, tokens in selected) / total_tokens
            if total_tokens > 0
            else 0.0
        )
        if selected:
            result = corpus_wer((ref, tokens) for _, ref, tokens in selected)
            point_wer = result.wer
        else:
            point_wer = None
        points.append(CurvePoint(float(threshold), utt_fraction, token_fraction, point_wer))
    return points


def curves_to_tsv(points: Sequence[CurvePoint]) -> str:
    """Render curve points as TSV with a commented header row."""
    lines = ["threshold\tutt_frac\ttok_frac\twer"]
    for p in points:
        wer_cell = "" if p.wer is None else f"{p.wer:.6g}"
        lines.append(
            f"{p.threshold:.6g}\t{p.utterance_fraction:.6g}\t{p.token_fraction:.6g}\t{wer_cell}"
        )
    return "\n".join(lines) + "\n"
