"""Greedy token-distribution balancing of pseudo-labeled sentence pools.

Sentences are sampled with replacement (multiplicity capped) so that the
token unigram distribution of the sampled set approaches a target
distribution, by greedily minimizing the KL divergence between the two. Each
round scores every eligible sentence by its cost-benefit, the KL decrease
from adding it divided by its token count, commits the top-B sentences
against the counts frozen at the start of the round, and repeats.

The loop stops once the sampled token total has reached a floor and the last
batch no longer decreased the KL, or when no sentence is eligible; in the
latter case a shortfall against the floor is reported as infeasible rather
than raised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import TokenDistribution, Transcript, WeightedSample
from .errors import NstError


class BalancingError(NstError):
    pass


class VocabMismatchError(BalancingError):
    pass


class ZeroLengthSentenceError(BalancingError):
    pass


class EmptyPoolError(BalancingError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """Greedy sampler knobs.

    The batch size is derived from the pool: B = ceil(batch_fraction * pool
    size). ``min_token_total`` is the floor on sampled tokens, normally the
    supervised set's token count.
    """

    multiplicity_cap: int = 2
    batch_fraction: float = 0.1
    min_token_total: int = 0
    smoothing_epsilon: float = 1e-6

    def __post_init__(self):
        if self.multiplicity_cap < 1:
            raise BalancingError("multiplicity_cap must be >= 1")
        if not 0 < self.batch_fraction <= 1:
            raise BalancingError("batch_fraction must be in (0, 1]")
        if self.min_token_total < 0:
            raise BalancingError("min_token_total must be >= 0")
        if not self.smoothing_epsilon > 0:
            raise BalancingError("smoothing_epsilon must be > 0")

    def batch_size(self, pool_size: int) -> int:
        return int(math.ceil(self.batch_fraction * pool_size))


def _smooth(vec: np.ndarray, epsilon: float) -> np.ndarray:
    """Add epsilon to every entry and renormalize. Maps all-zero to uniform."""
    smoothed = vec + epsilon
    return smoothed / smoothed.sum()


def _counts_to_probs(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total > 0:
        return counts / total
    return np.zeros_like(counts)


def kl_divergence(
    p: TokenDistribution, q: TokenDistribution, epsilon: float = 1e-6
) -> float:
    """KL(p || q) after epsilon-smoothing both distributions.

    Smoothing keeps the divergence finite when p puts mass where q has none;
    identical inputs give exactly 0.
    """
    if p.vocab_size != q.vocab_size:
        raise VocabMismatchError(
            f"vocab sizes differ: {p.vocab_size} != {q.vocab_size}"
        )
    ps = _smooth(p.probs, epsilon)
    qs = _smooth(q.probs, epsilon)
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def sentence_counts(transcript: Transcript | Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.fromiter((int(t) for t in transcript), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise VocabMismatchError(
            f"token id outside vocab of size {vocab_size}"
        )
    return np.bincount(ids, minlength=vocab_size).astype(np.float64)


def _kl_from_counts(counts: np.ndarray, log_q: np.ndarray, epsilon: float) -> float:
    ps = _smooth(_counts_to_probs(counts), epsilon)
    return float(np.sum(ps * (np.log(ps) - log_q)))


def cost_benefit(
    current_counts: np.ndarray | Sequence[float],
    sentence: Transcript | Sequence[int],
    target: TokenDistribution,
    epsilon: float = 1e-6,
) -> float:
    """KL decrease from adding ``sentence`` to the sampled set, per token.

    With an empty current set the starting point is the smoothed all-zero
    count vector, i.e. the uniform distribution.
    """
    length = len(sentence)
    if length == 0:
        raise ZeroLengthSentenceError("cost-benefit is undefined for an empty sentence")
    counts = np.asarray(current_counts, dtype=np.float64)
    if counts.shape != (target.vocab_size,):
        raise VocabMismatchError(
            f"counts have shape {counts.shape}, expected ({target.vocab_size},)"
        )
    log_q = np.log(_smooth(target.probs, epsilon))
    before = _kl_from_counts(counts, log_q, epsilon)
    after = _kl_from_counts(counts + sentence_counts(sentence, target.vocab_size), log_q, epsilon)
    return (before - after) / length


@dataclass(frozen=True)
class BalanceResult:
    """Selected samples in pool order plus an infeasible-floor flag."""

    samples: tuple[WeightedSample, ...]
    infeasible: bool

    def total_tokens(self) -> int:
        return sum(len(s.transcript) * s.multiplicity for s in self.samples)


def submodular_sample(
    pool: Sequence[WeightedSample],
    target: TokenDistribution,
    config: SamplerConfig,
) -> BalanceResult:
    """Greedy batched sampling of ``pool`` toward ``target``.

    Deterministic: cost-benefit ties break by pool order, and there is no
    randomness anywhere. Zero-length sentences are never eligible. Every
    output multiplicity is at most ``config.multiplicity_cap``.
    """
    if len(pool) == 0:
        raise EmptyPoolError("candidate pool is empty")
    vocab_size = target.vocab_size
    epsilon = config.smoothing_epsilon
    n = len(pool)
    counts_matrix = np.stack(
        [sentence_counts(s.transcript, vocab_size) for s in pool]
    )
    lengths = counts_matrix.sum(axis=1)
    batch = config.batch_size(n)
    log_q = np.log(_smooth(target.probs, epsilon))

    selections = np.zeros(n, dtype=np.int64)
    counts = np.zeros(vocab_size, dtype=np.float64)
    total_tokens = 0
    kl_current = _kl_from_counts(counts, log_q, epsilon)

    while True:
        eligible = np.flatnonzero(
            (selections < config.multiplicity_cap) & (lengths >= 1)
        )
        if eligible.size == 0:
            infeasible = total_tokens < config.min_token_total
            break
        candidate_counts = counts[None, :] + counts_matrix[eligible]
        probs = candidate_counts / candidate_counts.sum(axis=1, keepdims=True)
        smoothed = probs + epsilon
        smoothed /= smoothed.sum(axis=1, keepdims=True)
        kls = np.sum(smoothed * (np.log(smoothed) - log_q[None, :]), axis=1)
        scores = (kl_current - kls) / lengths[eligible]
        # Stable sort on the negated score keeps pool order among ties.
        order = np.argsort(-scores, kind="stable")
        chosen = eligible[order[:batch]]
        selections[chosen] += 1
        counts += counts_matrix[chosen].sum(axis=0)
        total_tokens += int(lengths[chosen].sum())
        kl_next = _kl_from_counts(counts, log_q, epsilon)
        if total_tokens >= config.min_token_total and kl_next >= kl_current:
            infeasible = False
            kl_current = kl_next
            break
        kl_current = kl_next

    samples = tuple(
        WeightedSample(pool[i].utterance_id, pool[i].transcript, int(selections[i]))
        for i in range(n)
        if selections[i] > 0
    )
    return BalanceResult(samples=samples, infeasible=infeasible)
