"""Pluggable recognizer interface plus a synthetic noisy-channel recognizer.

The toy world emits each token as a block of identical one-hot feature rows
corrupted by i.i.d. Gaussian noise. The toy recognizer learns a per-token
centroid (mean of aligned frames) and a bigram language model with add-one
smoothing, and decodes with an exact top-k lattice search: per frame block,
a token's acoustic score is the negative mean squared distance to its
centroid, and the search keeps the k best paths per (position, last token)
state, which is exact for bigram-factored scores.

The design gives self-training real signal at desk scale: more training
text sharpens the bigram model and more frames sharpen the centroids, so a
student trained on decent pseudo-labels beats its teacher.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentPolicy, apply_policy
from .corpus import (
    Dataset,
    MissingTranscriptError,
    TokenVocab,
    Transcript,
    Utterance,
)
from .errors import NstError
from .scoring import ScoredHypothesis
from .seeding import derive_rng


class RecognizerError(NstError):
    pass


class EmptyDatasetError(RecognizerError):
    pass


class FrameAlignmentError(RecognizerError):
    pass


@dataclass(frozen=True)
class ToyWorld:
    """Synthetic channel parameters. Feature dimension equals the vocab size."""

    vocab_size: int
    noise: float = 0.0
    frames_per_token: int = 3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise RecognizerError("vocab_size must be >= 2")
        if self.noise < 0:
            raise RecognizerError("noise must be >= 0")
        if self.frames_per_token < 1:
            raise RecognizerError("frames_per_token must be >= 1")

    def vocab(self) -> TokenVocab:
        width = len(str(self.vocab_size - 1))
        return TokenVocab([f"t{i:0{width}d}" for i in range(self.vocab_size)])


class MarkovSentenceSource:
    """Sentence sampler with bigram structure and uniform random lengths."""

    def __init__(
        self,
        initial: np.ndarray,
        transition: np.ndarray,
        length_range: tuple[int, int] = (4, 10),
    ):
        initial = np.asarray(initial, dtype=np.float64)
        transition = np.asarray(transition, dtype=np.float64)
        v = initial.size
        if transition.shape != (v, v):
            raise RecognizerError("transition matrix shape must match initial probs")
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > 1e-9:
            raise RecognizerError("initial probs must be a distribution")
        if np.any(transition < 0) or np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-9):
            raise RecognizerError("transition rows must be distributions")
        if not 1 <= length_range[0] <= length_range[1]:
            raise RecognizerError("length range must satisfy 1 <= lo <= hi")
        self.initial = initial
        self.transition = transition
        self.length_range = (int(length_range[0]), int(length_range[1]))

    def __call__(self, rng: np.random.Generator) -> list[int]:
        lo, hi = self.length_range
        length = int(rng.integers(lo, hi + 1))
        v = self.initial.size
        tokens = [int(rng.choice(v, p=self.initial))]
        for _ in range(length - 1):
            tokens.append(int(rng.choice(v, p=self.transition[tokens[-1]])))
        return tokens

    @classmethod
    def structured(
        cls,
        vocab_size: int,
        seed: int,
        branching: int = 3,
        length_range: tuple[int, int] = (4, 10),
        skew: float = 0.85,
    ) -> "MarkovSentenceSource":
        """Random source with concentrated successors and a skewed start.

        Each token routes 90% of its mass to ``branching`` preferred
        successors, which gives a language model something to learn; the
        geometric initial distribution skews the token marginals so that
        balancing has work to do.
        """
        rng = np.random.default_rng(seed)
        initial = skew ** np.arange(vocab_size, dtype=np.float64)
        initial /= initial.sum()
        transition = np.full((vocab_size, vocab_size), 0.1 / vocab_size)
        weights = np.array([0.5, 0.3, 0.2][:branching], dtype=np.float64)
        weights = 0.9 * weights / weights.sum()
        for t in range(vocab_size):
            successors = rng.choice(vocab_size, size=branching, replace=False)
            transition[t, successors] += weights
        transition /= transition.sum(axis=1, keepdims=True)
        return cls(initial, transition, length_range)


def synth_generate(
    world: ToyWorld,
    n: int,
    sentence_source: Callable[[np.random.Generator], Sequence[int]],
    rng: np.random.Generator,
    id_prefix: str = "utt",
) -> Dataset:
    """Generate ``n`` labeled utterances through the noisy one-hot channel."""
    if n < 1:
        raise RecognizerError("n must be >= 1")
    vocab = world.vocab()
    eye = np.eye(world.vocab_size, dtype=np.float64)
    utterances = []
    for i in range(n):
        token_ids = list(sentence_source(rng))
        if not token_ids:
            raise RecognizerError("sentence source produced an empty sentence")
        clean = np.repeat(eye[token_ids], world.frames_per_token, axis=0)
        noisy = clean + world.noise * rng.standard_normal(clean.shape)
        utterances.append(
            Utterance(
                id=f"{id_prefix}-{i:05d}",
                features=noisy,
                transcript=vocab.decode(token_ids),
            )
        )
    return Dataset(utterances)


@dataclass
class ToyModel:
    """Per-token centroids plus a bigram LM (last row is the start context)."""

    tokens: tuple[str, ...]
    frames_per_token: int
    centroids: np.ndarray
    bigram_log: np.ndarray

    def __post_init__(self):
        v = len(self.tokens)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.bigram_log = np.asarray(self.bigram_log, dtype=np.float64)
        if self.centroids.shape != (v, v):
            raise RecognizerError(f"centroids must be ({v}, {v})")
        if self.bigram_log.shape != (v + 1, v):
            raise RecognizerError(f"bigram table must be ({v + 1}, {v})")

    @property
    def vocab(self) -> TokenVocab:
        return TokenVocab(self.tokens)

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "frames_per_token": self.frames_per_token,
            "centroids": self.centroids.tolist(),
            "bigram_log": self.bigram_log.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ToyModel":
        return cls(
            tokens=tuple(record["tokens"]),
            frames_per_token=int(record["frames_per_token"]),
            centroids=np.array(record["centroids"], dtype=np.float64),
            bigram_log=np.array(record["bigram_log"], dtype=np.float64),
        )


def save_model(model: ToyModel, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(model.to_dict(), sort_keys=True), encoding="utf-8", newline="\n"
    )


def load_model(path: str | Path) -> ToyModel:
    return ToyModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def toy_train(
    dataset: Dataset,
    vocab: TokenVocab,
    frames_per_token: int,
    policy: AugmentPolicy,
    seed: int,
) -> ToyModel:
    """Estimate centroids and the bigram LM from a labeled dataset.

    Training consumes augmented features (one derived RNG stream per
    utterance id, so parallel order cannot matter). Frames are split evenly
    across the transcript tokens; for synthesized supervised data this
    coincides with the true block alignment. Multiplicities enter as integer
    weights on both the frame sums and the bigram counts.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    v = vocab.size
    frame_sums = np.zeros((v, v), dtype=np.float64)
    frame_counts = np.zeros(v, dtype=np.float64)
    bigram_counts = np.zeros((v + 1, v), dtype=np.float64)
    start = v
    for u in dataset:
        if u.transcript is None:
            raise MissingTranscriptError(u.id)
        token_ids = [vocab.id_of(t) for t in u.transcript]
        weight = u.multiplicity
        features = apply_policy(
            u.features, policy, derive_rng(seed, "augment", u.id)
        ).astype(np.float64)
        k = len(token_ids)
        if k == 0:
            continue
        n_frames = features.shape[0]
        bounds = [(j * n_frames) // k for j in range(k + 1)]
        previous = start
        for j, token in enumerate(token_ids):
            block = features[bounds[j] : bounds[j + 1]]
            if block.shape[0]:
                frame_sums[token] += weight * block.sum(axis=0)
                frame_counts[token] += weight * block.shape[0]
            bigram_counts[previous, token] += weight
            previous = token
    centroids = np.zeros((v, v), dtype=np.float64)
    seen = frame_counts > 0
    centroids[seen] = frame_sums[seen] / frame_counts[seen, None]
    bigram_log = np.log(
        (bigram_counts + 1.0) / (bigram_counts.sum(axis=1, keepdims=True) + v)
    )
    return ToyModel(
        tokens=vocab.tokens,
        frames_per_token=frames_per_token,
        centroids=centroids,
        bigram_log=bigram_log,
    )


def _am_matrix(model: ToyModel, features: np.ndarray) -> np.ndarray:
    """(n_blocks, V) acoustic scores.

    A token's raw block score is the negative mean squared distance to its
    centroid; each block is then normalized by its logsumexp, making the
    score the block-level log-posterior under an isotropic Gaussian channel.
    The normalization is constant within a block, so it never changes any
    ranking of hypotheses for one utterance; it exists so that utterance
    scores are comparable across utterances, which is what cutoff filtering
    relies on (the raw distances are dominated by the per-utterance noise
    energy, which carries no information about correctness).
    """
    v = len(model.tokens)
    if features.shape[1] != v:
        raise FrameAlignmentError(
            f"feature width {features.shape[1]} does not match vocab size {v}"
        )
    fpt = model.frames_per_token
    n_frames = features.shape[0]
    if n_frames % fpt != 0 or n_frames == 0:
        raise FrameAlignmentError(
            f"{n_frames} frames is not a whole number of {fpt}-frame blocks"
        )
    blocks = features.astype(np.float64).reshape(-1, fpt, v)
    diffs = blocks[:, :, None, :] - model.centroids[None, None, :, :]
    raw = -np.mean(np.sum(diffs * diffs, axis=3), axis=1)
    peak = raw.max(axis=1, keepdims=True)
    log_norm = peak + np.log(np.exp(raw - peak).sum(axis=1, keepdims=True))
    return raw - log_norm


def _decode_utterance(
    model: ToyModel, features: np.ndarray, beam: int, lm_weight: float
) -> list[ScoredHypothesis]:
    """Exact top-``beam`` search over the block lattice.

    State is (position, last token) with ``beam`` best partial paths kept per
    state; since the path score is bigram-factored, the final top-k over all
    states is the exact top-k over all token sequences. Ties break toward
    lower token ids, then better incoming ranks.
    """
    am = _am_matrix(model, features)
    n_blocks, v = am.shape
    lm = model.bigram_log
    start = v

    keys = np.full((v, beam), -np.inf)
    am_tot = np.zeros((v, beam))
    lm_tot = np.zeros((v, beam))
    backptr: list[np.ndarray] = []

    lm_tot[:, 0] = lm[start, :]
    am_tot[:, 0] = am[0, :]
    keys[:, 0] = am_tot[:, 0] + lm_weight * lm_tot[:, 0]

    for i in range(1, n_blocks):
        # candidates[s * beam + r, t]: extend rank-r path in state s with t
        cand_keys = (
            keys.reshape(-1, 1)
            + lm_weight * np.repeat(lm[:v, :], beam, axis=0)
            + am[i][None, :]
        )
        order = np.argsort(-cand_keys, axis=0, kind="stable")[:beam]
        cand_am = np.repeat(am_tot.reshape(-1, 1), v, axis=1) + am[i][None, :]
        cand_lm = np.repeat(lm_tot.reshape(-1, 1), v, axis=1) + np.repeat(
            lm[:v, :], beam, axis=0
        )
        cols = np.arange(v)[None, :]
        keys = cand_keys[order, cols].T
        am_tot = cand_am[order, cols].T
        lm_tot = cand_lm[order, cols].T
        backptr.append(order.T)

    flat_keys = keys.ravel()
    final_order = np.argsort(-flat_keys, kind="stable")
    hyps = []
    for flat in final_order:
        if len(hyps) >= beam or not np.isfinite(flat_keys[flat]):
            break
        state, rank = divmod(int(flat), beam)
        tokens = [state]
        s, r = state, rank
        for i in range(n_blocks - 1, 0, -1):
            prev_flat = int(backptr[i - 1][s, r])
            s, r = divmod(prev_flat, beam)
            tokens.append(s)
        tokens.reverse()
        hyps.append(
            ScoredHypothesis(
                transcript=Transcript(tuple(tokens)),
                am_score=float(am_tot[state, rank]),
                lm_score=float(lm_tot[state, rank]),
                coverage=float(n_blocks),
            )
        )
    # Re-sort on the exact expression re-ranking uses, so equal fusion
    # parameters can never reorder the list (the DP key accumulates the same
    # quantity in a different float order).
    hyps.sort(key=lambda h: -(h.am_score + lm_weight * h.lm_score))
    return hyps


def toy_transcribe(
    model: ToyModel,
    utterances: Sequence[Utterance],
    beam: int,
    lm_weight: float = 0.0,
) -> list[list[ScoredHypothesis]]:
    """Per-utterance top-``beam`` hypothesis lists, sorted by am + lm_weight * lm."""
    if beam < 1:
        raise RecognizerError("beam must be >= 1")
    return [_decode_utterance(model, u.features, beam, lm_weight) for u in utterances]


class ToyRecognizer:
    """Stateful wrapper tying the toy model to the recognizer interface."""

    def __init__(
        self,
        vocab: TokenVocab,
        frames_per_token: int,
        decode_lm_weight: float = 0.0,
        model: ToyModel | None = None,
    ):
        self.vocab = vocab
        self.frames_per_token = frames_per_token
        self.decode_lm_weight = decode_lm_weight
        self.model = model

    def train(self, dataset: Dataset, policy: AugmentPolicy, seed: int) -> None:
        self.model = toy_train(dataset, self.vocab, self.frames_per_token, policy, seed)

    def transcribe(
        self, utterances: Sequence[Utterance], beam: int
    ) -> list[list[ScoredHypothesis]]:
        if self.model is None:
            raise RecognizerError("recognizer has no trained model")
        return toy_transcribe(self.model, utterances, beam, self.decode_lm_weight)
