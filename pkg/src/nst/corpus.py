"""Dataset model, tokenization, token statistics, and manifest persistence.

Utterances carry a feature matrix (frames x channels, float32) plus optional
transcript, score, and sampling multiplicity. Manifests are JSON Lines with
one object per utterance; feature matrices live in binary sidecar files so
manifests stay diffable.
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import NstError

FEATURE_MAGIC = b"NSTF"

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


class CorpusError(NstError):
    pass


class UnknownTokenError(CorpusError):
    def __init__(self, token: str):
        super().__init__(f"token not in vocabulary: {token!r}")
        self.token = token


class ManifestError(CorpusError):
    """Manifest parse or schema failure, carrying the offending line number."""

    def __init__(self, path: object, line_number: int, reason: str):
        super().__init__(f"{path}: line {line_number}: {reason}")
        self.line_number = line_number


class MissingFeatureFileError(CorpusError):
    def __init__(self, path: object):
        super().__init__(f"feature file not found: {path}")
        self.path = str(path)


class FeatureFileError(CorpusError):
    pass


class EmptyInputError(CorpusError):
    pass


class MissingTranscriptError(CorpusError):
    def __init__(self, utterance_id: str):
        super().__init__(f"utterance {utterance_id!r} has no transcript")
        self.utterance_id = utterance_id


@dataclass(frozen=True)
class Transcript:
    """Ordered sequence of token ids. The empty transcript is legal."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if any(t < 0 for t in toks):
            raise CorpusError("token ids must be nonnegative")
        object.__setattr__(self, "tokens", toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tokens)

    @property
    def length(self) -> int:
        return len(self.tokens)


class TokenVocab:
    """Total bijection between token strings and ids 0..size-1."""

    def __init__(self, tokens: Sequence[str]):
        toks = tuple(tokens)
        if not toks:
            raise CorpusError("vocabulary must contain at least one token")
        if len(set(toks)) != len(toks):
            raise CorpusError("duplicate tokens in vocabulary")
        for tok in toks:
            if not tok or any(ch.isspace() for ch in tok):
                raise CorpusError(
                    f"tokens must be nonempty and whitespace-free: {tok!r}"
                )
        self._tokens = toks
        self._ids = {tok: i for i, tok in enumerate(toks)}

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TokenVocab) and other._tokens == self._tokens

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise CorpusError(f"token id out of range: {token_id}")
        return self._tokens[token_id]

    def encode_tokens(self, tokens: Sequence[str]) -> Transcript:
        return Transcript(tuple(self.id_of(t) for t in tokens))

    def decode(self, transcript: Transcript | Sequence[int]) -> tuple[str, ...]:
        return tuple(self.token_of(t) for t in transcript)


def tokenize(text: str, vocab: TokenVocab) -> Transcript:
    """Whitespace-split ``text`` and map every token through ``vocab``.

    Raises UnknownTokenError naming the first out-of-vocabulary token.
    """
    return vocab.encode_tokens(text.split())


def detokenize(transcript: Transcript | Sequence[int], vocab: TokenVocab) -> str:
    return " ".join(vocab.decode(transcript))


@dataclass(frozen=True)
class TokenDistribution:
    """Normalized token counts over ids 0..vocab_size-1."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise CorpusError("distribution must be a nonempty vector")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise CorpusError("probabilities must be finite and nonnegative")
        if abs(float(arr.sum()) - 1.0) > 1e-9:
            raise CorpusError(f"probabilities must sum to 1, got {arr.sum()!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)

    def prob(self, token_id: int) -> float:
        return float(self.probs[token_id])

    def as_dict(self) -> dict[int, float]:
        return {i: float(p) for i, p in enumerate(self.probs) if p > 0.0}

    @classmethod
    def from_counts(cls, counts: Sequence[float] | np.ndarray) -> "TokenDistribution":
        arr = np.asarray(counts, dtype=np.float64)
        total = float(arr.sum())
        if total <= 0:
            raise EmptyInputError("total token count is 0")
        return cls(arr / total)


def token_distribution(
    transcripts: Sequence[Transcript | Sequence[int]],
    vocab_size: int,
    weights: Sequence[int] | None = None,
) -> TokenDistribution:
    """Weighted token unigram distribution of ``transcripts``.

    ``weights`` are sampling multiplicities, defaulting to 1 per transcript.
    Raises EmptyInputError when the weighted token total is 0.
    """
    if weights is not None and len(weights) != len(transcripts):
        raise CorpusError("weights must match transcripts in length")
    counts = np.zeros(vocab_size, dtype=np.float64)
    for k, transcript in enumerate(transcripts):
        w = 1 if weights is None else int(weights[k])
        if w < 1:
            raise CorpusError("multiplicities must be >= 1")
        for t in transcript:
            if not 0 <= t < vocab_size:
                raise CorpusError(f"token id {t} outside vocab of size {vocab_size}")
            counts[t] += w
    if counts.sum() == 0:
        raise EmptyInputError("total token count is 0")
    return TokenDistribution.from_counts(counts)


@dataclass(frozen=True)
class WeightedSample:
    """A sentence selected for training with an integer sampling multiplicity."""

    utterance_id: str
    transcript: Transcript
    multiplicity: int = 1

    def __post_init__(self):
        if self.multiplicity < 1:
            raise CorpusError("multiplicity must be >= 1")


@dataclass(frozen=True, eq=False)
class Utterance:
    """One element of a dataset: features plus optional transcript metadata.

    ``transcript`` is a tuple of token strings (the reference for labeled
    data, the pseudo-label for generated data). ``score`` is the fused decode
    score attached by transcription. Instances are immutable; the feature
    matrix is frozen on construction.
    """

    id: str
    features: np.ndarray
    transcript: tuple[str, ...] | None = None
    score: float | None = None
    multiplicity: int = 1

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise CorpusError("utterance id must be a nonempty string")
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise CorpusError(
                f"features must be a 2-d matrix with >= 1 row, got shape {feats.shape}"
            )
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.transcript is not None:
            object.__setattr__(self, "transcript", tuple(str(t) for t in self.transcript))
        if self.score is not None:
            score = float(self.score)
            if not math.isfinite(score):
                raise CorpusError(f"score must be finite, got {score!r}")
            object.__setattr__(self, "score", score)
        if int(self.multiplicity) < 1:
            raise CorpusError("multiplicity must be >= 1")
        object.__setattr__(self, "multiplicity", int(self.multiplicity))

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.features.shape[1])


class Dataset:
    """Ordered, immutable collection of utterances.

    Invariants: ids are unique and every utterance shares one channel count.
    """

    def __init__(self, utterances: Iterable[Utterance]):
        utts = tuple(utterances)
        seen: set[str] = set()
        width: int | None = None
        for u in utts:
            if u.id in seen:
                raise CorpusError(f"duplicate utterance id: {u.id!r}")
            seen.add(u.id)
            if width is None:
                width = u.n_channels
            elif u.n_channels != width:
                raise CorpusError(
                    f"inconsistent channel count: {u.n_channels} != {width} (utterance {u.id!r})"
                )
        self._utterances = utts
        self._by_id = {u.id: u for u in utts}

    def __len__(self) -> int:
        return len(self._utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self._utterances)

    def __getitem__(self, index: int) -> Utterance:
        return self._utterances[index]

    @property
    def utterances(self) -> tuple[Utterance, ...]:
        return self._utterances

    def ids(self) -> tuple[str, ...]:
        return tuple(u.id for u in self._utterances)

    def by_id(self, utterance_id: str) -> Utterance:
        try:
            return self._by_id[utterance_id]
        except KeyError:
            raise CorpusError(f"no utterance with id {utterance_id!r}") from None

    def total_tokens(self) -> int:
        """Sum of transcript lengths; every utterance must be labeled."""
        total = 0
        for u in self._utterances:
            if u.transcript is None:
                raise MissingTranscriptError(u.id)
            total += len(u.transcript)
        return total

    def strip_labels(self) -> "Dataset":
        """Copy with transcripts and scores removed (an unlabeled view)."""
        return Dataset(
            replace(u, transcript=None, score=None) for u in self._utterances
        )


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise CorpusError("features must be 2-d")
    rows, cols = arr.shape
    payload = FEATURE_MAGIC + struct.pack("<II", rows, cols) + arr.tobytes()
    Path(path).write_bytes(payload)


def read_features(path: str | Path) -> np.ndarray:
    p = Path(path)
    try:
        data = p.read_bytes()
    except FileNotFoundError:
        raise MissingFeatureFileError(p) from None
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{p}: not a feature file (bad magic)")
    rows, cols = struct.unpack("<II", data[4:12])
    expected = 12 + rows * cols * 4
    if len(data) != expected:
        raise FeatureFileError(
            f"{p}: truncated feature file ({len(data)} bytes, expected {expected})"
        )
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols)


def save_manifest(
    dataset: Dataset,
    path: str | Path,
    features_dirname: str | None = None,
) -> None:
    """Write ``dataset`` as a JSONL manifest plus binary feature sidecars.

    Feature files land in ``features_dirname`` next to the manifest (default
    ``<stem>_features``) and are referenced by relative path.
    """
    manifest_path = Path(path)
    if features_dirname is None:
        features_dirname = manifest_path.stem + "_features"
    feature_dir = manifest_path.parent / features_dirname
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in dataset:
        if not _SAFE_ID.match(u.id):
            raise CorpusError(f"utterance id not filesystem-safe: {u.id!r}")
        rel = f"{features_dirname}/{u.id}.nstf"
        write_features(manifest_path.parent / features_dirname / f"{u.id}.nstf", u.features)
        record: dict[str, object] = {"id": u.id, "features": rel}
        if u.transcript is not None:
            record["transcript"] = list(u.transcript)
        if u.score is not None:
            record["score"] = u.score
        if u.multiplicity != 1:
            record["multiplicity"] = u.multiplicity
        lines.append(json.dumps(record, ensure_ascii=False))
    manifest_path.write_text(
        "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8", newline="\n"
    )


def _parse_manifest_record(path: Path, line_number: int, line: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(path, line_number, f"invalid JSON ({exc.msg})") from None
    if not isinstance(record, dict):
        raise ManifestError(path, line_number, "expected a JSON object")
    if not isinstance(record.get("id"), str) or not record["id"]:
        raise ManifestError(path, line_number, "missing or invalid 'id'")
    if not isinstance(record.get("features"), str):
        raise ManifestError(path, line_number, "missing or invalid 'features'")
    transcript = record.get("transcript")
    if transcript is not None and (
        not isinstance(transcript, list)
        or any(not isinstance(t, str) for t in transcript)
    ):
        raise ManifestError(path, line_number, "'transcript' must be a list of strings")
    score = record.get("score")
    if score is not None and not isinstance(score, (int, float)):
        raise ManifestError(path, line_number, "'score' must be a number")
    multiplicity = record.get("multiplicity", 1)
    if not isinstance(multiplicity, int) or multiplicity < 1:
        raise ManifestError(path, line_number, "'multiplicity' must be an integer >= 1")
    return record


def load_manifest(path: str | Path) -> Dataset:
    """Load a JSONL manifest, reading feature sidecars relative to it.

    Utterance order follows manifest order. Parse failures raise
    ManifestError with the 1-based line number; a dangling feature reference
    raises MissingFeatureFileError naming the resolved path.
    """
    manifest_path = Path(path)
    utterances: list[Utterance] = []
    with open(manifest_path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            record = _parse_manifest_record(manifest_path, line_number, line)
            features = read_features(manifest_path.parent / Path(record["features"]))
            transcript = record.get("transcript")
            utterances.append(
                Utterance(
                    id=record["id"],
                    features=features,
                    transcript=tuple(transcript) if transcript is not None else None,
                    score=record.get("score"),
                    multiplicity=record.get("multiplicity", 1),
                )
            )
    return Dataset(utterances)


def save_vocab(vocab: TokenVocab, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8", newline="\n")


def load_vocab(path: str | Path) -> TokenVocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return TokenVocab([line for line in lines if line])
