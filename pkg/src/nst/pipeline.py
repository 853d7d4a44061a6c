"""Generation loop orchestration, persisted state, and analysis reports.

Each generation: the previous model (the teacher) transcribes the unlabeled
set with fused scores, the pseudo-labels are filtered and balanced per the
generation's config, mixed with the supervised set, and a new model is
trained on the mix with that generation's augmentation policy. The new
model is then tuned on the dev set (fusion grid search), a fresh filter
model is fit on its dev transcripts for the next generation to use, and the
dev WER and semi-supervised set size are recorded.

Generation 0 is the degenerate first cycle: no teacher, training on the
supervised set alone.

State is a single JSON document written atomically, so an interrupted run
leaves either the previous or the next state file, never a torn one. All
randomness derives from (master seed, generation, stage name).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .augment import AugmentPolicy
from .balancing import SamplerConfig, submodular_sample
from .corpus import (
    Dataset,
    TokenVocab,
    Utterance,
    WeightedSample,
    load_manifest,
    load_vocab,
    save_manifest,
    token_distribution,
)
from .errors import NstError
from .filtering import (
    FilterModel,
    ScoredTranscript,
    apply_filter,
    curves_to_tsv,
    default_thresholds,
    fit_filter,
    score_curves,
)
from .mixing import BATCHWISE, MixPlan, mix_batchwise, mix_uniform
from .recognizer import ToyRecognizer, load_model, save_model
from .scoring import (
    FusionParams,
    HypothesisRecord,
    best_hypothesis,
    corpus_wer,
    grid_search_table,
    write_hypotheses,
)
from .seeding import derive_rng, derive_seed

STATE_FILENAME = "state.json"


class PipelineError(NstError):
    pass


class StageError(PipelineError):
    """A generation stage failed; the state file is left untouched."""

    def __init__(self, generation: int, stage: str, cause: Exception):
        super().__init__(f"generation {generation}, stage {stage!r}: {cause}")
        self.generation = generation
        self.stage = stage
        self.cause = cause


def parse_cutoff(value: object) -> float | None:
    """Cutoff from config JSON: a number, '-inf'/'inf', or null (disabled)."""
    if value is None:
        return None
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("-inf", "-infinity"):
            return float("-inf")
        if text in ("inf", "infinity"):
            return float("inf")
        return float(text)
    return float(value)


def format_cutoff(value: float | None) -> object:
    if value is None:
        return None
    if math.isinf(value):
        return "-inf" if value < 0 else "inf"
    return value


@dataclass(frozen=True)
class BalanceSettings:
    """Balancer knobs; ``min_tokens`` of None means the supervised token total."""

    multiplicity_cap: int = 2
    batch_fraction: float = 0.1
    min_tokens: int | None = None
    smoothing_epsilon: float = 1e-6

    def resolve(self, supervised_tokens: int) -> SamplerConfig:
        floor = self.min_tokens if self.min_tokens is not None else supervised_tokens
        return SamplerConfig(
            multiplicity_cap=self.multiplicity_cap,
            batch_fraction=self.batch_fraction,
            min_token_total=floor,
            smoothing_epsilon=self.smoothing_epsilon,
        )

    @classmethod
    def from_dict(cls, record: Mapping) -> "BalanceSettings":
        return cls(
            multiplicity_cap=int(record.get("multiplicity_cap", 2)),
            batch_fraction=float(record.get("batch_fraction", 0.1)),
            min_tokens=(
                None
                if record.get("min_tokens") in (None, "auto")
                else int(record["min_tokens"])
            ),
            smoothing_epsilon=float(record.get("smoothing_epsilon", 1e-6)),
        )

    def to_dict(self) -> dict:
        return {
            "multiplicity_cap": self.multiplicity_cap,
            "batch_fraction": self.batch_fraction,
            "min_tokens": "auto" if self.min_tokens is None else self.min_tokens,
            "smoothing_epsilon": self.smoothing_epsilon,
        }


@dataclass(frozen=True)
class GenerationConfig:
    """One generation's knobs: augmentation, fusion grid, filter, balance, mix."""

    generation: int
    augment_policy: AugmentPolicy
    fusion_grid: tuple[FusionParams, ...]
    filter_cutoff: float | None = None
    balance: BalanceSettings | None = None
    mix: MixPlan = field(default_factory=MixPlan)

    def __post_init__(self):
        if self.generation < 0:
            raise PipelineError("generation index must be >= 0")
        if not self.fusion_grid:
            raise PipelineError("fusion grid must be nonempty")

    @property
    def filtering(self) -> bool:
        return self.filter_cutoff is not None

    @property
    def balancing(self) -> bool:
        return self.balance is not None

    @classmethod
    def from_dict(cls, record: Mapping) -> "GenerationConfig":
        balance = record.get("balance")
        if balance is True:
            balance_settings: BalanceSettings | None = BalanceSettings()
        elif balance:
            balance_settings = BalanceSettings.from_dict(balance)
        else:
            balance_settings = None
        return cls(
            generation=int(record["generation"]),
            augment_policy=AugmentPolicy.from_dict(record.get("augment", {})),
            fusion_grid=tuple(
                FusionParams.from_dict(g) for g in record.get("fusion_grid", [{}])
            ),
            filter_cutoff=parse_cutoff(record.get("filter_cutoff")),
            balance=balance_settings,
            mix=MixPlan.from_dict(record.get("mix", {})),
        )

    def to_dict(self) -> dict:
        record: dict[str, object] = {
            "generation": self.generation,
            "augment": self.augment_policy.to_dict(),
            "fusion_grid": [g.to_dict() for g in self.fusion_grid],
            "filter_cutoff": format_cutoff(self.filter_cutoff),
            "mix": self.mix.to_dict(),
        }
        record["balance"] = self.balance.to_dict() if self.balance else None
        return record


@dataclass(frozen=True)
class PipelineConfig:
    """Run-level settings plus the ordered generation configs."""

    supervised: str
    unlabeled: str
    dev: str
    vocab: str
    frames_per_token: int
    beam: int = 4
    decode_lm_weight: float = 0.0
    generations: tuple[GenerationConfig, ...] = ()

    def __post_init__(self):
        for index, gen in enumerate(self.generations):
            if gen.generation != index:
                raise PipelineError(
                    f"generation configs must be numbered 0..n-1 in order; "
                    f"position {index} is numbered {gen.generation}"
                )

    @classmethod
    def from_dict(cls, record: Mapping, base_dir: Path | None = None) -> "PipelineConfig":
        def resolve(path: str) -> str:
            p = Path(path)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return str(p)

        datasets = record.get("datasets", record)
        return cls(
            supervised=resolve(datasets["supervised"]),
            unlabeled=resolve(datasets["unlabeled"]),
            dev=resolve(datasets["dev"]),
            vocab=resolve(datasets["vocab"]),
            frames_per_token=int(record["frames_per_token"]),
            beam=int(record.get("beam", 4)),
            decode_lm_weight=float(record.get("decode_lm_weight", 0.0)),
            generations=tuple(
                GenerationConfig.from_dict(g) for g in record.get("generations", [])
            ),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        p = Path(path)
        record = json.loads(p.read_text(encoding="utf-8"))
        return cls.from_dict(record, base_dir=p.parent)


@dataclass(frozen=True)
class GenerationMetrics:
    generation: int
    dev_wer: float
    semi_utterances: int
    semi_examples: int

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "dev_wer": self.dev_wer,
            "semi_utterances": self.semi_utterances,
            "semi_examples": self.semi_examples,
        }

    @classmethod
    def from_dict(cls, record: Mapping) -> "GenerationMetrics":
        return cls(
            generation=int(record["generation"]),
            dev_wer=float(record["dev_wer"]),
            semi_utterances=int(record["semi_utterances"]),
            semi_examples=int(record["semi_examples"]),
        )


@dataclass
class PipelineState:
    """Persisted loop state; ``generation`` counts completed generations."""

    workdir: Path
    seed: int
    frames_per_token: int
    beam: int
    decode_lm_weight: float
    supervised: str
    unlabeled: str
    dev: str
    vocab: str
    generation: int = 0
    model_file: str | None = None
    fusion: FusionParams | None = None
    filter_model: FilterModel | None = None
    metrics: list[GenerationMetrics] = field(default_factory=list)

    def to_json(self) -> str:
        record = {
            "seed": self.seed,
            "frames_per_token": self.frames_per_token,
            "beam": self.beam,
            "decode_lm_weight": self.decode_lm_weight,
            "supervised": self.supervised,
            "unlabeled": self.unlabeled,
            "dev": self.dev,
            "vocab": self.vocab,
            "generation": self.generation,
            "model_file": self.model_file,
            "fusion": self.fusion.to_dict() if self.fusion else None,
            "filter_model": self.filter_model.to_dict() if self.filter_model else None,
            "metrics": [m.to_dict() for m in self.metrics],
        }
        return json.dumps(record, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, workdir: Path, text: str) -> "PipelineState":
        record = json.loads(text)
        return cls(
            workdir=workdir,
            seed=int(record["seed"]),
            frames_per_token=int(record["frames_per_token"]),
            beam=int(record["beam"]),
            decode_lm_weight=float(record["decode_lm_weight"]),
            supervised=record["supervised"],
            unlabeled=record["unlabeled"],
            dev=record["dev"],
            vocab=record["vocab"],
            generation=int(record["generation"]),
            model_file=record.get("model_file"),
            fusion=(
                FusionParams.from_dict(record["fusion"]) if record.get("fusion") else None
            ),
            filter_model=(
                FilterModel.from_dict(record["filter_model"])
                if record.get("filter_model")
                else None
            ),
            metrics=[GenerationMetrics.from_dict(m) for m in record.get("metrics", [])],
        )


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def save_state(state: PipelineState) -> Path:
    state.workdir.mkdir(parents=True, exist_ok=True)
    path = state.workdir / STATE_FILENAME
    _atomic_write_text(path, state.to_json())
    return path


def load_state(workdir: str | Path) -> PipelineState:
    workdir = Path(workdir)
    path = workdir / STATE_FILENAME
    if not path.exists():
        raise PipelineError(f"no pipeline state at {path}")
    return PipelineState.from_json(workdir, path.read_text(encoding="utf-8"))


def init_state(workdir: str | Path, config: PipelineConfig, seed: int) -> PipelineState:
    workdir = Path(workdir)
    state = PipelineState(
        workdir=workdir,
        seed=int(seed),
        frames_per_token=config.frames_per_token,
        beam=config.beam,
        decode_lm_weight=config.decode_lm_weight,
        supervised=str(Path(config.supervised).resolve()),
        unlabeled=str(Path(config.unlabeled).resolve()),
        dev=str(Path(config.dev).resolve()),
        vocab=str(Path(config.vocab).resolve()),
    )
    save_state(state)
    return state


class _Stage:
    """Context manager wrapping a stage so failures carry generation and stage."""

    def __init__(self, generation: int, stage: str):
        self.generation = generation
        self.stage = stage

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.generation, self.stage, exc) from exc
        return False


def _pseudo_label(
    unlabeled: Dataset,
    recognizer: ToyRecognizer,
    fusion: FusionParams,
    beam: int,
) -> Dataset:
    """Transcribe the unlabeled set and attach fused top hypotheses."""
    hyp_lists = recognizer.transcribe(list(unlabeled), beam)
    vocab = recognizer.vocab
    labeled = []
    for u, hyps in zip(unlabeled, hyp_lists):
        best = best_hypothesis(hyps, fusion)
        labeled.append(
            Utterance(
                id=u.id,
                features=u.features,
                transcript=vocab.decode(best.transcript),
                score=best.fused,
            )
        )
    return Dataset(labeled)


def _balance(
    filtered: Dataset,
    supervised: Dataset,
    vocab: TokenVocab,
    settings: BalanceSettings,
) -> tuple[Dataset, bool]:
    pool = [
        WeightedSample(u.id, vocab.encode_tokens(u.transcript), 1) for u in filtered
    ]
    target = token_distribution(
        [vocab.encode_tokens(u.transcript) for u in supervised], vocab.size
    )
    sampler = settings.resolve(supervised.total_tokens())
    result = submodular_sample(pool, target, sampler)
    semi = Dataset(
        replace(filtered.by_id(s.utterance_id), multiplicity=s.multiplicity)
        for s in result.samples
    )
    return semi, result.infeasible


def select_checkpoint(candidates, evaluate) -> object:
    """Pick the candidate with the lowest dev score; earliest wins ties.

    The toy trainer emits a single checkpoint per generation, so the choice
    is trivial here, but this hook is where a multi-checkpoint trainer would
    plug in its dev-WER-based selection.
    """
    candidates = list(candidates)
    if not candidates:
        raise PipelineError("no checkpoints to select from")
    scores = [float(evaluate(c)) for c in candidates]
    best = min(range(len(candidates)), key=lambda i: (scores[i], i))
    return candidates[best]


def _draw_training_set(
    supervised: Dataset,
    semi: Dataset,
    plan: MixPlan,
    generation: int,
    seed: int,
) -> Dataset:
    """One epoch's worth of the mixed stream, collapsed to multiplicities.

    A drawn example appearing k times trains with weight k, which is exactly
    what physical duplication would do for this trainer.
    """
    semi_examples = sum(u.multiplicity for u in semi)
    target = len(supervised) + semi_examples
    rng = derive_rng(seed, generation, "mix")
    plan_g = plan.for_generation(generation)
    counts: dict[tuple[str, str], int] = {}
    sources: dict[tuple[str, str], Utterance] = {}

    def record(utt: Utterance, origin: str) -> None:
        key = (origin, utt.id)
        counts[key] = counts.get(key, 0) + 1
        sources[key] = utt

    if plan_g.mode == BATCHWISE:
        stream = mix_batchwise(supervised, semi, plan_g, rng)
        n_batches = math.ceil(target / plan_g.batch_size)
        for _ in range(n_batches):
            for utt, origin in next(stream):
                record(utt, origin)
    else:
        stream = mix_uniform(supervised, semi, rng)
        for _ in range(target):
            utt, origin = next(stream)
            record(utt, origin)

    drawn = [
        replace(sources[key], id=f"{key[0]}.{key[1]}", multiplicity=count)
        for key, count in counts.items()
    ]
    return Dataset(drawn)


def run_generation(state: PipelineState, config: GenerationConfig) -> PipelineState:
    """Execute one generation cycle and persist the advanced state.

    Any stage failure raises StageError without touching the state file.
    """
    g = state.generation
    if config.generation != g:
        raise PipelineError(
            f"state expects generation {g}, config is for {config.generation}"
        )
    workdir = state.workdir
    workdir.mkdir(parents=True, exist_ok=True)

    with _Stage(g, "load"):
        vocab = load_vocab(state.vocab)
        supervised = load_manifest(state.supervised)
        dev = load_manifest(state.dev)

    semi = Dataset([])
    balance_infeasible = False
    if g == 0 or state.model_file is None:
        training_set = supervised
    else:
        with _Stage(g, "load_teacher"):
            teacher = load_model(workdir / state.model_file)
            teacher_rec = ToyRecognizer(
                vocab, state.frames_per_token, state.decode_lm_weight, model=teacher
            )
            if state.fusion is None or state.filter_model is None:
                raise PipelineError("state lacks tuned fusion or filter model")
            unlabeled = load_manifest(state.unlabeled)
        with _Stage(g, "transcribe_unlabeled"):
            pseudo = _pseudo_label(unlabeled, teacher_rec, state.fusion, state.beam)
            save_manifest(pseudo, workdir / f"pseudo_gen{g}.jsonl")
        with _Stage(g, "filter"):
            if config.filtering:
                filtered = apply_filter(pseudo, state.filter_model, config.filter_cutoff)
                save_manifest(filtered, workdir / f"filtered_gen{g}.jsonl")
            else:
                filtered = pseudo
        with _Stage(g, "balance"):
            if config.balancing and len(filtered) > 0:
                semi, balance_infeasible = _balance(
                    filtered, supervised, vocab, config.balance
                )
                save_manifest(semi, workdir / f"balanced_gen{g}.jsonl")
            else:
                semi = filtered
        with _Stage(g, "mix"):
            if len(semi) > 0:
                training_set = _draw_training_set(
                    supervised, semi, config.mix, g, state.seed
                )
            else:
                training_set = supervised

    with _Stage(g, "train"):
        recognizer = ToyRecognizer(
            vocab, state.frames_per_token, state.decode_lm_weight
        )
        recognizer.train(
            training_set, config.augment_policy, derive_seed(state.seed, g, "train")
        )

    with _Stage(g, "select_checkpoint"):

        def unfused_dev_wer(candidate) -> float:
            rec = ToyRecognizer(
                vocab, state.frames_per_token, state.decode_lm_weight, model=candidate
            )
            lists = rec.transcribe(list(dev), state.beam)
            pairs = []
            for u, hyps in zip(dev, lists):
                chosen = best_hypothesis(hyps, FusionParams())
                pairs.append((u.transcript, vocab.decode(chosen.transcript)))
            return corpus_wer(pairs).wer

        recognizer.model = select_checkpoint([recognizer.model], unfused_dev_wer)
        model_file = f"model_gen{g}.json"
        save_model(recognizer.model, workdir / model_file)

    with _Stage(g, "tune_fusion"):
        dev_hyp_lists = recognizer.transcribe(list(dev), state.beam)
        table = grid_search_table(
            config.fusion_grid, dev, recognizer, state.beam, hyp_lists=dev_hyp_lists
        )
        best_index = min(range(len(table)), key=lambda i: (table[i].dev_wer, i))
        fusion = table[best_index].params
        dev_wer = table[best_index].dev_wer
        _atomic_write_text(
            workdir / f"fusion_gen{g}.json",
            json.dumps(
                {"params": fusion.to_dict(), "dev_wer": dev_wer}, sort_keys=True, indent=2
            )
            + "\n",
        )

    with _Stage(g, "fit_filter"):
        best_hyps = [best_hypothesis(hyps, fusion) for hyps in dev_hyp_lists]
        pairs = [
            (len(b.transcript), b.fused) for b in best_hyps if len(b.transcript) >= 1
        ]
        filter_model = fit_filter(pairs)
        _atomic_write_text(
            workdir / f"filter_gen{g}.json",
            json.dumps(filter_model.to_dict(), sort_keys=True, indent=2) + "\n",
        )
        records = []
        for u, hyps in zip(dev, dev_hyp_lists):
            for h in hyps:
                records.append(
                    HypothesisRecord(
                        utterance_id=u.id,
                        tokens=vocab.decode(h.transcript),
                        am=h.am_score,
                        lm=h.lm_score,
                        coverage=h.coverage,
                        fused=None,
                    )
                )
        write_hypotheses(records, workdir / f"dev_hyps_gen{g}.jsonl")

    with _Stage(g, "score_curves"):
        scored = {
            u.id: ScoredTranscript(vocab.decode(b.transcript), b.fused)
            for u, b in zip(dev, best_hyps)
        }
        curves = score_curves(dev, scored, filter_model, default_thresholds())
        _atomic_write_text(workdir / f"curves_gen{g}.tsv", curves_to_tsv(curves))

    semi_examples = sum(u.multiplicity for u in semi)
    info = {
        "generation": g,
        "semi_utterances": len(semi),
        "semi_examples": semi_examples,
        "balance_infeasible": balance_infeasible,
        "training_utterances": len(training_set),
        "training_examples": sum(u.multiplicity for u in training_set),
    }
    _atomic_write_text(
        workdir / f"info_gen{g}.json", json.dumps(info, sort_keys=True, indent=2) + "\n"
    )

    new_state = PipelineState(
        workdir=workdir,
        seed=state.seed,
        frames_per_token=state.frames_per_token,
        beam=state.beam,
        decode_lm_weight=state.decode_lm_weight,
        supervised=state.supervised,
        unlabeled=state.unlabeled,
        dev=state.dev,
        vocab=state.vocab,
        generation=g + 1,
        model_file=model_file,
        fusion=fusion,
        filter_model=filter_model,
        metrics=state.metrics
        + [GenerationMetrics(g, dev_wer, len(semi), semi_examples)],
    )
    save_state(new_state)
    return new_state


def metrics_tsv(metrics: Sequence[GenerationMetrics]) -> str:
    lines = ["generation\tdev_wer\tsemi_utterances\tsemi_examples"]
    for m in metrics:
        lines.append(
            f"{m.generation}\t{m.dev_wer:.6g}\t{m.semi_utterances}\t{m.semi_examples}"
        )
    return "\n".join(lines) + "\n"


def run_pipeline(
    workdir: str | Path, config: PipelineConfig, seed: int
) -> PipelineState:
    """Run (or resume) every configured generation and write the metrics table."""
    workdir = Path(workdir)
    if (workdir / STATE_FILENAME).exists():
        state = load_state(workdir)
        if state.seed != int(seed):
            raise PipelineError(
                f"existing state was created with seed {state.seed}, got {seed}"
            )
    else:
        state = init_state(workdir, config, seed)
    if state.generation > len(config.generations):
        raise PipelineError(
            f"state has {state.generation} completed generations but the config "
            f"lists only {len(config.generations)}"
        )
    for gen_config in config.generations[state.generation :]:
        state = run_generation(state, gen_config)
    _atomic_write_text(workdir / "metrics.tsv", metrics_tsv(state.metrics))
    return state


def _read_curves(path: Path) -> list[tuple[str, str, str, str]]:
    rows = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        threshold, utt_frac, tok_frac, wer_cell = line.split("\t")
        rows.append((threshold, utt_frac, tok_frac, wer_cell))
    return rows


def emit_reports(state: PipelineState) -> dict[str, Path]:
    """Write the per-figure analysis tables from completed generations.

    wer_by_generation: dev WER per generation.
    score_survival: fraction of dev utterances and tokens above each
        filter-score threshold, per generation.
    wer_above_score: aggregate dev WER of transcripts above each threshold.
    wer_vs_semi_size: dev WER against the semi-supervised set size.
    """
    if not state.metrics:
        raise PipelineError("no generations completed")
    workdir = state.workdir
    out: dict[str, Path] = {}

    lines = ["generation\tdev_wer"]
    for m in state.metrics:
        lines.append(f"{m.generation}\t{m.dev_wer:.6g}")
    out["wer_by_generation"] = workdir / "report_wer_by_generation.tsv"
    _atomic_write_text(out["wer_by_generation"], "\n".join(lines) + "\n")

    survival = ["generation\tthreshold\tutt_frac\ttok_frac"]
    wer_above = ["generation\tthreshold\twer"]
    for m in state.metrics:
        curve_path = workdir / f"curves_gen{m.generation}.tsv"
        for threshold, utt_frac, tok_frac, wer_cell in _read_curves(curve_path):
            survival.append(f"{m.generation}\t{threshold}\t{utt_frac}\t{tok_frac}")
            wer_above.append(f"{m.generation}\t{threshold}\t{wer_cell}")
    out["score_survival"] = workdir / "report_score_survival.tsv"
    _atomic_write_text(out["score_survival"], "\n".join(survival) + "\n")
    out["wer_above_score"] = workdir / "report_wer_above_score.tsv"
    _atomic_write_text(out["wer_above_score"], "\n".join(wer_above) + "\n")

    sizes = ["generation\tsemi_utterances\tsemi_examples\tdev_wer"]
    for m in state.metrics:
        sizes.append(
            f"{m.generation}\t{m.semi_utterances}\t{m.semi_examples}\t{m.dev_wer:.6g}"
        )
    out["wer_vs_semi_size"] = workdir / "report_wer_vs_semi_size.tsv"
    _atomic_write_text(out["wer_vs_semi_size"], "\n".join(sizes) + "\n")

    out["metrics"] = workdir / "metrics.tsv"
    _atomic_write_text(out["metrics"], metrics_tsv(state.metrics))
    return out
