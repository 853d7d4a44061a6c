"""Calibration of the desk-scale self-training demonstration.

Reproduces the frozen acceptance configuration (and optional neighbors) and
prints the fused dev WER per generation so the improvement threshold can be
checked against its fixed seed.

Usage: python3 scripts/calibrate_toy_nst.py [workdir] [--sweep]
"""
import sys
import time
from pathlib import Path

from nst.augment import AugmentPolicy
from nst.corpus import save_manifest, save_vocab
from nst.mixing import MixPlan
from nst.pipeline import (
    BalanceSettings,
    GenerationConfig,
    PipelineConfig,
    run_pipeline,
)
from nst.recognizer import MarkovSentenceSource, ToyWorld, synth_generate
from nst.scoring import FusionParams
from nst.seeding import derive_rng

NEG_INF = float("-inf")

SEED = 20240817
NOISE = 0.905
POLICY = AugmentPolicy(
    freq_mask_param=6,
    num_freq_masks=2,
    time_mask_param=None,
    time_mask_ratio=0.2,
    num_time_masks=4,
    time_warp_param=0,
)
GRID = tuple(FusionParams(lm_weight=w) for w in (0.0, 0.3, 0.6, 1.0, 1.5, 2.0))
CUTOFFS = [None, 1.0, 0.0, NEG_INF]
RATIOS = [(1, 1), (1, 1), (2, 6), (2, 6)]
BALANCE = BalanceSettings(min_tokens=3000)


def build_task(root: Path, noise: float, seed: int) -> None:
    world = ToyWorld(vocab_size=20, noise=noise, frames_per_token=3)
    source = MarkovSentenceSource.structured(
        20, seed=1234, branching=3, length_range=(3, 6)
    )
    root.mkdir(parents=True, exist_ok=True)
    save_vocab(world.vocab(), root / "vocab.txt")
    rng = derive_rng(seed, "task", noise, "(3, 6)")
    save_manifest(synth_generate(world, 200, source, rng, "sup"), root / "sup.jsonl")
    save_manifest(synth_generate(world, 200, source, rng, "dev"), root / "dev.jsonl")
    unlabeled = synth_generate(world, 2000, source, rng, "unlab").strip_labels()
    save_manifest(unlabeled, root / "unlab.jsonl")


def run_once(base: Path, noise: float, seed: int) -> None:
    root = base / f"noise{noise}-seed{seed}"
    build_task(root / "task", noise, seed)
    generations = tuple(
        GenerationConfig(
            generation=i,
            augment_policy=POLICY,
            fusion_grid=GRID,
            filter_cutoff=CUTOFFS[i],
            balance=BALANCE if i > 0 else None,
            mix=MixPlan(mode="batchwise", ratio=RATIOS[i], batch_size=8),
        )
        for i in range(4)
    )
    config = PipelineConfig(
        supervised=str(root / "task" / "sup.jsonl"),
        unlabeled=str(root / "task" / "unlab.jsonl"),
        dev=str(root / "task" / "dev.jsonl"),
        vocab=str(root / "task" / "vocab.txt"),
        frames_per_token=3,
        beam=8,
        decode_lm_weight=0.75,
        generations=generations,
    )
    start = time.time()
    state = run_pipeline(root / "work", config, seed)
    wers = [m.dev_wer for m in state.metrics]
    sizes = [m.semi_utterances for m in state.metrics]
    improvements = [(wers[0] - w) / wers[0] for w in wers]
    in_band = 0.15 <= wers[0] <= 0.40
    print(
        f"noise={noise} seed={seed}: "
        f"wers={[f'{w:.4f}' for w in wers]} "
        f"rel={[f'{r:.3f}' for r in improvements]} sizes={sizes} "
        f"band={'ok' if in_band else 'OUT'} gen2_bar={'ok' if improvements[2] >= 0.10 else 'MISS'} "
        f"({time.time() - start:.0f}s)"
    )


def main() -> int:
    args = [a for a in sys.argv[1:]]
    sweep = "--sweep" in args
    args = [a for a in args if a != "--sweep"]
    base = Path(args[0]) if args else Path("/tmp/nst-calibration")
    run_once(base, NOISE, SEED)
    if sweep:
        for noise in (0.88, 0.92):
            run_once(base, noise, SEED)
        for seed in (7, 555, 1001):
            run_once(base, NOISE, seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
