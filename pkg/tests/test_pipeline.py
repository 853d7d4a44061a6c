import json
from pathlib import Path

import pytest

from nst.augment import AugmentPolicy
from nst.corpus import load_manifest, save_manifest, save_vocab
from nst.mixing import MixPlan
from nst.pipeline import (
    BalanceSettings,
    GenerationConfig,
    PipelineConfig,
    PipelineError,
    StageError,
    emit_reports,
    init_state,
    load_state,
    parse_cutoff,
    run_generation,
    run_pipeline,
    select_checkpoint,
)
from nst.recognizer import MarkovSentenceSource, ToyWorld, synth_generate
from nst.scoring import FusionParams
from nst.seeding import derive_rng

NEG_INF = float("-inf")

MILD_POLICY = AugmentPolicy(
    freq_mask_param=1,
    num_freq_masks=1,
    time_mask_param=None,
    time_mask_ratio=0.05,
    num_time_masks=2,
    time_warp_param=0,
)

GRID = (FusionParams(lm_weight=0.0), FusionParams(lm_weight=0.7))


def make_task(root: Path, sup=40, dev=30, unlab=80, noise=0.4, seed=5):
    world = ToyWorld(vocab_size=8, noise=noise, frames_per_token=2)
    source = MarkovSentenceSource.structured(8, seed=21, length_range=(3, 6))
    root.mkdir(parents=True, exist_ok=True)
    save_vocab(world.vocab(), root / "vocab.txt")
    rng = derive_rng(seed, "task")
    save_manifest(synth_generate(world, sup, source, rng, "sup"), root / "sup.jsonl")
    save_manifest(synth_generate(world, dev, source, rng, "dev"), root / "dev.jsonl")
    unlabeled = synth_generate(world, unlab, source, rng, "unlab").strip_labels()
    save_manifest(unlabeled, root / "unlab.jsonl")
    return world


def make_config(root: Path, gens):
    return PipelineConfig(
        supervised=str(root / "sup.jsonl"),
        unlabeled=str(root / "unlab.jsonl"),
        dev=str(root / "dev.jsonl"),
        vocab=str(root / "vocab.txt"),
        frames_per_token=2,
        beam=3,
        generations=tuple(gens),
    )


def gen_config(generation, cutoff=None, balance=False, mix=None):
    return GenerationConfig(
        generation=generation,
        augment_policy=MILD_POLICY,
        fusion_grid=GRID,
        filter_cutoff=cutoff,
        balance=BalanceSettings() if balance else None,
        mix=mix or MixPlan(mode="batchwise", ratio=(1, 1), batch_size=4),
    )


@pytest.fixture
def task(tmp_path):
    root = tmp_path / "task"
    make_task(root)
    return root


class TestGenerationZero:
    def test_trains_on_supervised_only_and_records_baseline(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        workdir = tmp_path / "work"
        state = init_state(workdir, config, seed=9)
        state = run_generation(state, config.generations[0])
        assert state.generation == 1
        assert len(state.metrics) == 1
        row = state.metrics[0]
        assert row.generation == 0
        assert 0.0 <= row.dev_wer <= 1.0
        assert row.semi_utterances == 0
        assert row.semi_examples == 0
        assert (workdir / "model_gen0.json").exists()
        assert (workdir / "filter_gen0.json").exists()
        assert (workdir / "curves_gen0.tsv").exists()
        assert state.fusion is not None
        assert state.filter_model is not None

    def test_generation_mismatch_rejected(self, task, tmp_path):
        config = make_config(task, [gen_config(0), gen_config(1)])
        state = init_state(tmp_path / "work", config, seed=9)
        with pytest.raises(PipelineError):
            run_generation(state, config.generations[1])


class TestFullLoop:
    def test_single_generation_pipeline(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        state = run_pipeline(tmp_path / "work", config, seed=3)
        table = (tmp_path / "work" / "metrics.tsv").read_text().splitlines()
        assert table[0] == "generation\tdev_wer\tsemi_utterances\tsemi_examples"
        assert len(table) == 2

    def test_filtering_disabled_balancing_enabled(self, task, tmp_path):
        config = make_config(
            task, [gen_config(0), gen_config(1, cutoff=None, balance=True)]
        )
        workdir = tmp_path / "work"
        state = run_pipeline(workdir, config, seed=4)
        pseudo = load_manifest(workdir / "pseudo_gen1.jsonl")
        unlab = load_manifest(task / "unlab.jsonl")
        # Every pseudo-label is present before balancing.
        assert pseudo.ids() == unlab.ids()
        assert not (workdir / "filtered_gen1.jsonl").exists()
        balanced = load_manifest(workdir / "balanced_gen1.jsonl")
        assert set(balanced.ids()) <= set(pseudo.ids())
        assert all(1 <= u.multiplicity <= 2 for u in balanced)
        assert state.metrics[1].semi_utterances == len(balanced)

    def test_filtered_sets_nested_across_relaxing_cutoffs(self, task, tmp_path):
        config = make_config(
            task,
            [
                gen_config(0),
                gen_config(1, cutoff=0.5),
                gen_config(2, cutoff=NEG_INF),
            ],
        )
        workdir = tmp_path / "work"
        state = run_pipeline(workdir, config, seed=6)
        sizes = [m.semi_utterances for m in state.metrics]
        assert sizes[0] == 0
        # The -inf generation keeps the whole unlabeled set.
        assert sizes[2] == len(load_manifest(task / "unlab.jsonl"))
        assert sizes[1] <= sizes[2]

    def test_resume_is_a_noop_after_completion(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        workdir = tmp_path / "work"
        first = run_pipeline(workdir, config, seed=11)
        state_bytes = (workdir / "state.json").read_bytes()
        second = run_pipeline(workdir, config, seed=11)
        assert (workdir / "state.json").read_bytes() == state_bytes
        assert second.metrics == first.metrics

    def test_seed_mismatch_rejected(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        workdir = tmp_path / "work"
        run_pipeline(workdir, config, seed=11)
        with pytest.raises(PipelineError):
            run_pipeline(workdir, config, seed=12)


class TestDeterminism:
    def test_rerun_from_persisted_state_is_byte_identical(self, task, tmp_path):
        config = make_config(task, [gen_config(0), gen_config(1, cutoff=0.0, balance=True)])
        workdir = tmp_path / "work"
        state0 = init_state(workdir, config, seed=13)
        state1 = run_generation(state0, config.generations[0])
        checkpoint = (workdir / "state.json").read_bytes()

        run_generation(state1, config.generations[1])
        first_state = (workdir / "state.json").read_bytes()
        first_model = (workdir / "model_gen1.json").read_bytes()
        first_manifest = (workdir / "pseudo_gen1.jsonl").read_bytes()

        (workdir / "state.json").write_bytes(checkpoint)
        run_generation(load_state(workdir), config.generations[1])
        assert (workdir / "state.json").read_bytes() == first_state
        assert (workdir / "model_gen1.json").read_bytes() == first_model
        assert (workdir / "pseudo_gen1.jsonl").read_bytes() == first_manifest


class TestGradationalSchedules:
    def test_six_generation_cutoff_relaxation_grows_semi_sets(self, tmp_path):
        # Filtering only (no balancing): the semi set is the filtered set,
        # and relaxing cutoffs grows it generation over generation.
        root = tmp_path / "task"
        make_task(root, sup=60, dev=40, unlab=300, noise=0.7, seed=31)
        cutoffs = [None, 1.0, 0.5, 0.0, -1.0, NEG_INF]
        config = make_config(
            root, [gen_config(i, cutoff=cutoffs[i]) for i in range(6)]
        )
        state = run_pipeline(tmp_path / "work", config, seed=31)
        sizes = [m.semi_utterances for m in state.metrics]
        assert len(sizes) == 6
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))
        assert sizes[1] > 0
        assert sizes[5] == 300

    def test_fast_and_slow_pipelines_report_comparable_tables(self, tmp_path):
        # A 3-generation run (cutoffs 0, -inf) against a 5-generation run
        # (1, 0.5, 0, -inf); the report pairs WER with semi-set size so the
        # two evolutions can be compared at matched sizes. No direction is
        # asserted, only that both runs complete and report cleanly.
        root = tmp_path / "task"
        make_task(root, sup=50, dev=40, unlab=200, noise=0.7, seed=33)
        fast_cutoffs = [None, 0.0, NEG_INF]
        slow_cutoffs = [None, 1.0, 0.5, 0.0, NEG_INF]
        results = {}
        for name, cutoffs in [("fast", fast_cutoffs), ("slow", slow_cutoffs)]:
            config = make_config(
                root, [gen_config(i, cutoff=cutoffs[i]) for i in range(len(cutoffs))]
            )
            state = run_pipeline(tmp_path / f"work-{name}", config, seed=33)
            paths = emit_reports(state)
            lines = paths["wer_vs_semi_size"].read_text().splitlines()
            assert lines[0] == "generation\tsemi_utterances\tsemi_examples\tdev_wer"
            assert len(lines) == 1 + len(cutoffs)
            rows = [line.split("\t") for line in lines[1:]]
            results[name] = [(int(r[1]), float(r[3])) for r in rows]
        for rows in results.values():
            assert all(0.0 <= wer_value <= 1.0 for _, wer_value in rows)
            assert all(size >= 0 for size, _ in rows)


class TestStageErrors:
    def test_failed_stage_leaves_state_untouched(self, task, tmp_path):
        config = make_config(task, [gen_config(0), gen_config(1)])
        workdir = tmp_path / "work"
        state = init_state(workdir, config, seed=2)
        state = run_generation(state, config.generations[0])
        snapshot = (workdir / "state.json").read_bytes()
        (task / "unlab.jsonl").unlink()
        with pytest.raises(StageError) as err:
            run_generation(state, config.generations[1])
        assert err.value.generation == 1
        assert err.value.stage == "load_teacher"
        assert (workdir / "state.json").read_bytes() == snapshot


class TestReports:
    def test_reports_after_generation_zero(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        workdir = tmp_path / "work"
        state = run_pipeline(workdir, config, seed=8)
        paths = emit_reports(state)
        survival = paths["score_survival"].read_text().splitlines()
        assert survival[0] == "generation\tthreshold\tutt_frac\ttok_frac"
        assert len(survival) == 1 + 61
        fractions = [float(line.split("\t")[2]) for line in survival[1:]]
        assert all(a >= b for a, b in zip(fractions, fractions[1:]))
        wer_above = paths["wer_above_score"].read_text().splitlines()
        assert wer_above[0] == "generation\tthreshold\twer"
        assert len(wer_above) == 1 + 61
        assert paths["wer_by_generation"].exists()
        assert paths["wer_vs_semi_size"].exists()

    def test_no_metrics_rejected(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        state = init_state(tmp_path / "work", config, seed=1)
        with pytest.raises(PipelineError, match="no generations completed"):
            emit_reports(state)


class TestCheckpointSelection:
    def test_lowest_score_wins(self):
        scores = {"a": 0.4, "b": 0.1, "c": 0.2}
        assert select_checkpoint(["a", "b", "c"], scores.__getitem__) == "b"

    def test_tie_goes_to_earliest(self):
        assert select_checkpoint(["x", "y"], lambda _: 0.5) == "x"

    def test_empty_rejected(self):
        with pytest.raises(PipelineError):
            select_checkpoint([], lambda _: 0.0)


class TestConfigParsing:
    def test_cutoff_forms(self):
        assert parse_cutoff(None) is None
        assert parse_cutoff("-inf") == NEG_INF
        assert parse_cutoff("inf") == float("inf")
        assert parse_cutoff(0.5) == 0.5
        assert parse_cutoff("0.25") == 0.25

    def test_config_json_roundtrip(self, task, tmp_path):
        record = {
            "datasets": {
                "supervised": "task/sup.jsonl",
                "unlabeled": "task/unlab.jsonl",
                "dev": "task/dev.jsonl",
                "vocab": "task/vocab.txt",
            },
            "frames_per_token": 2,
            "beam": 3,
            "generations": [
                {
                    "generation": 0,
                    "augment": {"freq_mask_param": 1, "num_freq_masks": 1,
                                "time_mask_ratio": 0.05, "num_time_masks": 2},
                    "fusion_grid": [{"lm_weight": 0.0}, {"lm_weight": 0.7}],
                },
                {
                    "generation": 1,
                    "augment": {"time_mask_param": 4},
                    "fusion_grid": [{"lm_weight": 0.7}],
                    "filter_cutoff": "-inf",
                    "balance": True,
                    "mix": {"mode": "batchwise", "ratio": [1, 1], "batch_size": 4},
                },
            ],
        }
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps(record))
        config = PipelineConfig.from_file(config_path)
        assert config.supervised == str(tmp_path / "task" / "sup.jsonl")
        assert config.generations[1].filter_cutoff == NEG_INF
        assert config.generations[1].balance == BalanceSettings()
        assert config.generations[0].augment_policy.time_mask_ratio == 0.05

    def test_generation_numbering_enforced(self, task):
        with pytest.raises(PipelineError):
            make_config(task, [gen_config(1)])

    def test_state_json_roundtrip(self, task, tmp_path):
        config = make_config(task, [gen_config(0)])
        workdir = tmp_path / "work"
        state = run_pipeline(workdir, config, seed=21)
        loaded = load_state(workdir)
        assert loaded.generation == state.generation
        assert loaded.metrics == state.metrics
        assert loaded.fusion == state.fusion
        assert loaded.filter_model == state.filter_model
        assert loaded.model_file == state.model_file
