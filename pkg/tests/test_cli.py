import json

import pytest

from nst.cli import main
from nst.corpus import load_manifest
from nst.scoring import read_hypotheses


@pytest.fixture
def task_dir(tmp_path):
    out = tmp_path / "task"
    code = main(
        [
            "synth",
            "--out", str(out),
            "--vocab-size", "8",
            "--noise", "0.4",
            "--frames-per-token", "2",
            "--supervised", "30",
            "--dev", "25",
            "--unlabeled", "40",
            "--min-length", "3",
            "--max-length", "6",
            "--seed", "5",
        ]
    )
    assert code == 0
    return out


def test_synth_writes_task(task_dir):
    assert (task_dir / "vocab.txt").exists()
    sup = load_manifest(task_dir / "supervised.jsonl")
    unlab = load_manifest(task_dir / "unlabeled.jsonl")
    assert len(sup) == 30
    assert all(u.transcript is not None for u in sup)
    assert all(u.transcript is None for u in unlab)


@pytest.fixture
def model_path(task_dir, tmp_path):
    model = tmp_path / "model.json"
    code = main(
        [
            "toy-train",
            "--manifest", str(task_dir / "supervised.jsonl"),
            "--vocab", str(task_dir / "vocab.txt"),
            "--frames-per-token", "2",
            "--seed", "0",
            "--out", str(model),
        ]
    )
    assert code == 0
    return model


@pytest.fixture
def dev_hyps(task_dir, model_path, tmp_path):
    hyps = tmp_path / "dev_hyps.jsonl"
    code = main(
        [
            "toy-transcribe",
            "--model", str(model_path),
            "--manifest", str(task_dir / "dev.jsonl"),
            "--beam", "3",
            "--out", str(hyps),
        ]
    )
    assert code == 0
    return hyps


def test_score_adds_fused(dev_hyps, tmp_path):
    fused = tmp_path / "fused.jsonl"
    code = main(
        ["score", "--params", "0.5,0.1,0", "--mode", "attention",
         "--hyps", str(dev_hyps), "--out", str(fused)]
    )
    assert code == 0
    records = read_hypotheses(fused)
    assert records
    for r in records:
        assert r.fused == pytest.approx(r.am + 0.5 * r.lm + 0.1 * r.coverage)


@pytest.fixture
def filter_model_path(dev_hyps, tmp_path):
    fused = tmp_path / "fused.jsonl"
    main(["score", "--params", "0.5,0,0", "--hyps", str(dev_hyps), "--out", str(fused)])
    out = tmp_path / "filter.json"
    code = main(["fit-filter", "--hyps", str(fused), "--out", str(out)])
    assert code == 0
    return out


def test_fit_filter_writes_model(filter_model_path):
    record = json.loads(filter_model_path.read_text())
    assert set(record) == {"mu", "beta", "sigma"}
    assert record["sigma"] > 0


def test_filter_and_curves(task_dir, model_path, filter_model_path, tmp_path):
    # Pseudo-label the unlabeled set through the CLI surfaces.
    hyps = tmp_path / "unlab_hyps.jsonl"
    main(["toy-transcribe", "--model", str(model_path),
          "--manifest", str(task_dir / "unlabeled.jsonl"), "--beam", "1",
          "--out", str(hyps)])
    fused = tmp_path / "unlab_fused.jsonl"
    main(["score", "--params", "0.5,0,0", "--hyps", str(hyps), "--out", str(fused)])

    # Build a scored manifest from the fused hypotheses.
    unlab = load_manifest(task_dir / "unlabeled.jsonl")
    by_id = {}
    for record in read_hypotheses(fused):
        if record.utterance_id not in by_id or record.fused > by_id[record.utterance_id].fused:
            by_id[record.utterance_id] = record
    from nst.corpus import Dataset, Utterance, save_manifest

    scored = Dataset(
        Utterance(id=u.id, features=u.features,
                  transcript=by_id[u.id].tokens, score=by_id[u.id].fused)
        for u in unlab
    )
    scored_path = tmp_path / "scored.jsonl"
    save_manifest(scored, scored_path)

    kept_path = tmp_path / "kept.jsonl"
    code = main(["filter", "--manifest", str(scored_path),
                 "--filter-model", str(filter_model_path),
                 "--cutoff", "0", "--out", str(kept_path)])
    assert code == 0
    kept = load_manifest(kept_path)
    assert 0 < len(kept) < len(scored)

    everything = tmp_path / "all.jsonl"
    # argparse needs the '=' form for values that begin with a dash
    main(["filter", "--manifest", str(scored_path),
          "--filter-model", str(filter_model_path),
          "--cutoff=-inf", "--out", str(everything)])
    assert len(load_manifest(everything)) == len(scored)

    curves = tmp_path / "curves.tsv"
    code = main(["curves", "--refs", str(task_dir / "dev.jsonl"),
                 "--hyps", str(tmp_path / "fused.jsonl"),
                 "--filter-model", str(filter_model_path),
                 "--out", str(curves)])
    assert code == 0
    lines = curves.read_text().splitlines()
    assert lines[0] == "threshold\tutt_frac\ttok_frac\twer"
    assert len(lines) == 62

    balanced = tmp_path / "balanced.jsonl"
    code = main(["balance", "--manifest", str(kept_path),
                 "--target", str(task_dir / "supervised.jsonl"),
                 "--vocab", str(task_dir / "vocab.txt"),
                 "--min-tokens", "40",
                 "--out", str(balanced)])
    assert code == 0
    assert all(1 <= u.multiplicity <= 2 for u in load_manifest(balanced))


def test_augment_cli(task_dir, tmp_path):
    policy = tmp_path / "policy.json"
    policy.write_text(json.dumps({"freq_mask_param": 2, "num_freq_masks": 1,
                                  "time_mask_ratio": 0.1, "num_time_masks": 2}))
    out = tmp_path / "aug.jsonl"
    code = main(["augment", "--manifest", str(task_dir / "supervised.jsonl"),
                 "--policy", str(policy), "--seed", "3", "--out", str(out)])
    assert code == 0
    original = load_manifest(task_dir / "supervised.jsonl")
    augmented = load_manifest(out)
    assert augmented.ids() == original.ids()
    assert augmented[0].features.shape == original[0].features.shape


def test_mix_cli(task_dir, tmp_path):
    out = tmp_path / "stream.tsv"
    code = main(["mix", "--sup", str(task_dir / "supervised.jsonl"),
                 "--semi", str(task_dir / "dev.jsonl"),
                 "--mode", "batchwise", "--ratio", "1:1", "--batch", "4",
                 "--num-batches", "5", "--seed", "1", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "batch\tutterance_id\torigin"
    assert len(lines) == 1 + 5 * 4
    for line in lines[1:]:
        _, _, origin = line.split("\t")
        assert origin in {"sup", "semi"}


def test_run_and_report_cli(task_dir, tmp_path):
    config = {
        "datasets": {
            "supervised": "task/supervised.jsonl",
            "unlabeled": "task/unlabeled.jsonl",
            "dev": "task/dev.jsonl",
            "vocab": "task/vocab.txt",
        },
        "frames_per_token": 2,
        "beam": 3,
        "generations": [
            {
                "generation": 0,
                "augment": {"time_mask_ratio": 0.05, "num_time_masks": 2,
                            "freq_mask_param": 1, "num_freq_masks": 1},
                "fusion_grid": [{"lm_weight": 0.0}, {"lm_weight": 0.7}],
            },
            {
                "generation": 1,
                "augment": {"time_mask_ratio": 0.05, "num_time_masks": 2,
                            "freq_mask_param": 1, "num_freq_masks": 1},
                "fusion_grid": [{"lm_weight": 0.0}, {"lm_weight": 0.7}],
                "filter_cutoff": 0,
                "balance": True,
                "mix": {"mode": "batchwise", "ratio": [1, 1], "batch_size": 4},
            },
        ],
    }
    config_path = tmp_path / "cfg.json"
    config_path.write_text(json.dumps(config))
    workdir = tmp_path / "work"
    code = main(["run", "--config", str(config_path), "--workdir", str(workdir), "--seed", "7"])
    assert code == 0
    assert (workdir / "metrics.tsv").exists()
    code = main(["report", "--workdir", str(workdir)])
    assert code == 0
    assert (workdir / "report_wer_by_generation.tsv").exists()
    assert (workdir / "report_score_survival.tsv").exists()


def test_cli_reports_errors_cleanly(tmp_path, capsys):
    code = main(["fit-filter", "--hyps", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "out.json")])
    assert code == 2 or isinstance(code, int)
