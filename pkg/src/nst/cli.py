"""Command-line interface: ``nst <subcommand>``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .augment import AugmentPolicy, apply_policy
from .balancing import SamplerConfig, submodular_sample
from .corpus import (
    Dataset,
    Utterance,
    WeightedSample,
    load_manifest,
    load_vocab,
    save_manifest,
    save_vocab,
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
from .mixing import MixPlan, mix_batchwise, mix_uniform
from .pipeline import (
    PipelineConfig,
    emit_reports,
    load_state,
    parse_cutoff,
    run_pipeline,
)
from .recognizer import (
    MarkovSentenceSource,
    ToyWorld,
    load_model,
    save_model,
    synth_generate,
    toy_train,
    toy_transcribe,
)
from .scoring import (
    FusionParams,
    HypothesisRecord,
    fuse_components,
    read_hypotheses,
    write_hypotheses,
)
from .seeding import derive_rng


def _load_policy(path: str) -> AugmentPolicy:
    return AugmentPolicy.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_synth(args) -> int:
    world = ToyWorld(
        vocab_size=args.vocab_size,
        noise=args.noise,
        frames_per_token=args.frames_per_token,
    )
    source = MarkovSentenceSource.structured(
        args.vocab_size, seed=args.seed, length_range=(args.min_length, args.max_length)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(world.vocab(), out / "vocab.txt")
    rng = derive_rng(args.seed, "synth")
    sup = synth_generate(world, args.supervised, source, rng, id_prefix="sup")
    dev = synth_generate(world, args.dev, source, rng, id_prefix="dev")
    unlab = synth_generate(world, args.unlabeled, source, rng, id_prefix="unlab")
    save_manifest(sup, out / "supervised.jsonl")
    save_manifest(dev, out / "dev.jsonl")
    save_manifest(unlab.strip_labels(), out / "unlabeled.jsonl")
    print(f"wrote {len(sup)}/{len(dev)}/{len(unlab)} sup/dev/unlabeled utterances to {out}")
    return 0


def cmd_toy_train(args) -> int:
    dataset = load_manifest(args.manifest)
    vocab = load_vocab(args.vocab)
    policy = _load_policy(args.policy) if args.policy else AugmentPolicy(
        freq_mask_param=0, num_freq_masks=0, time_mask_param=0, num_time_masks=0
    )
    model = toy_train(dataset, vocab, args.frames_per_token, policy, args.seed)
    save_model(model, args.out)
    print(f"wrote model to {args.out}")
    return 0


def cmd_toy_transcribe(args) -> int:
    model = load_model(args.model)
    dataset = load_manifest(args.manifest)
    vocab = model.vocab
    hyp_lists = toy_transcribe(model, list(dataset), args.beam, args.lm_weight)
    records = []
    for u, hyps in zip(dataset, hyp_lists):
        for h in hyps:
            records.append(
                HypothesisRecord(
                    utterance_id=u.id,
                    tokens=vocab.decode(h.transcript),
                    am=h.am_score,
                    lm=h.lm_score,
                    coverage=h.coverage,
                )
            )
    write_hypotheses(records, args.out)
    print(f"wrote {len(records)} hypotheses to {args.out}")
    return 0


def _parse_params(args) -> FusionParams:
    parts = [float(x) for x in args.params.split(",")]
    if len(parts) != 3:
        raise NstError("--params expects three comma-separated values: lm,coverage,reward")
    return FusionParams(
        lm_weight=parts[0],
        coverage_weight=parts[1],
        nonblank_reward=parts[2],
        mode=args.mode,
    )


def cmd_score(args) -> int:
    params = _parse_params(args)
    records = read_hypotheses(args.hyps)
    fused = [
        HypothesisRecord(
            utterance_id=r.utterance_id,
            tokens=r.tokens,
            am=r.am,
            lm=r.lm,
            coverage=r.coverage,
            fused=fuse_components(r.am, r.lm, r.coverage, len(r.tokens), params),
        )
        for r in records
    ]
    write_hypotheses(fused, args.out)
    print(f"wrote {len(fused)} fused hypotheses to {args.out}")
    return 0


def _best_fused_by_utterance(records) -> dict[str, HypothesisRecord]:
    best: dict[str, HypothesisRecord] = {}
    for r in records:
        if r.fused is None:
            raise NstError(f"hypothesis for {r.utterance_id!r} lacks a fused score")
        current = best.get(r.utterance_id)
        if current is None or r.fused > current.fused:
            best[r.utterance_id] = r
    return best


def cmd_fit_filter(args) -> int:
    records = read_hypotheses(args.hyps)
    best = _best_fused_by_utterance(records)
    pairs = [(len(r.tokens), r.fused) for r in best.values() if len(r.tokens) >= 1]
    model = fit_filter(pairs)
    Path(args.out).write_text(
        json.dumps(model.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"fit mu={model.mu:.6g} beta={model.beta:.6g} sigma={model.sigma:.6g}")
    return 0


def _load_filter_model(path: str) -> FilterModel:
    return FilterModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_filter(args) -> int:
    dataset = load_manifest(args.manifest)
    model = _load_filter_model(args.filter_model)
    cutoff = parse_cutoff(args.cutoff)
    if cutoff is None:
        raise NstError("--cutoff must be a number or '-inf'")
    filtered = apply_filter(dataset, model, cutoff)
    save_manifest(filtered, args.out)
    print(f"kept {len(filtered)} of {len(dataset)} utterances")
    return 0


def cmd_curves(args) -> int:
    dev = load_manifest(args.refs)
    model = _load_filter_model(args.filter_model)
    best = _best_fused_by_utterance(read_hypotheses(args.hyps))
    scored = {
        utt_id: ScoredTranscript(rec.tokens, rec.fused) for utt_id, rec in best.items()
    }
    points = score_curves(dev, scored, model, default_thresholds(args.low, args.high, args.step))
    Path(args.out).write_text(curves_to_tsv(points), encoding="utf-8", newline="\n")
    print(f"wrote {len(points)} curve rows to {args.out}")
    return 0


def cmd_balance(args) -> int:
    dataset = load_manifest(args.manifest)
    target_set = load_manifest(args.target)
    vocab = load_vocab(args.vocab)
    pool = [
        WeightedSample(u.id, vocab.encode_tokens(u.transcript), 1) for u in dataset
    ]
    target = token_distribution(
        [vocab.encode_tokens(u.transcript) for u in target_set], vocab.size
    )
    if args.min_tokens == "auto":
        floor = target_set.total_tokens()
    else:
        floor = int(args.min_tokens)
    config = SamplerConfig(
        multiplicity_cap=args.cap,
        batch_fraction=args.batch_frac,
        min_token_total=floor,
        smoothing_epsilon=args.epsilon,
    )
    result = submodular_sample(pool, target, config)
    by_id = {s.utterance_id: s.multiplicity for s in result.samples}
    balanced = Dataset(
        Utterance(
            id=u.id,
            features=u.features,
            transcript=u.transcript,
            score=u.score,
            multiplicity=by_id[u.id],
        )
        for u in dataset
        if u.id in by_id
    )
    save_manifest(balanced, args.out)
    status = "infeasible floor, pool exhausted" if result.infeasible else "ok"
    print(
        f"sampled {len(balanced)} sentences, {result.total_tokens()} tokens ({status})"
    )
    return 0


def cmd_augment(args) -> int:
    dataset = load_manifest(args.manifest)
    policy = _load_policy(args.policy)
    augmented = Dataset(
        Utterance(
            id=u.id,
            features=apply_policy(u.features, policy, derive_rng(args.seed, "augment", u.id)),
            transcript=u.transcript,
            score=u.score,
            multiplicity=u.multiplicity,
        )
        for u in dataset
    )
    save_manifest(augmented, args.out)
    print(f"augmented {len(augmented)} utterances into {args.out}")
    return 0


def cmd_mix(args) -> int:
    sup = load_manifest(args.sup)
    semi = load_manifest(args.semi) if args.semi else Dataset([])
    rng = derive_rng(args.seed, "mix")
    lines = ["batch\tutterance_id\torigin"]
    if args.mode == "batchwise":
        ratio = tuple(int(x) for x in args.ratio.split(":"))
        plan = MixPlan(mode="batchwise", ratio=ratio, batch_size=args.batch)
        stream = mix_batchwise(sup, semi, plan, rng)
        for index in range(args.num_batches):
            for utt, origin in next(stream):
                lines.append(f"{index}\t{utt.id}\t{origin}")
    else:
        stream = mix_uniform(sup, semi, rng)
        for index in range(args.num_batches):
            utt, origin = next(stream)
            lines.append(f"{index}\t{utt.id}\t{origin}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote mix stream to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = PipelineConfig.from_file(args.config)
    state = run_pipeline(args.workdir, config, args.seed)
    for m in state.metrics:
        print(
            f"generation {m.generation}: dev WER {m.dev_wer:.4f}, "
            f"semi set {m.semi_utterances} utterances ({m.semi_examples} examples)"
        )
    return 0


def cmd_report(args) -> int:
    state = load_state(args.workdir)
    paths = emit_reports(state)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nst")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic toy task")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--frames-per-token", type=int, default=3)
    p.add_argument("--supervised", type=int, default=200)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--unlabeled", type=int, default=2000)
    p.add_argument("--min-length", type=int, default=4)
    p.add_argument("--max-length", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("toy-train", help="train the toy recognizer on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--frames-per-token", type=int, default=3)
    p.add_argument("--policy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("toy-transcribe", help="decode a manifest with a toy model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--lm-weight", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_transcribe)

    p = sub.add_parser("score", help="add fused scores to a hypotheses JSONL")
    p.add_argument("--params", required=True, help="lm_weight,coverage_weight,nonblank_reward")
    p.add_argument("--mode", choices=["attention", "transducer"], default="attention")
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fit-filter", help="fit the filter model on fused dev hypotheses")
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_filter)

    p = sub.add_parser("filter", help="filter a scored manifest at a cutoff")
    p.add_argument("--manifest", required=True)
    p.add_argument("--filter-model", required=True)
    p.add_argument("--cutoff", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("curves", help="emit score survival and WER curves as TSV")
    p.add_argument("--refs", required=True, help="labeled dev manifest")
    p.add_argument("--hyps", required=True, help="fused hypotheses JSONL")
    p.add_argument("--filter-model", required=True)
    p.add_argument("--low", type=float, default=-3.0)
    p.add_argument("--high", type=float, default=3.0)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("balance", help="balance a manifest toward a target token distribution")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", required=True, help="manifest defining the target distribution")
    p.add_argument("--vocab", required=True)
    p.add_argument("--cap", type=int, default=2)
    p.add_argument("--batch-frac", type=float, default=0.1)
    p.add_argument("--min-tokens", default="auto")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("augment", help="apply an augmentation policy to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("mix", help="emit a mixed training stream as TSV")
    p.add_argument("--sup", required=True)
    p.add_argument("--semi")
    p.add_argument("--mode", choices=["batchwise", "uniform"], default="batchwise")
    p.add_argument("--ratio", default="1:1")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--num-batches", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("run", help="run the generation loop from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="write analysis tables from a finished workdir")
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NstError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
