"""Command-line entry point: ``fssr <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import audio_dsp
from .datasets import (
    EpisodePool,
    SpectrogramCache,
    build_vctk_split,
    build_voxceleb_split,
    default_cache_dir,
    read_manifest,
    write_manifest,
)
from .errors import FSSRError
from .harness.config import EPISODIC_DEFAULTS, TrainConfig, load_layers, write_resolved
from .harness.records import EvaluationReport, append_jsonl, read_jsonl
from .harness.report import FORMATS, report
from .models import ARCHS, ModelConfig, build_model, load_checkpoint

log = logging.getLogger("fssr")


# ---------------------------------------------------------------------------
# helpers


def _inside(path: Path, root: Path) -> bool:
    try:
        path.resolve().relative_to(root.resolve())
        return True
    except ValueError:
        return False


def _guard_output(target: Path, roots) -> None:
    for root in roots:
        if _inside(target, Path(root)):
            raise SystemExit(f"refusing to write {target} inside dataset root {root}")


def _manifest_root(manifest) -> Optional[Path]:
    paths = [e.utterance.path for e in manifest.entries]
    return Path(os.path.commonpath(paths)) if paths else None


def _pools(args, split_names=("train", "test")):
    """(pools per split, n_classes, dataset name, dataset roots)."""
    if args.synthetic:
        from .synthetic import synthetic_splits

        n_spk, n_utt = (int(x) for x in args.synthetic.split(","))
        train, test = synthetic_splits(n_spk, n_utt, seed=args.seed)
        pools = {"train": train, "test": test}
        return pools, n_spk, f"synthetic{n_spk}x{n_utt}", []
    if not args.manifest:
        raise SystemExit("give --manifest or --synthetic")
    manifest = read_manifest(args.manifest)
    root = _manifest_root(manifest)
    cache = SpectrogramCache(args.cache or default_cache_dir())
    if root is not None:
        _guard_output(cache.directory, [root])
    rng = np.random.default_rng(args.seed)
    pools = {s: EpisodePool.from_manifest(manifest, s, cache, rng) for s in split_names}
    return pools, len(manifest.speakers()), manifest.protocol_tag, [root] if root else []


def _resolve(args, episodic: bool = False):
    base = {f"train.{k}": v for k, v in (EPISODIC_DEFAULTS if episodic else {}).items()}
    base["train.seed"] = args.seed
    tree = load_layers(args.config or [], args.set or [], base)
    return tree, TrainConfig.from_dict(tree.get("train", {})), tree.get("model", {})


def _model_config(arch: str, n_classes: int, overrides: dict) -> ModelConfig:
    d = ModelConfig(arch, n_classes).to_dict()
    for k, v in overrides.items():
        if isinstance(v, dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return ModelConfig.from_dict(d)


def _prepare_out(args, tree, roots) -> Path:
    out = Path(args.out)
    _guard_output(out, roots)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "config.resolved.txt", tree)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_splits(args):
    out = Path(args.out)
    if args.dataset == "synthetic":
        from .synthetic import write_synthetic_corpus

        _guard_output(out, [args.root])
        write_synthetic_corpus(args.root, args.n_speakers, args.n_utterances, args.seed, layout="vctk")
        manifest = build_vctk_split(args.root, args.train_fraction, args.seed)
    else:
        _guard_output(out, [args.root])
        if args.dataset == "voxceleb":
            k = None if args.k_per_class in (None, 0) else args.k_per_class
            manifest = build_voxceleb_split(args.root, args.n_classes, k, args.seed)
        else:
            manifest = build_vctk_split(args.root, args.train_fraction, args.seed, args.n_classes)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out)
    print(f"wrote {out}: {len(manifest.entries)} entries, {len(manifest.speakers())} speakers, "
          f"protocol {manifest.protocol_tag}")


def cmd_spectrogram(args):
    spec = audio_dsp.spectrogram_from_file(args.input, args.offset, args.duration,
                                           np.random.default_rng(args.seed), pad_with_repeat=args.loop)
    audio_dsp.save_spectrogram(args.out, spec)
    print(f"wrote {args.out}: {spec.bins} x {spec.frames}")
    if args.plot:
        from .harness.plotting import new_figure, save

        fig, ax = new_figure()
        ax.imshow(spec.values, origin="lower", aspect="auto", cmap="magma")
        ax.set_xlabel("frame (10 ms)")
        ax.set_ylabel("frequency bin")
        save(fig, args.plot)


def cmd_train(args):
    tree, cfg, model_over = _resolve(args)
    pools, n_classes, dataset, roots = _pools(args)
    out = _prepare_out(args, tree, roots)
    from .harness.training import train_classifier

    model = build_model(_model_config(args.arch, n_classes, model_over), seed=cfg.seed)
    result = train_classifier(cfg, model, pools["train"], pools["test"], out, dataset=dataset)
    append_jsonl(out / "records.jsonl", [result.record])
    print(f"{args.arch}: top1 {result.record.metrics['top1']:.4f} top5 {result.record.metrics['top5']:.4f} "
          f"NP {result.record.parameter_count:,}")


def cmd_episodic_train(args):
    tree, cfg, model_over = _resolve(args, episodic=True)
    pools, n_classes, dataset, roots = _pools(args)
    out = _prepare_out(args, tree, roots)
    from .harness.training import episodic_train

    model = build_model(_model_config(args.arch, args.capsule_classes or n_classes, model_over), seed=cfg.seed)
    val = pools["test"] if args.validate_on_test else None
    result = episodic_train(cfg, model, pools["train"], args.n_way, args.k_shot, args.n_query,
                            val_pool=val, out_dir=out, dataset=dataset)
    append_jsonl(out / "records.jsonl", [result.record])
    print(f"{args.arch}: {result.record.metrics} after {result.record.diagnostics['steps']} steps")


def cmd_fewshot_eval(args):
    from .fewshot import evaluate_few_shot

    model, _ = load_checkpoint(args.checkpoint)
    pools, _, _, _ = _pools(args)
    pool = pools[args.split]
    grid = [(w, s) for w in (5, 20) for s in (1, 5)] if args.grid else [(args.n_way, args.k_shot)]
    reports = []
    for n_way, k_shot in grid:
        res = evaluate_few_shot(model, pool, n_way, k_shot, args.n_query, args.episodes, args.seed,
                                distance=args.distance, mode=args.mode)
        rep = EvaluationReport(model.config.arch, n_way, k_shot, args.episodes, args.seed,
                               res.mean_accuracy, res.ci95)
        reports.append(rep)
        print(rep.to_json())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        append_jsonl(args.out, reports)


def cmd_finetune(args):
    tree, cfg, _ = _resolve(args)
    pools, _, dataset, roots = _pools(args)
    out = _prepare_out(args, tree, roots)
    from .harness.training import transfer_finetune

    result = transfer_finetune(args.checkpoint, pools["train"], pools["test"], cfg,
                               zero_finetune=args.zero_finetune, n_way=args.n_way, k_shot=args.k_shot,
                               n_query=args.n_query, n_episodes=args.episodes, out_dir=out, dataset=dataset)
    append_jsonl(out / "records.jsonl", [result.record])
    print(result.record.metrics)


def cmd_sweep(args):
    tree, cfg, model_over = _resolve(args)
    pools, n_classes, dataset, roots = _pools(args)
    out = _prepare_out(args, tree, roots)
    from .harness.training import limited_samples_sweep

    counts = [None if c == "full" else int(c) for c in args.counts.split(",")]
    records = limited_samples_sweep(args.archs.split(","), pools["train"], pools["test"], counts, cfg,
                                    lambda arch, n: _model_config(arch, n, model_over), dataset)
    append_jsonl(out / "records.jsonl", records)
    report(records, "csv", out)
    report(records, "plot", out)
    for r in records:
        print(r.arch, r.config["samples_per_class"], r.metrics)


def cmd_report(args):
    items = [it for path in args.records for it in read_jsonl(path)]
    for fmt in args.format:
        for path in report(items, fmt, args.out):
            print(f"wrote {path}")


def cmd_selftest(args):
    from .harness.selftest import run_selftest

    results = run_selftest(args.seed, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _add_data(p):
    p.add_argument("--manifest", help="manifest file from prepare-splits")
    p.add_argument("--synthetic", metavar="SPEAKERS,UTTERANCES",
                   help="use the in-memory synthetic tone corpus instead of a manifest")
    p.add_argument("--cache", help="spectrogram cache directory (default $FSSR_CACHE_DIR)")


def _add_config(p):
    p.add_argument("--config", action="append", help="key = value file; repeatable, later files win")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override, e.g. train.learning_rate=1e-3 or model.embedding_dim=128")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fssr", description="Few-shot speaker identification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-splits", help="build a train/test manifest")
    p.add_argument("--dataset", choices=("voxceleb", "vctk", "synthetic"), required=True)
    p.add_argument("--root", required=True, help="dataset root (written to for --dataset synthetic)")
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--k-per-class", type=int, default=5, help="0 keeps every training file")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--n-speakers", type=int, default=20)
    p.add_argument("--n-utterances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_splits)

    p = sub.add_parser("spectrogram", help="compute one normalized spectrogram file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--offset", type=float, default=None, help="crop start in seconds (random if omitted)")
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--loop", action="store_true", help="loop clips shorter than --duration")
    p.add_argument("--plot", help="also render the spectrogram to this image file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_spectrogram)

    for name, func, help_ in (("train", cmd_train, "supervised classification training"),
                              ("episodic-train", cmd_episodic_train, "prototypical-loss episodic training")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--arch", choices=ARCHS, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        _add_data(p)
        _add_config(p)
        if name == "episodic-train":
            p.add_argument("--n-way", type=int, default=5)
            p.add_argument("--k-shot", type=int, default=1)
            p.add_argument("--n-query", type=int, default=5)
            p.add_argument("--capsule-classes", type=int, default=None,
                           help="class-capsule count for capsule archs (default: number of speakers)")
            p.add_argument("--validate-on-test", action="store_true",
                           help="use the test split for held-out episodes instead of holding out speakers")
        p.set_defaults(func=func)

    p = sub.add_parser("fewshot-eval", help="N-way K-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--distance", default="sq_euclidean", choices=("sq_euclidean", "euclidean", "cosine"))
    p.add_argument("--mode", default="frozen", choices=("frozen", "finetune"))
    p.add_argument("--grid", action="store_true", help="run the 5/20-way x 1/5-shot grid")
    p.add_argument("--out", help="append JSON lines to this file")
    p.add_argument("--seed", type=int, default=0)
    _add_data(p)
    p.set_defaults(func=cmd_fewshot_eval)

    p = sub.add_parser("finetune", help="transfer a checkpoint to another corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-finetune", action="store_true", help="few-shot evaluate without training")
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    _add_data(p)
    _add_config(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="limited samples-per-class sweep")
    p.add_argument("--archs", default="vgg_m,resnet34,capsnet_m")
    p.add_argument("--counts", default="10,20,full", help="comma list; 'full' = all training items")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_data(p)
    _add_config(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render tables, CSV and figures from records")
    p.add_argument("records", nargs="+", help="records.jsonl / evaluation JSON-lines files")
    p.add_argument("--format", action="append", choices=FORMATS, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the toy training run")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except FSSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
