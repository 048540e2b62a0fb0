"""Command-line entry point: ``dmskit {synth,labels,train,eval,similarity,bench}``.

Exit status is 0 on success, 1 on a usage error and 2 on a data or
validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .core import ClipError, Modality
from .data import LabelError, ManifestError, Split, SynthConfig, load_manifest, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("dmskit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _unit_interval(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"{x} is outside [0, 1]")
    return x


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {n}")
    return n


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmskit", description="Driver-monitoring toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic open-set dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-class", type=_positive_int, default=50)
    s.add_argument("--test-per-class", type=_positive_int, default=None)
    s.add_argument("--modalities", default=",".join(m.value for m in Modality))
    s.add_argument("--frozen", action="store_true", help="repeat one frame per clip")
    s.add_argument("--force", action="store_true")

    lab = sub.add_parser("labels", help="label utilities")
    lsub = lab.add_subparsers(dest="action", required=True, parser_class=_Parser)
    conv = lsub.add_parser("convert", help="print the merged class of every manifest record")
    conv.add_argument("--manifest", type=Path, required=True)
    conv.add_argument("--split", choices=[s.value for s in Split], required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--rule", choices=["gamma", "two-threshold"], default="gamma")
    e.add_argument("--gamma", type=_unit_interval, default=None)
    e.add_argument("--t1", type=_unit_interval, default=None)
    e.add_argument("--t2", type=_unit_interval, default=None)
    e.add_argument("--stride", type=_positive_int, default=None)
    e.add_argument("--sweep", type=Path, default=None, help="also write a gamma sweep (flat head only)")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--force", action="store_true")

    sim = sub.add_parser("similarity", help="consecutive-frame similarity table")
    sim.add_argument("--manifest", type=Path, required=True)
    sim.add_argument("--out", type=Path, required=True, help="CSV path; a .json twin is written beside it")
    sim.add_argument("--workers", type=int, default=0)
    sim.add_argument("--force", action="store_true")

    b = sub.add_parser("bench", help="FLOPs and latency of a configured model")
    b.add_argument("--config", type=Path, required=True)
    b.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--runs", type=_positive_int, default=None)
    b.add_argument("--warmup", type=int, default=None)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--force", action="store_true")
    return p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def cmd_synth(args) -> int:
    _check_out(args.out / "train.csv", args.force)
    mods = tuple(Modality.parse(s) for s in args.modalities.split(",") if s.strip())
    cfg = SynthConfig(args.out, args.per_class, args.test_per_class, seed=args.seed, modalities=mods,
                      frozen=args.frozen)
    train, test = synth_generate(cfg)
    print(f"train: {train.path} ({len(train.records)} records)")
    print(f"test: {test.path} ({len(test.records)} records)")
    return EXIT_OK


def cmd_labels(args) -> int:
    manifest = load_manifest(args.manifest, args.split, check_frames=False)
    for r in manifest.records:
        print(f"{r.video_id},{r.frame_start},{r.frame_end},{r.activity},{manifest.label_of(r)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config, train_config
    from .training import train

    overrides = list(args.override) + ([f"seed={args.seed}"] if args.seed is not None else [])
    cfg = train_config(load_config(args.config, overrides))
    _check_out(Path(cfg.out_dir) / "final.ckpt", args.force)
    result = train(cfg)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint: {result.best_checkpoint}")
    if result.train_accuracy is not None:
        print(f"train accuracy: {result.train_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import EVAL_STRIDE
    from .evaluate import check_rule, gamma_sweep, report_from_scores, score_windows
    from .models import HeadType
    from .training import load_checkpoint

    if args.rule == "gamma":
        if args.t1 is not None or args.t2 is not None:
            raise UsageError("--t1/--t2 belong to the two-threshold rule")
        gamma = 0.5 if args.gamma is None else args.gamma
        t1 = t2 = 0.5
    else:
        if args.gamma is not None:
            raise UsageError("--gamma belongs to the gamma rule")
        if args.t1 is None or args.t2 is None:
            raise UsageError("the two-threshold rule needs both --t1 and --t2")
        gamma, t1, t2 = 0.5, args.t1, args.t2
    _check_out(args.out, args.force)
    if args.sweep is not None:
        _check_out(args.sweep, args.force)

    model, header = load_checkpoint(args.checkpoint)
    try:
        check_rule(model.spec.head, args.rule)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = load_manifest(args.manifest)
    stats = header.get("meta", {}).get("stats") or manifest.stats
    scores, truths = score_windows(model, manifest, args.stride or EVAL_STRIDE, stats)
    seed = int(header.get("meta", {}).get("seed", 0))
    report = report_from_scores(scores, truths, args.rule, gamma, t1, t2, model.spec.head,
                                config_hash=model.spec.config_hash(), seed=seed)
    _write_json(args.out, report.to_json())
    if args.sweep is not None:
        if model.spec.head is not HeadType.FLAT_SOFTMAX:
            raise UsageError("--sweep needs a flat-softmax head")
        _write_json(args.sweep, gamma_sweep(scores, truths))
    print(f"accuracy {report.accuracy:.4f}  seen {report.seen_accuracy}  unseen recall {report.unseen_recall}"
          f"  auc-roc {report.auc_roc}  auc-pr {report.auc_pr}")
    return EXIT_OK


def cmd_similarity(args) -> int:
    from .analysis import similarity_report

    json_out = args.out.with_suffix(".json")
    _check_out(args.out, args.force)
    _check_out(json_out, args.force)
    table = similarity_report(load_manifest(args.manifest), workers=args.workers)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.out)
    table.write_json(json_out)
    print(f"wrote {args.out} and {json_out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import DEFAULT_CLIP_SHAPE, bench_report
    from .config import bench_settings, load_config, model_spec

    _check_out(args.out, args.force)
    values = load_config(args.config, args.override)
    settings = bench_settings(values)
    runs = args.runs if args.runs is not None else settings["runs"]
    warmup = args.warmup if args.warmup is not None else settings["warmup"]
    if warmup < 0:
        raise UsageError("--warmup must be non-negative")
    seed = args.seed if args.seed is not None else settings["seed"]
    report = bench_report(model_spec(values), settings.get("input_shape", DEFAULT_CLIP_SHAPE), runs, warmup, seed)
    _write_json(args.out, report)
    stats = report["latency_stats"]
    print(f"flops {report['flops']}  mean {stats['mean']:.4f} s  realtime {report['realtime']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "labels": cmd_labels,
    "train": cmd_train,
    "eval": cmd_eval,
    "similarity": cmd_similarity,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    from .config import ConfigError
    from .models import EncoderWeightsError
    from .training import CheckpointError, TrainingError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dmskit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, LabelError, ConfigError, CheckpointError, TrainingError, EncoderWeightsError,
            ClipError, ValueError, OSError) as exc:
        print(f"dmskit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
