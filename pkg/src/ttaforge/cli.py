"""Command-line front end.

Subcommands:

    ttaforge prepare --out-dir DIR        generate a toy task, fit and save a
                                          source model plus dataset files
    ttaforge stats --model M --data D     compute and save source statistics
    ttaforge run --config FILE            run a benchmark grid, write a CSV
    ttaforge sweep --config FILE --axis A sweep one hyperparameter axis

Exits 0 on success and 1 with a one-line diagnostic on bad inputs, bad
files or failed configuration. Argument errors exit 2 (argparse default).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .backbone import load_model, model_features, save_model, train_source_model, VisionTransformer, ArchConfig
from .bench import ConfigError, RunConfig, parse_config, plot_sweep, run_experiment, sweep, SWEEP_AXES
from .container import ContainerError
from .data import GeneratorSpec, gen_synthetic_dataset, load_dataset, save_dataset
from .stats import normalize_features, save_statistics, source_statistics


def _add_run_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", help="comma-separated methods, overrides the config")
    p.add_argument("--lambda", dest="lam", type=float, help="class-centroid loss weight")
    p.add_argument("--k-moments", type=int, help="highest central-moment order")
    p.add_argument("--lr", type=float, help="adaptation learning rate")
    p.add_argument("--batch-size", type=int, help="target stream batch size")
    p.add_argument("--clip", help="gradient clipping norm, or 'off'")
    p.add_argument("--modulation", choices=("ln", "cls", "feature", "all"), help="parameter group to update")
    p.add_argument("--seeds", help="seed count or comma-separated seed list")
    p.add_argument("--stats-path", help="precomputed source statistics file")
    p.add_argument("--jobs", type=int, help="parallel runs")
    p.add_argument("--out", help="CSV output path")


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    if args.method:
        cfg.methods = tuple(m.strip() for m in args.method.split(",") if m.strip())
    if args.lam is not None:
        cfg.lam = args.lam
    if args.k_moments is not None:
        cfg.k_moments = args.k_moments
    if args.lr is not None:
        cfg.lr = args.lr
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.clip is not None:
        cfg.clip = None if args.clip.lower() in ("off", "none") else float(args.clip)
    if args.modulation is not None:
        cfg.modulation = args.modulation
    if args.seeds is not None:
        parts = [s.strip() for s in args.seeds.split(",") if s.strip()]
        cfg.seeds = tuple(range(int(parts[0]))) if len(parts) == 1 else tuple(int(s) for s in parts)
    if args.stats_path is not None:
        cfg.stats_path = args.stats_path
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()


def _cmd_prepare(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    spec = GeneratorSpec(n_classes=args.classes, per_class=args.train_per_class)
    source = gen_synthetic_dataset(spec, seed=args.seed)
    target = gen_synthetic_dataset(
        GeneratorSpec(n_classes=args.classes, per_class=args.test_per_class), seed=args.seed + 1
    )
    model = VisionTransformer(ArchConfig(n_classes=args.classes), seed=args.seed)
    losses = train_source_model(model, source.images, source.labels, steps=args.train_steps, seed=args.seed)
    err = 100.0 * float(np.mean(model.predict(source.images) != source.labels))
    save_model(model, os.path.join(args.out_dir, "model.ckpt"))
    save_dataset(source, os.path.join(args.out_dir, "source.ds"))
    save_dataset(target, os.path.join(args.out_dir, "target.ds"))
    print(
        f"prepared {args.out_dir}: model.ckpt source.ds target.ds "
        f"(final train loss {losses[-1]:.4f}, source error {err:.2f}%)"
    )
    return 0


def _cmd_stats(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    feats = model_features(model, dataset.images)
    stats = source_statistics(normalize_features(feats), dataset.labels, args.k, model.arch.n_classes)
    save_statistics(stats, args.out)
    print(f"wrote {args.out}: D={stats.d} K={stats.k_max} C={stats.n_classes} from {len(dataset)} samples")
    return 0


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    _apply_overrides(cfg, args)
    report = run_experiment(cfg)
    print(report.render())
    if cfg.out:
        print(f"wrote {cfg.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    _apply_overrides(cfg, args)
    report = sweep(cfg, args.axis)
    print(report.render())
    if cfg.out:
        print(f"wrote {cfg.out}")
    if args.plot:
        plot_sweep(report, args.plot)
        print(f"wrote {args.plot}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ttaforge", description="test-time adaptation benchmark tool")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate a toy task and fit a source model")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--train-per-class", type=int, default=64)
    p.add_argument("--test-per-class", type=int, default=512)
    p.add_argument("--train-steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_prepare)

    p = sub.add_parser("stats", help="compute source statistics from a checkpoint and dataset")
    p.add_argument("--model", required=True, help="model checkpoint file")
    p.add_argument("--data", required=True, help="source dataset file")
    p.add_argument("--k", type=int, default=3, help="highest central-moment order to store")
    p.add_argument("--out", required=True, help="statistics output file")
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("run", help="run a benchmark config")
    p.add_argument("--config", required=True)
    _add_run_overrides(p)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=tuple(SWEEP_AXES))
    p.add_argument("--plot", help="write a line-chart PNG to this path")
    _add_run_overrides(p)
    p.set_defaults(fn=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContainerError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
