"""Benchmark harness: corruption-severity grids over adaptation methods.

``run_experiment`` owns the whole pipeline for one configuration: generate
the synthetic task, fit a source model, compute (or load) source statistics,
then run every (method, corruption, severity) cell over the requested seeds.
Each run gets a fresh copy of the source model, so cells never leak state
into each other, and every random draw is seeded from the cell's own
coordinates, so deleting a cell from the config cannot change any other
cell's numbers.

Seeds shuffle the target stream order; the corrupted images themselves are
fixed per (corruption, severity), mirroring a frozen corrupted test set. A
run that aborts on a non-finite loss is scored as 100% error and flagged in
the report instead of failing the sweep.

Reports render as text with the exact update-rule and objective formulas in
the header, and serialize to a schema-stable CSV: one row per cell per seed
plus one aggregate row per cell, identical bytes for identical configs.
"""

from __future__ import annotations

import concurrent.futures
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .backbone import ArchConfig, VisionTransformer, model_features, train_source_model
from .data import (
    CORRUPTION_KINDS,
    CorruptionSpec,
    Dataset,
    GeneratorSpec,
    batches,
    corrupt,
    gen_synthetic_dataset,
)
from .methods import AdaptConfig, adapt_online, normalize_method, tfa_source_statistics
from .stats import load_statistics, normalize_features, source_statistics

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "Aggregate",
    "aggregate",
    "CellResult",
    "RunReport",
    "run_experiment",
    "SWEEP_AXES",
    "sweep",
    "plot_sweep",
    "REPORT_NOTES",
    "CSV_HEADER",
]

REPORT_NOTES = (
    "optimizer: v <- momentum*v + grad; p <- p - lr*v (classic momentum, global-norm clipped)",
    "shot-im objective: mean softmax entropy + sum_c m_c*log(m_c), m = batch-mean prediction",
    "errors are top-1, percent, over one pass of the shuffled target stream",
)

CSV_HEADER = "method,corruption,severity,variant,seed,top1_error,std,catastrophic"


class ConfigError(ValueError):
    """A benchmark configuration that cannot be run."""


@dataclass
class RunConfig:
    """Everything a benchmark run depends on, flat and serializable."""

    # synthetic task
    classes: int = 3
    train_per_class: int = 64
    test_per_class: int = 512
    image_size: int = 8
    channels: int = 3
    amplitude: float = 0.70
    frequency: float = 1.5
    pixel_jitter: float = 0.10
    data_seed: int = 0
    # backbone and source fit
    d_model: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_size: int = 4
    model_seed: int = 0
    train_steps: int = 400
    train_lr: float = 0.05
    train_batch_size: int = 32
    # adaptation protocol
    methods: tuple[str, ...] = ("source", "cfa")
    corruptions: tuple[str, ...] = ("gaussian_noise",)
    severities: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    seeds: tuple[int, ...] = (0, 1, 2)
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float | None = 1.0
    batch_size: int = 64
    lam: float = 1.0
    k_moments: int = 3
    modulation: str = "ln"
    normalize: bool = True
    tfa_beta1: float = 1.0
    tfa_beta2: float = 1.0
    t3a_filter_size: int = 100
    # io and execution
    stats_path: str | None = None
    out: str | None = None
    jobs: int = 1

    def validate(self) -> None:
        self.methods = tuple(normalize_method(m) for m in self.methods)
        for c in self.corruptions:
            if c not in CORRUPTION_KINDS:
                raise ConfigError(f"unknown corruption {c!r}, expected one of {CORRUPTION_KINDS}")
        for s in self.severities:
            if not 0 <= int(s) <= 8:
                raise ConfigError(f"severity {s} outside 0..8")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be positive")


_BOOL = {"on": True, "true": True, "1": True, "yes": True, "off": False, "false": False, "0": False, "no": False}

# config-file key -> attribute, parser
def _seq(cast):
    return lambda v: tuple(cast(x.strip()) for x in v.split(",") if x.strip())


def _parse_seeds(v: str) -> tuple[int, ...]:
    parts = [x.strip() for x in v.split(",") if x.strip()]
    if len(parts) == 1 and "," not in v:
        return tuple(range(int(parts[0])))
    return tuple(int(x) for x in parts)


def _parse_clip(v: str) -> float | None:
    return None if v.strip().lower() in ("off", "none") else float(v)


_KEYS: dict[str, tuple[str, object]] = {
    "classes": ("classes", int),
    "train_per_class": ("train_per_class", int),
    "test_per_class": ("test_per_class", int),
    "image_size": ("image_size", int),
    "channels": ("channels", int),
    "amplitude": ("amplitude", float),
    "frequency": ("frequency", float),
    "pixel_jitter": ("pixel_jitter", float),
    "data_seed": ("data_seed", int),
    "d_model": ("d_model", int),
    "depth": ("depth", int),
    "heads": ("heads", int),
    "mlp_ratio": ("mlp_ratio", float),
    "patch_size": ("patch_size", int),
    "model_seed": ("model_seed", int),
    "train_steps": ("train_steps", int),
    "train_lr": ("train_lr", float),
    "train_batch_size": ("train_batch_size", int),
    "methods": ("methods", _seq(str)),
    "corruptions": ("corruptions", _seq(str)),
    "severities": ("severities", _seq(int)),
    "seeds": ("seeds", _parse_seeds),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "clip": ("clip", _parse_clip),
    "batch_size": ("batch_size", int),
    "lambda": ("lam", float),
    "k_moments": ("k_moments", int),
    "modulation": ("modulation", str),
    "normalize": ("normalize", lambda v: _BOOL[v.strip().lower()]),
    "tfa_beta1": ("tfa_beta1", float),
    "tfa_beta2": ("tfa_beta2", float),
    "t3a_filter_size": ("t3a_filter_size", int),
    "stats_path": ("stats_path", str),
    "out": ("out", str),
    "jobs": ("jobs", int),
}


def parse_config(path: str) -> RunConfig:
    """Read a flat ``key = value`` file; '#' starts a comment, unknown keys error."""
    cfg = RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        attr, cast = _KEYS[key]
        try:
            setattr(cfg, attr, cast(value))
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r} ({e})") from e
    cfg.validate()
    return cfg


class Aggregate(NamedTuple):
    mean: float
    std: float
    single_seed: bool


def aggregate(values) -> Aggregate:
    """Mean and unbiased standard deviation; a single value is flagged, std 0."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty list")
    if arr.size == 1:
        return Aggregate(mean=float(arr[0]), std=0.0, single_seed=True)
    return Aggregate(mean=float(arr.mean()), std=float(arr.std(ddof=1)), single_seed=False)


@dataclass
class CellResult:
    method: str
    corruption: str
    severity: int
    variant: str
    seed_errors: list[float]
    catastrophic: list[bool]
    mean: float
    std: float
    single_seed: bool


@dataclass
class RunReport:
    cells: list[CellResult]
    config: RunConfig
    notes: tuple[str, ...] = REPORT_NOTES
    wallclock: float = 0.0

    def cell(self, method: str, corruption: str, severity: int, variant: str = "") -> CellResult:
        for c in self.cells:
            if (c.method, c.corruption, c.severity, c.variant) == (method, corruption, severity, variant):
                return c
        raise KeyError(f"no cell ({method}, {corruption}, {severity}, {variant!r})")

    def csv_lines(self) -> list[str]:
        lines = [CSV_HEADER]
        for c in self.cells:
            for seed, err, bad in zip(self.config.seeds, c.seed_errors, c.catastrophic):
                lines.append(
                    f"{c.method},{c.corruption},{c.severity},{c.variant},{seed},{err:.6f},,{int(bad)}"
                )
            lines.append(
                f"{c.method},{c.corruption},{c.severity},{c.variant},mean,{c.mean:.6f},{c.std:.6f},{int(any(c.catastrophic))}"
            )
        return lines

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")

    def render(self) -> str:
        lines = ["benchmark report"]
        lines += [f"# {n}" for n in self.notes]
        lines.append(
            f"# task: {self.config.classes} classes, {self.config.test_per_class}/class target, "
            f"batch {self.config.batch_size}, lr {self.config.lr:g}, modulation {self.config.modulation}"
        )
        lines.append(f"# seeds: {list(self.config.seeds)}, wallclock {self.wallclock:.1f}s")
        width = max((len(c.method) + len(c.variant) for c in self.cells), default=10) + 2
        for c in self.cells:
            tag = f"{c.method}{' ' + c.variant if c.variant else ''}"
            flag = " [failed]" if any(c.catastrophic) else ""
            star = " (single seed)" if c.single_seed else ""
            lines.append(
                f"{tag:<{width}} {c.corruption:>14} s{c.severity}  {c.mean:6.2f} +- {c.std:5.2f}{star}{flag}"
            )
        return "\n".join(lines)


def _stable_seed(*parts) -> int:
    """Platform-stable seed derived from string content, not object identity."""
    return zlib.crc32(":".join(str(p) for p in parts).encode("utf-8")) & 0x7FFFFFFF


def _generator_spec(cfg: RunConfig, per_class: int) -> GeneratorSpec:
    return GeneratorSpec(
        n_classes=cfg.classes,
        per_class=per_class,
        image_size=cfg.image_size,
        channels=cfg.channels,
        amplitude=cfg.amplitude,
        frequency=cfg.frequency,
        pixel_jitter=cfg.pixel_jitter,
    )


def _prepare(cfg: RunConfig):
    """Generate data, fit the source model, build statistics. Deterministic."""
    arch = ArchConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        channels=cfg.channels,
        d_model=cfg.d_model,
        depth=cfg.depth,
        n_heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        n_classes=cfg.classes,
    )
    source = gen_synthetic_dataset(_generator_spec(cfg, cfg.train_per_class), seed=cfg.data_seed)
    target = gen_synthetic_dataset(_generator_spec(cfg, cfg.test_per_class), seed=cfg.data_seed + 1)
    model = VisionTransformer(arch, seed=cfg.model_seed)
    train_source_model(
        model,
        source.images,
        source.labels,
        steps=cfg.train_steps,
        lr=cfg.train_lr,
        batch_size=cfg.train_batch_size,
        seed=cfg.model_seed,
    )

    needs_cfa = any(m.startswith("cfa") for m in cfg.methods)
    needs_tfa = "tfa" in cfg.methods
    src_stats = None
    tfa_stats = None
    if needs_cfa or needs_tfa:
        feats = model_features(model, source.images)
        if needs_tfa:
            tfa_stats = tfa_source_statistics(feats)
        if needs_cfa:
            if cfg.stats_path:
                src_stats = load_statistics(cfg.stats_path)
                if src_stats.d != cfg.d_model or src_stats.n_classes != cfg.classes:
                    raise ConfigError(
                        f"statistics file {cfg.stats_path} is for D={src_stats.d}, C={src_stats.n_classes}; "
                        f"run needs D={cfg.d_model}, C={cfg.classes}"
                    )
                if src_stats.k_max < cfg.k_moments:
                    raise ConfigError(
                        f"statistics file stores moments up to {src_stats.k_max} but run needs {cfg.k_moments}"
                    )
            else:
                h = normalize_features(feats) if cfg.normalize else feats
                src_stats = source_statistics(h, source.labels, max(cfg.k_moments, 5), cfg.classes)
    return model, source, target, src_stats, tfa_stats


def _run_one(model0, target, cfg: RunConfig, method, corruption, severity, seed, src_stats, tfa_stats):
    images = corrupt(
        target.images,
        CorruptionSpec(corruption, severity),
        seed=_stable_seed("corr", corruption, severity, cfg.data_seed),
    )
    stream_ds = Dataset(images, target.labels, {})
    adapt = AdaptConfig(
        method=method,
        lr=cfg.lr,
        momentum=cfg.momentum,
        clip_norm=cfg.clip,
        lam=cfg.lam,
        k_moments=cfg.k_moments,
        modulation=cfg.modulation,
        normalize=cfg.normalize,
        tfa_beta1=cfg.tfa_beta1,
        tfa_beta2=cfg.tfa_beta2,
        t3a_filter_size=cfg.t3a_filter_size,
    )
    model = model0.copy()
    result = adapt_online(model, batches(stream_ds, cfg.batch_size, seed=seed), adapt, src_stats, tfa_stats)
    if result.failed:
        return 100.0, True
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(stream_ds))
    err = 100.0 * float(np.mean(result.flat_predictions() != target.labels[order]))
    return err, False


def run_experiment(cfg: RunConfig, variant: str = "") -> RunReport:
    """Run the full cell grid of a config; write the CSV when ``out`` is set."""
    cfg.validate()
    t0 = time.time()
    model, _, target, src_stats, tfa_stats = _prepare(cfg)

    tasks = [
        (method, corruption, int(severity), seed)
        for method in cfg.methods
        for corruption in cfg.corruptions
        for severity in cfg.severities
        for seed in cfg.seeds
    ]

    def work(task):
        method, corruption, severity, seed = task
        return _run_one(model, target, cfg, method, corruption, severity, seed, src_stats, tfa_stats)

    if cfg.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(work, tasks))
    else:
        outcomes = [work(t) for t in tasks]

    cells: list[CellResult] = []
    by_cell: dict[tuple, list[tuple[float, bool]]] = {}
    for task, outcome in zip(tasks, outcomes):
        by_cell.setdefault(task[:3], []).append(outcome)
    for (method, corruption, severity), rows in by_cell.items():
        errs = [e for e, _ in rows]
        flags = [f for _, f in rows]
        agg = aggregate(errs)
        cells.append(
            CellResult(
                method=method,
                corruption=corruption,
                severity=severity,
                variant=variant,
                seed_errors=errs,
                catastrophic=flags,
                mean=agg.mean,
                std=agg.std,
                single_seed=agg.single_seed,
            )
        )

    report = RunReport(cells=cells, config=cfg, wallclock=time.time() - t0)
    if cfg.out:
        report.write_csv(cfg.out)
    return report


SWEEP_AXES: dict[str, tuple] = {
    "lr": (1e-4, 1e-3, 1e-2),
    "batch_size": (32, 64, 128),
    "lambda": (0.5, 1.0, 2.0),
    "clip": (1.0, None),
}


def sweep(cfg: RunConfig, axis: str) -> RunReport:
    """One run per value of a hyperparameter axis, everything else at defaults."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {tuple(SWEEP_AXES)}")
    cfg.validate()
    t0 = time.time()
    all_cells: list[CellResult] = []
    for value in SWEEP_AXES[axis]:
        sub = replace(cfg, out=None)
        if axis == "lr":
            sub.lr = value
            tag = f"lr={value:g}"
        elif axis == "batch_size":
            sub.batch_size = value
            tag = f"batch_size={value}"
        elif axis == "lambda":
            sub.lam = value
            tag = f"lambda={value:g}"
        else:
            sub.clip = value
            tag = "clip=on" if value is not None else "clip=off"
        all_cells.extend(run_experiment(sub, variant=tag).cells)
    report = RunReport(cells=all_cells, config=cfg, wallclock=time.time() - t0)
    if cfg.out:
        report.write_csv(cfg.out)
    return report


def plot_sweep(report: RunReport, path: str) -> None:
    """Static per-axis line chart: mean error per method against the axis value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, dict[str, list[float]]] = {}
    for c in report.cells:
        series.setdefault(c.method, {}).setdefault(c.variant, []).append(c.mean)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, by_variant in sorted(series.items()):
        xs = list(by_variant)
        ys = [float(np.mean(v)) for v in by_variant.values()]
        ax.plot(range(len(xs)), ys, marker="o", label=method)
        ax.set_xticks(range(len(xs)), xs, rotation=20)
    ax.set_ylabel("top-1 error (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
