"""Synthetic image tasks and corruption streams for adaptation experiments.

The generator draws small oriented-grating images: each class owns a grating
direction, and samples of a class vary in amplitude plus additive pixel
jitter. The task is easy for the tiny backbone when clean, and its accuracy
decays smoothly as test-time corruption grows, which is exactly the regime
the benchmark needs.

Corruptions are applied to copies, never in place, and severity 0 is always
the identity. Gaussian-noise severities follow a fixed std ladder; contrast
scales each image toward its own mean; brightness adds a constant. All
randomness flows through explicitly seeded PCG64 generators so reruns are
bit-identical on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterator, NamedTuple

import numpy as np

from .container import ContainerError, read_container, write_container

__all__ = [
    "GeneratorSpec",
    "Dataset",
    "gen_synthetic_dataset",
    "CORRUPTION_KINDS",
    "CorruptionSpec",
    "gaussian_noise_std",
    "sample_gaussian_noise",
    "contrast_factor",
    "brightness_offset",
    "corrupt",
    "Batch",
    "batches",
    "save_dataset",
    "load_dataset",
]

CORRUPTION_KINDS = ("gaussian_noise", "contrast", "brightness", "identity")

# Noise std per severity 1..8; pixel values live in [-1, 1].
_GAUSSIAN_STD = (0.08, 0.12, 0.18, 0.26, 0.38, 0.50, 0.60, 0.70)

# Contrast multiplier toward the per-image mean, and brightness offsets.
_CONTRAST = (0.75, 0.60, 0.50, 0.40, 0.30, 0.22, 0.15, 0.08)
_BRIGHTNESS = (0.08, 0.14, 0.20, 0.28, 0.36, 0.44, 0.52, 0.60)


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic task generator."""

    n_classes: int = 3
    per_class: int = 64
    image_size: int = 8
    channels: int = 3
    amplitude: float = 0.70
    amplitude_jitter: float = 0.15
    pixel_jitter: float = 0.10
    frequency: float = 1.5

    def __post_init__(self):
        if not 2 <= self.n_classes <= 10:
            raise ValueError("n_classes must lie in [2, 10]")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")


@dataclass
class Dataset:
    """Images in [-1, 1] with integer labels and free-form metadata."""

    images: np.ndarray
    labels: np.ndarray
    metadata: dict

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must have shape (N, H, W, C)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one integer per image")

    def __len__(self) -> int:
        return self.images.shape[0]


def gen_synthetic_dataset(spec: GeneratorSpec, seed: int = 0) -> Dataset:
    """Draw a class-balanced grating dataset, deterministic in (spec, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")

    images = np.empty((spec.n_classes * spec.per_class, s, s, spec.channels))
    labels = np.empty(spec.n_classes * spec.per_class, dtype=np.int64)
    row = 0
    for c in range(spec.n_classes):
        theta = np.pi * c / spec.n_classes
        phase = 2.0 * np.pi * spec.frequency * (xx * np.cos(theta) + yy * np.sin(theta)) / s
        base = np.cos(phase)
        for _ in range(spec.per_class):
            amp = spec.amplitude + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
            img = amp * base + rng.normal(0.0, spec.pixel_jitter, (s, s))
            images[row] = np.clip(img, -1.0, 1.0)[:, :, None]
            labels[row] = c
            row += 1
    return Dataset(images=images, labels=labels, metadata={"spec": asdict(spec), "seed": int(seed)})


@dataclass(frozen=True)
class CorruptionSpec:
    """A corruption kind plus severity in 0..8; severity 0 means identity."""

    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}, expected one of {CORRUPTION_KINDS}")
        if not 0 <= self.severity <= 8:
            raise ValueError(f"severity must lie in 0..8, got {self.severity}")


def gaussian_noise_std(severity: int) -> float:
    """Noise std for a severity level; 0.0 at severity 0."""
    if not 0 <= severity <= 8:
        raise ValueError(f"severity must lie in 0..8, got {severity}")
    return 0.0 if severity == 0 else _GAUSSIAN_STD[severity - 1]


def contrast_factor(severity: int) -> float:
    if not 0 <= severity <= 8:
        raise ValueError(f"severity must lie in 0..8, got {severity}")
    return 1.0 if severity == 0 else _CONTRAST[severity - 1]


def brightness_offset(severity: int) -> float:
    if not 0 <= severity <= 8:
        raise ValueError(f"severity must lie in 0..8, got {severity}")
    return 0.0 if severity == 0 else _BRIGHTNESS[severity - 1]


def sample_gaussian_noise(shape: tuple[int, ...], severity: int, seed: int) -> np.ndarray:
    """The exact noise field ``corrupt`` would add, before any clipping."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(shape) * gaussian_noise_std(severity)


def corrupt(images: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply a corruption at a severity to a copy of ``images``.

    Outputs are clipped back to [-1, 1]. The input array is never modified.
    """
    x = np.asarray(images, dtype=np.float64)
    if spec.severity == 0 or spec.kind == "identity":
        return x.copy()
    if spec.kind == "gaussian_noise":
        noise = sample_gaussian_noise(x.shape, spec.severity, seed)
        return np.clip(x + noise, -1.0, 1.0)
    if spec.kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        return np.clip(mean + contrast_factor(spec.severity) * (x - mean), -1.0, 1.0)
    if spec.kind == "brightness":
        return np.clip(x + brightness_offset(spec.severity), -1.0, 1.0)
    raise ValueError(f"unknown corruption kind {spec.kind!r}")


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


def batches(dataset: Dataset, batch_size: int, seed: int = 0) -> Iterator[Batch]:
    """One shuffled pass over the dataset; the last batch may be short.

    Every sample appears exactly once per pass. Labels ride along for
    evaluation only; adaptation never reads them.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(images=dataset.images[idx], labels=dataset.labels[idx])


def save_dataset(dataset: Dataset, path: str) -> None:
    write_container(
        path,
        {"kind": "dataset", "metadata": dataset.metadata},
        {"images": dataset.images, "labels": dataset.labels},
    )


def load_dataset(path: str) -> Dataset:
    meta, arrays = read_container(path)
    if meta.get("kind") != "dataset":
        raise ContainerError(f"{path}: not a dataset file (kind={meta.get('kind')!r})")
    return Dataset(images=arrays["images"], labels=arrays["labels"], metadata=meta.get("metadata", {}))
