"""Shared fixtures and oracles for the test suite.

The finite-difference checker here is the independent oracle for every
analytic gradient in the package: it re-evaluates the loss under central
perturbations of each parameter entry and never touches the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pytest

from ttaforge.autodiff import Tensor
from ttaforge.backbone import ArchConfig, VisionTransformer, model_features, train_source_model
from ttaforge.data import Dataset, GeneratorSpec, gen_synthetic_dataset
from ttaforge.methods import tfa_source_statistics
from ttaforge.stats import SourceStatistics, normalize_features, source_statistics


def fd_gradients(
    loss_fn: Callable[[], float], params: dict[str, Tensor], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. every entry of ``params``.

    ``loss_fn`` must read the live parameter arrays each call; entries are
    perturbed in place and restored.
    """
    out: dict[str, np.ndarray] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            grad[i] = (lp - lm) / (2.0 * h)
        out[name] = grad.reshape(t.data.shape)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst relative error, with a floor so near-zero gradients compare absolutely."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / scale).max())


@dataclass
class ToyTask:
    """A trained source model plus datasets and statistics, shared by tests."""

    model: VisionTransformer
    source: Dataset
    target: Dataset
    src_stats: SourceStatistics
    src_stats_raw: SourceStatistics
    tfa_stats: object
    source_features: np.ndarray


def _build_toy_task(test_per_class: int) -> ToyTask:
    source = gen_synthetic_dataset(GeneratorSpec(n_classes=3, per_class=64), seed=0)
    target = gen_synthetic_dataset(GeneratorSpec(n_classes=3, per_class=test_per_class), seed=1)
    model = VisionTransformer(ArchConfig(), seed=0)
    train_source_model(model, source.images, source.labels, steps=400, seed=0)
    feats = model_features(model, source.images)
    return ToyTask(
        model=model,
        source=source,
        target=target,
        src_stats=source_statistics(normalize_features(feats), source.labels, k_max=5, n_classes=3),
        src_stats_raw=source_statistics(feats, source.labels, k_max=5, n_classes=3),
        tfa_stats=tfa_source_statistics(feats),
        source_features=feats,
    )


@pytest.fixture(scope="session")
def toy_task() -> ToyTask:
    """Small target split for unit tests."""
    return _build_toy_task(test_per_class=128)


@pytest.fixture(scope="session")
def bench_task() -> ToyTask:
    """Large target split (96 batches of 64) for the acceptance experiments."""
    return _build_toy_task(test_per_class=2048)
