"""Feature statistics for alignment: bounded moments and class centroids.

Raw backbone features are unbounded, which makes their higher central
moments erratic from batch to batch. ``normalize_features`` therefore
squashes each feature vector with an affine-free layer norm followed by
tanh, so every coordinate lands strictly inside (-1, 1) and the order-k
central moments are bounded by 2**k.

``source_statistics`` summarizes a labeled source set once, offline;
``batch_statistics`` computes the same quantities for an unlabeled batch
under pseudo-labels. Both share one moment kernel so that feeding the
source set to the batch path reproduces the stored statistics exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .container import ContainerError, read_container, write_container

__all__ = [
    "normalize_features",
    "SourceStatistics",
    "TargetBatchStatistics",
    "source_statistics",
    "batch_statistics",
    "save_statistics",
    "load_statistics",
]


def normalize_features(features: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Map each row through an affine-free layer norm and tanh.

    Output entries are strictly inside (-1, 1); a constant row maps to zeros.
    Routed through the same graph ops the adaptation losses use, so the two
    paths agree bit for bit.
    """
    f = np.asarray(features, dtype=np.float64)
    with ad.no_grad():
        return ad.tanh(ad.ln_no_affine(ad.Tensor(f), eps)).data


def _moments(h: np.ndarray, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean plus elementwise central moments of orders 2..k_max, two-pass."""
    mu = h.mean(axis=0)
    if k_max >= 2:
        moms = np.stack([((h - mu) ** k).mean(axis=0) for k in range(2, k_max + 1)])
    else:
        moms = np.zeros((0, h.shape[1]))
    return mu, moms


@dataclass
class SourceStatistics:
    """Offline summary of normalized source features.

    central_moments has one row per order, k = 2 .. k_max; row j holds the
    elementwise moment of order j + 2. counts[c] is the number of source
    samples with label c.
    """

    mu: np.ndarray
    central_moments: np.ndarray
    class_centroids: np.ndarray
    counts: np.ndarray
    k_max: int

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_centroids.shape[0]

    def moment(self, k: int) -> np.ndarray:
        if not 2 <= k <= self.k_max:
            raise ValueError(f"moment order {k} outside stored range 2..{self.k_max}")
        return self.central_moments[k - 2]


@dataclass
class TargetBatchStatistics:
    """Same summary for one unlabeled batch, with centroids keyed by pseudo-class.

    Only pseudo-classes that actually occur in the batch appear in
    class_centroids; the loss that consumes them averages over that subset.
    """

    mu: np.ndarray
    central_moments: np.ndarray
    class_centroids: dict[int, np.ndarray]
    k_max: int


def source_statistics(features: np.ndarray, labels: np.ndarray, k_max: int, n_classes: int) -> SourceStatistics:
    """Build source statistics from (already normalized) features and labels.

    Every class in range(n_classes) must occur at least once; a class with
    no samples would leave its centroid undefined, so that is an error here
    rather than a silent NaN later.
    """
    h = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"features must be a non-empty (N, D) array, got shape {h.shape}")
    if labels.shape != (h.shape[0],):
        raise ValueError("labels must be one integer per feature row")
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels outside range(n_classes)")

    mu, moms = _moments(h, k_max)
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"classes with no source samples: {missing.tolist()}")
    centroids = np.stack([h[labels == c].mean(axis=0) for c in range(n_classes)])
    return SourceStatistics(
        mu=mu, central_moments=moms, class_centroids=centroids, counts=counts.astype(np.int64), k_max=int(k_max)
    )


def batch_statistics(features: np.ndarray, pseudo_labels: np.ndarray, k_max: int) -> TargetBatchStatistics:
    """Summarize one batch with whatever pseudo-classes it contains."""
    h = np.asarray(features, dtype=np.float64)
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"features must be a non-empty (N, D) array, got shape {h.shape}")
    if pseudo.shape != (h.shape[0],):
        raise ValueError("pseudo_labels must be one integer per feature row")
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    mu, moms = _moments(h, k_max)
    centroids = {int(c): h[pseudo == c].mean(axis=0) for c in np.unique(pseudo)}
    return TargetBatchStatistics(mu=mu, central_moments=moms, class_centroids=centroids, k_max=int(k_max))


def save_statistics(stats: SourceStatistics, path: str) -> None:
    meta = {
        "kind": "source_statistics",
        "d": int(stats.d),
        "k_max": int(stats.k_max),
        "n_classes": int(stats.n_classes),
    }
    write_container(
        path,
        meta,
        {
            "mu": stats.mu,
            "central_moments": stats.central_moments,
            "class_centroids": stats.class_centroids,
            "counts": stats.counts,
        },
    )


def load_statistics(path: str) -> SourceStatistics:
    meta, arrays = read_container(path)
    if meta.get("kind") != "source_statistics":
        raise ContainerError(f"{path}: not a statistics file (kind={meta.get('kind')!r})")
    d, k_max, n_classes = meta["d"], meta["k_max"], meta["n_classes"]
    expected = {
        "mu": (d,),
        "central_moments": (k_max - 1, d),
        "class_centroids": (n_classes, d),
        "counts": (n_classes,),
    }
    for name, shape in expected.items():
        if name not in arrays:
            raise ContainerError(f"{path}: missing array {name!r}")
        if arrays[name].shape != shape:
            raise ContainerError(f"{path}: array {name!r} has shape {arrays[name].shape}, expected {shape}")
    return SourceStatistics(
        mu=arrays["mu"],
        central_moments=arrays["central_moments"],
        class_centroids=arrays["class_centroids"],
        counts=arrays["counts"],
        k_max=int(k_max),
    )
