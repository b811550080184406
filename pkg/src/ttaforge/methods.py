"""Test-time adaptation methods and the online predict-then-update loop.

All methods share one protocol, run by ``adapt_online``: for each incoming
batch the current model predicts first, and only then is any state updated.
Recorded predictions for batch m therefore always reflect the parameters as
of batch m-1, which keeps methods comparable and makes the first batch a
common reference point.

Gradient-based objectives, each a scalar graph tensor built from one forward
pass of the unlabeled batch:

* tent:    mean prediction entropy.
* pl:      cross-entropy against the batch's own argmax labels.
* shot-im: prediction entropy minus the entropy of the mean prediction.
* tfa:     squared L2 gap of raw-feature means plus squared Frobenius gap
           of raw-feature covariances, target batch versus source.
* cfa-f:   central-moment discrepancy between normalized target-batch
           statistics and stored source statistics.
* cfa-c:   mean distance between per-class centroids, classes taken from
           pseudo-labels.
* cfa:     cfa-f plus a weighted cfa-c term.

Two methods never touch the optimizer: ``source`` is the frozen model, and
``t3a`` replaces classifier weight rows with entropy-filtered prototypes
while leaving every model parameter untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import VisionTransformer, select_modulation_params
from .stats import SourceStatistics, TargetBatchStatistics

__all__ = [
    "METHODS",
    "GRADIENT_METHODS",
    "normalize_method",
    "AdaptConfig",
    "AdaptResult",
    "normalized_graph",
    "graph_batch_statistics",
    "cmd_loss",
    "class_conditional_loss",
    "cfa_loss",
    "tent_loss",
    "pl_loss",
    "shot_im_loss",
    "RawFeatureStatistics",
    "tfa_source_statistics",
    "tfa_loss",
    "T3AState",
    "adapt_online",
]

GRADIENT_METHODS = ("tent", "pl", "shot-im", "tfa", "cfa-f", "cfa-c", "cfa")
METHODS = ("source", "t3a") + GRADIENT_METHODS

_ALIASES = {"tfa-": "tfa", "shot_im": "shot-im", "shotim": "shot-im", "cfa_f": "cfa-f", "cfa_c": "cfa-c"}


def normalize_method(name: str) -> str:
    canon = _ALIASES.get(name.strip().lower(), name.strip().lower())
    if canon not in METHODS:
        raise ValueError(f"unknown method {name!r}, expected one of {METHODS}")
    return canon


@dataclass
class AdaptConfig:
    """Protocol knobs; the defaults are the standard benchmark setting."""

    method: str = "cfa"
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    lam: float = 1.0
    k_moments: int = 3
    modulation: str = "ln"
    normalize: bool = True
    tfa_beta1: float = 1.0
    tfa_beta2: float = 1.0
    t3a_filter_size: int = 100

    def __post_init__(self):
        self.method = normalize_method(self.method)
        if self.k_moments < 1:
            raise ValueError("k_moments must be at least 1")
        if self.t3a_filter_size < 1:
            raise ValueError("t3a_filter_size must be positive")


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# feature-alignment losses


def normalized_graph(features: Tensor, eps: float = 1e-6) -> Tensor:
    """Graph twin of ``stats.normalize_features``: affine-free layer norm, then tanh."""
    return ad.tanh(ad.ln_no_affine(features, eps))


def graph_batch_statistics(h: Tensor, pseudo_labels: np.ndarray, k_max: int) -> TargetBatchStatistics:
    """Batch statistics as graph tensors, so alignment losses can backprop.

    The pseudo-label partition is taken as a constant: gradients flow through
    the averaged features, never through which class a sample landed in.
    """
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, D) feature tensor, got shape {h.shape}")
    if pseudo.shape != (h.shape[0],):
        raise ValueError("pseudo_labels must be one integer per feature row")
    mu = ad.tmean(h, axis=0)
    moms = [ad.tmean(ad.pow_int(h - mu, k), axis=0) for k in range(2, k_max + 1)]
    centroids = {}
    for c in np.unique(pseudo):
        idx = np.nonzero(pseudo == c)[0]
        centroids[int(c)] = ad.tmean(h[idx], axis=0)
    return TargetBatchStatistics(mu=mu, central_moments=moms, class_centroids=centroids, k_max=int(k_max))


def _tgt_moment(tgt: TargetBatchStatistics, k: int):
    # central_moments is a (K-1, D) array on the numpy path and a list of
    # (D,) tensors on the graph path; both index the same way by order.
    return tgt.central_moments[k - 2]


def cmd_loss(src: SourceStatistics, tgt: TargetBatchStatistics, k_max: int) -> Tensor:
    """Central-moment discrepancy between stored source and batch statistics.

    Sum over orders of the L2 distance between elementwise statistics, the
    mean term weighted 1/2 and the order-k moment term 1/2**k. The weights
    are the reciprocal feature-range powers for tanh-bounded features, which
    makes the series contract as k grows.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if k_max > src.k_max:
        raise ValueError(f"loss needs moments up to {k_max} but source statistics stop at {src.k_max}")
    if k_max > tgt.k_max:
        raise ValueError(f"loss needs moments up to {k_max} but batch statistics stop at {tgt.k_max}")
    total = 0.5 * ad.l2norm(_const(src.mu) - _const(tgt.mu))
    for k in range(2, k_max + 1):
        total = total + (0.5**k) * ad.l2norm(_const(src.moment(k)) - _const(_tgt_moment(tgt, k)))
    return total


def class_conditional_loss(src: SourceStatistics, tgt: TargetBatchStatistics) -> Tensor:
    """Mean L2 gap between source centroids and batch pseudo-class centroids.

    Averages over the pseudo-classes present in the batch only, with the
    same 1/2 range weight as the mean term of ``cmd_loss``.
    """
    classes = sorted(tgt.class_centroids)
    if not classes:
        raise ValueError("batch statistics contain no pseudo-classes")
    if classes[-1] >= src.n_classes:
        raise ValueError(f"pseudo-class {classes[-1]} outside the {src.n_classes} source classes")
    total = ad.l2norm(_const(src.class_centroids[classes[0]]) - _const(tgt.class_centroids[classes[0]]))
    for c in classes[1:]:
        total = total + ad.l2norm(_const(src.class_centroids[c]) - _const(tgt.class_centroids[c]))
    return total * (1.0 / (2.0 * len(classes)))


def cfa_loss(
    src: SourceStatistics,
    tgt: TargetBatchStatistics,
    lam: float = 1.0,
    k_max: int = 3,
    variant: str = "cfa",
) -> Tensor:
    """Combined alignment objective: moment term plus lam * centroid term."""
    if variant == "cfa-f":
        return cmd_loss(src, tgt, k_max)
    if variant == "cfa-c":
        return class_conditional_loss(src, tgt)
    if variant != "cfa":
        raise ValueError(f"unknown variant {variant!r}, expected cfa, cfa-f or cfa-c")
    return cmd_loss(src, tgt, k_max) + lam * class_conditional_loss(src, tgt)


# ---------------------------------------------------------------------------
# entropy-based baselines


def tent_loss(logits: Tensor) -> Tensor:
    """Mean softmax entropy of the batch, in nats."""
    p = ad.softmax(logits, axis=1)
    lp = ad.log_softmax(logits, axis=1)
    return ad.tmean(-ad.tsum(ad.mul(p, lp), axis=1))


def pl_loss(logits: Tensor) -> Tensor:
    """Cross-entropy against the batch's own argmax labels.

    The labels are a constant snapshot; no gradient flows through the argmax.
    """
    labels = np.argmax(logits.data, axis=1)
    lp = ad.log_softmax(logits, axis=1)
    return -ad.tmean(lp[np.arange(labels.shape[0]), labels])


def shot_im_loss(logits: Tensor) -> Tensor:
    """Information-maximization objective: confident yet diverse predictions.

    Mean per-sample entropy, plus sum_c m_c * log(m_c) where m is the batch
    mean prediction. The second term is the negated entropy of the marginal,
    so minimizing pushes individual predictions sharp but the mixture flat.
    """
    p = ad.softmax(logits, axis=1)
    lp = ad.log_softmax(logits, axis=1)
    ent = ad.tmean(-ad.tsum(ad.mul(p, lp), axis=1))
    marginal = ad.tmean(p, axis=0)
    return ent + ad.tsum(ad.mul(marginal, ad.log(marginal)))


# ---------------------------------------------------------------------------
# raw-feature alignment (tfa)


@dataclass
class RawFeatureStatistics:
    """Mean and unbiased covariance of raw (un-normalized) source features."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def tfa_source_statistics(features: np.ndarray) -> RawFeatureStatistics:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need at least two feature rows for a covariance")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    return RawFeatureStatistics(mean=mean, cov=cov, count=f.shape[0])


def tfa_loss(src: RawFeatureStatistics, features: Tensor, beta1: float = 1.0, beta2: float = 1.0) -> Tensor:
    """Squared mean gap plus squared covariance (Frobenius) gap to the source."""
    b = features.shape[0]
    if b < 2:
        raise ValueError("need at least two samples per batch for a covariance")
    mu = ad.tmean(features, axis=0)
    centered = features - mu
    cov = ad.matmul(ad.transpose(centered, (1, 0)), centered) * (1.0 / (b - 1))
    mean_term = ad.tsum(ad.pow_int(_const(src.mean) - mu, 2))
    cov_term = ad.tsum(ad.pow_int(_const(src.cov) - cov, 2))
    return beta1 * mean_term + beta2 * cov_term


# ---------------------------------------------------------------------------
# t3a: gradient-free prototype classifier


class T3AState:
    """Entropy-filtered prototype classifier state.

    Each class keeps a support set of (feature, prediction entropy) pairs,
    seeded with that class's classifier weight column and capped at
    ``filter_size`` lowest-entropy entries. The class score of a feature is
    its dot product with the support mean, plus the frozen classifier bias;
    with only the warm-start supports this reproduces the unadapted
    classifier exactly. The model itself is never modified.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, filter_size: int = 100):
        if filter_size < 1:
            raise ValueError("filter_size must be positive")
        self.bias = np.asarray(bias, dtype=np.float64).copy()
        self.filter_size = int(filter_size)
        w = np.asarray(weight, dtype=np.float64)
        self._supports: list[list[np.ndarray]] = []
        self._entropies: list[list[float]] = []
        for c in range(w.shape[1]):
            vec = w[:, c].copy()
            logits = vec @ w + self.bias
            self._supports.append([vec])
            self._entropies.append([_entropy(logits)])

    @classmethod
    def from_model(cls, model: VisionTransformer, filter_size: int = 100) -> "T3AState":
        return cls(model.params["classifier.weight"].data, model.params["classifier.bias"].data, filter_size)

    def prototypes(self) -> np.ndarray:
        return np.stack([np.mean(vecs, axis=0) for vecs in self._supports])

    def predict(self, features: np.ndarray) -> np.ndarray:
        scores = np.asarray(features, dtype=np.float64) @ self.prototypes().T + self.bias
        return np.argmax(scores, axis=1)

    def update(self, features: np.ndarray, logits: np.ndarray) -> None:
        """Append each sample to its pseudo-class, then re-filter by entropy.

        Entropy values are static per support, so keeping the filter_size
        lowest seen so far matches filtering over the full history. Ties
        keep insertion order (stable sort).
        """
        features = np.asarray(features, dtype=np.float64)
        logits = np.asarray(logits, dtype=np.float64)
        pseudo = np.argmax(logits, axis=1)
        for i, c in enumerate(pseudo):
            self._supports[c].append(features[i].copy())
            self._entropies[c].append(_entropy(logits[i]))
        for c in range(len(self._supports)):
            if len(self._supports[c]) > self.filter_size:
                keep = np.argsort(np.array(self._entropies[c]), kind="stable")[: self.filter_size]
                keep = np.sort(keep)
                self._supports[c] = [self._supports[c][j] for j in keep]
                self._entropies[c] = [self._entropies[c][j] for j in keep]


def _entropy(logits: np.ndarray) -> float:
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# the online loop


@dataclass
class AdaptResult:
    """Per-batch predictions and losses from one pass over a target stream.

    ``failed`` marks a run aborted by a non-finite loss or gradient;
    ``failure_batch`` names the 0-based batch where it happened. Predictions
    made up to and including that batch are retained.
    """

    predictions: list[np.ndarray] = field(default_factory=list)
    losses: list[float | None] = field(default_factory=list)
    failed: bool = False
    failure_batch: int | None = None
    message: str = ""

    def flat_predictions(self) -> np.ndarray:
        if not self.predictions:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.predictions)


def _build_loss(
    method: str,
    feats: Tensor,
    logits: Tensor,
    preds: np.ndarray,
    config: AdaptConfig,
    src_stats: SourceStatistics | None,
    tfa_stats: RawFeatureStatistics | None,
) -> Tensor:
    if method == "tent":
        return tent_loss(logits)
    if method == "pl":
        return pl_loss(logits)
    if method == "shot-im":
        return shot_im_loss(logits)
    if method == "tfa":
        return tfa_loss(tfa_stats, feats, config.tfa_beta1, config.tfa_beta2)
    h = normalized_graph(feats) if config.normalize else feats
    tgt = graph_batch_statistics(h, preds, config.k_moments)
    return cfa_loss(src_stats, tgt, lam=config.lam, k_max=config.k_moments, variant=method)


def adapt_online(
    model: VisionTransformer,
    stream,
    config: AdaptConfig,
    src_stats: SourceStatistics | None = None,
    tfa_stats: RawFeatureStatistics | None = None,
) -> AdaptResult:
    """Run one pass of a method over an unlabeled batch stream.

    ``stream`` yields objects with an ``images`` attribute (``data.Batch``
    works); any labels riding along are ignored. The model is updated in
    place for gradient methods, so pass a copy when the original matters.

    Alignment methods need statistics: ``src_stats`` for the cfa family and
    ``tfa_stats`` for tfa. A non-finite loss or gradient aborts the pass and
    is reported on the result rather than raised.
    """
    method = normalize_method(config.method)
    if method in ("cfa", "cfa-f", "cfa-c") and src_stats is None:
        raise ValueError(f"method {method} needs source statistics (src_stats)")
    if method == "tfa" and tfa_stats is None:
        raise ValueError("method tfa needs raw source feature statistics (tfa_stats)")

    result = AdaptResult()
    opt_params: list[Tensor] = []
    opt_set: set[Tensor] = set()
    opt_state = None
    t3a = None
    if method in GRADIENT_METHODS:
        group = select_modulation_params(model, config.modulation)
        if not group:
            raise ValueError(f"modulation mode {config.modulation!r} selects no parameters")
        opt_params = list(group.values())
        opt_set = set(opt_params)
        opt_state = ad.make_optimizer_state(opt_params, lr=config.lr, momentum=config.momentum, clip_norm=config.clip_norm)
    elif method == "t3a":
        t3a = T3AState.from_model(model, config.t3a_filter_size)

    for m, batch in enumerate(stream):
        images = batch.images if hasattr(batch, "images") else np.asarray(batch)
        if method == "source":
            result.predictions.append(model.predict(images))
            result.losses.append(None)
            continue
        if method == "t3a":
            with ad.no_grad():
                feats, logits = model.forward(images)
            result.predictions.append(t3a.predict(feats.data))
            t3a.update(feats.data, logits.data)
            result.losses.append(None)
            continue

        feats, logits = model.forward(images)
        preds = np.argmax(logits.data, axis=1)
        result.predictions.append(preds)
        try:
            loss = _build_loss(method, feats, logits, preds, config, src_stats, tfa_stats)
            loss_value = float(loss)
            grads = ad.backward(loss)
            # Clip over the modulation group only; other gradients are discarded.
            grads = {p: g for p, g in grads.items() if p in opt_set}
            if config.clip_norm is not None:
                grads = ad.clip_global_norm(grads, config.clip_norm)
            ad.sgd_step(opt_params, grads, opt_state)
            result.losses.append(loss_value)
        except ad.NonFiniteError as e:
            result.losses.append(float("nan"))
            result.failed = True
            result.failure_batch = m
            result.message = f"non-finite value at batch {m}: {e}"
            break
    return result
