"""A desk-scale vision transformer classifier built on the autodiff core.

The model is deliberately tiny: 8x8 images cut into 4x4 patches give four
patch tokens plus a class token, two pre-norm transformer blocks, and a
linear classifier on the final-layer-norm output of the class token. Small
as it is, the layout mirrors the full-size architecture, which is what the
adaptation methods care about: every parameter has a dotted name, and the
modulation groups below select which names an optimizer may touch.

Feature vectors are per-sample: tokens only attend within their own image,
so a sample's features do not depend on what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import ContainerError, read_container, write_container

__all__ = [
    "ArchConfig",
    "VisionTransformer",
    "MODULATION_MODES",
    "select_modulation_params",
    "train_source_model",
    "model_features",
    "save_model",
    "load_model",
]

MODULATION_MODES = ("ln", "cls", "feature", "all")


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the tiny transformer. Defaults are the desk-scale setting."""

    image_size: int = 8
    patch_size: int = 4
    channels: int = 3
    d_model: int = 32
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: float = 2.0
    n_classes: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if not 2 <= self.n_classes <= 10:
            raise ValueError("n_classes must lie in [2, 10]")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class VisionTransformer:
    """Tiny ViT with named float64 parameters.

    ``forward`` returns (features, logits): features are the final layer-norm
    output at the class-token position, logits the linear classifier applied
    to them. Both are graph tensors, so any loss built from them can be
    backpropagated to the parameters.
    """

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0):
        self.arch = arch
        rng = np.random.Generator(np.random.PCG64(seed))
        p: dict[str, Tensor] = {}

        def w(name, shape, scale=0.02):
            p[name] = Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        d = arch.d_model
        w("patch_embed.weight", (arch.patch_dim, d))
        zeros("patch_embed.bias", (d,))
        w("cls_token", (d,))
        w("pos_embed", (arch.n_patches + 1, d))
        for i in range(arch.depth):
            ones(f"blocks.{i}.ln1.gamma", (d,))
            zeros(f"blocks.{i}.ln1.beta", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                w(f"blocks.{i}.attn.{nm}", (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(f"blocks.{i}.attn.{nm}", (d,))
            ones(f"blocks.{i}.ln2.gamma", (d,))
            zeros(f"blocks.{i}.ln2.beta", (d,))
            hidden = int(d * arch.mlp_ratio)
            w(f"blocks.{i}.mlp.w1", (d, hidden))
            zeros(f"blocks.{i}.mlp.b1", (hidden,))
            w(f"blocks.{i}.mlp.w2", (hidden, d))
            zeros(f"blocks.{i}.mlp.b2", (d,))
        ones("final_ln.gamma", (d,))
        zeros("final_ln.beta", (d,))
        w("classifier.weight", (d, arch.n_classes))
        zeros("classifier.bias", (arch.n_classes,))
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _patches(self, images: np.ndarray) -> np.ndarray:
        a = self.arch
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (a.image_size, a.image_size, a.channels):
            raise ValueError(
                f"expected images of shape (B, {a.image_size}, {a.image_size}, {a.channels}), got {x.shape}"
            )
        b = x.shape[0]
        n = a.image_size // a.patch_size
        x = x.reshape(b, n, a.patch_size, n, a.patch_size, a.channels)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, a.n_patches, a.patch_dim)

    def _attention(self, x: Tensor, i: int) -> Tensor:
        a, p = self.arch, self.params
        b, n, d = x.shape
        heads, hd = a.n_heads, a.d_model // a.n_heads

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

        q = split(ad.matmul(x, p[f"blocks.{i}.attn.wq"]) + p[f"blocks.{i}.attn.bq"])
        k = split(ad.matmul(x, p[f"blocks.{i}.attn.wk"]) + p[f"blocks.{i}.attn.bk"])
        v = split(ad.matmul(x, p[f"blocks.{i}.attn.wv"]) + p[f"blocks.{i}.attn.bv"])
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (hd**-0.5)
        attn = ad.softmax(scores, axis=-1)
        out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        out = ad.reshape(out, (b, n, d))
        return ad.matmul(out, p[f"blocks.{i}.attn.wo"]) + p[f"blocks.{i}.attn.bo"]

    def forward(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        a, p = self.arch, self.params
        patches = Tensor(self._patches(images))
        b = patches.shape[0]
        tok = ad.matmul(patches, p["patch_embed.weight"]) + p["patch_embed.bias"]
        cls = ad.broadcast_to(ad.reshape(p["cls_token"], (1, 1, a.d_model)), (b, 1, a.d_model))
        x = ad.concat([cls, tok], axis=1) + p["pos_embed"]
        for i in range(a.depth):
            h = ad.layer_norm(x, p[f"blocks.{i}.ln1.gamma"], p[f"blocks.{i}.ln1.beta"])
            x = x + self._attention(h, i)
            h = ad.layer_norm(x, p[f"blocks.{i}.ln2.gamma"], p[f"blocks.{i}.ln2.beta"])
            h = ad.matmul(h, p[f"blocks.{i}.mlp.w1"]) + p[f"blocks.{i}.mlp.b1"]
            h = ad.matmul(ad.gelu(h), p[f"blocks.{i}.mlp.w2"]) + p[f"blocks.{i}.mlp.b2"]
            x = x + h
        feats = ad.layer_norm(x[:, 0, :], p["final_ln.gamma"], p["final_ln.beta"])
        logits = ad.matmul(feats, p["classifier.weight"]) + p["classifier.bias"]
        return feats, logits

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax class labels without recording a graph. Ties go to the lowest index."""
        with ad.no_grad():
            _, logits = self.forward(images)
        return np.argmax(logits.data, axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"state dict mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in state.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {self.params[name].data.shape}")
            self.params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def copy(self) -> "VisionTransformer":
        clone = VisionTransformer(self.arch, seed=0)
        clone.load_state_dict(self.state_dict())
        return clone


def select_modulation_params(model: VisionTransformer, mode: str) -> dict[str, Tensor]:
    """Pick the parameter group a test-time optimizer is allowed to update.

    ln      all layer-norm scales and shifts, including the final layer norm
    cls     the class token only
    feature everything in the feature extractor (all but the classifier)
    all     every parameter

    The groups nest: ln and cls are subsets of feature, feature of all.
    """
    if mode not in MODULATION_MODES:
        raise ValueError(f"unknown modulation mode {mode!r}, expected one of {MODULATION_MODES}")
    out: dict[str, Tensor] = {}
    for name, t in model.params.items():
        is_ln = ".ln1." in name or ".ln2." in name or name.startswith("final_ln.")
        is_classifier = name.startswith("classifier.")
        if mode == "ln" and is_ln:
            out[name] = t
        elif mode == "cls" and name == "cls_token":
            out[name] = t
        elif mode == "feature" and not is_classifier:
            out[name] = t
        elif mode == "all":
            out[name] = t
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    lp = ad.log_softmax(logits, axis=1)
    picked = lp[np.arange(labels.shape[0]), labels]
    return -ad.tmean(picked)


def train_source_model(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    steps: int = 200,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
    clip_norm: float | None = 1.0,
    seed: int = 0,
) -> list[float]:
    """Fit the model on a labeled set with SGD momentum; returns per-step losses.

    This is a utility for producing source checkpoints on toy data, not a
    general training loop. Batches cycle through a reshuffled permutation
    each epoch.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    params = list(model.params.values())
    state = ad.make_optimizer_state(params, lr=lr, momentum=momentum, clip_norm=clip_norm)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    pos = 0
    losses: list[float] = []
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        _, logits = model.forward(images[idx])
        loss = cross_entropy(logits, labels[idx])
        grads = ad.backward(loss)
        if clip_norm is not None:
            grads = ad.clip_global_norm(grads, clip_norm)
        ad.sgd_step(params, grads, state)
        losses.append(float(loss))
    return losses


def model_features(model: VisionTransformer, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Raw (un-normalized) feature vectors for a whole set, without a graph."""
    chunks = []
    with ad.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats, _ = model.forward(images[start : start + batch_size])
            chunks.append(feats.data)
    return np.concatenate(chunks, axis=0)


def save_model(model: VisionTransformer, path: str) -> None:
    write_container(path, {"kind": "model", "arch": asdict(model.arch)}, model.state_dict())


def load_model(path: str) -> VisionTransformer:
    meta, arrays = read_container(path)
    if meta.get("kind") != "model":
        raise ContainerError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    arch = ArchConfig(**meta["arch"])
    model = VisionTransformer(arch, seed=0)
    model.load_state_dict(arrays)
    return model
