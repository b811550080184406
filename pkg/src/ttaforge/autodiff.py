"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every value is a Tensor wrapping an ndarray. Operations record a graph of
parent links plus a backward closure; ``backward`` walks the graph once in
reverse topological order and returns gradients for the leaf tensors that
were created with ``requires_grad=True``. The graph is rebuilt from scratch
every time a loss is constructed, so there is no retained state between
optimization steps.

All arithmetic is done in 64-bit floats. Ops never mutate their inputs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "gelu",
    "exp",
    "log",
    "pow_int",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "broadcast_to",
    "softmax",
    "log_softmax",
    "layer_norm",
    "ln_no_affine",
    "l2norm",
    "clip_global_norm",
    "OptimizerState",
    "make_optimizer_state",
    "sgd_step",
]


class NonFiniteError(RuntimeError):
    """A loss or gradient contained NaN or infinity."""


class GraphError(RuntimeError):
    """The backward pass was asked to do something the graph cannot support."""


# Graph recording is toggled per thread so concurrent benchmark runs cannot
# switch each other's tape off.
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Useful for pure inference."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A float64 array plus optional links into the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` are the only ones that
    receive entries in the gradient map returned by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __float__(self) -> float:
        if self.data.size != 1:
            raise TypeError("only size-1 tensors convert to float")
        return float(self.data)

    def item(self) -> float:
        return float(self)

    # Operator sugar. Scalars and arrays are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or np.ndim(other) != 0:
            raise TypeError("tensor division is only supported by scalar constants")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op result, recording graph links only when someone needs them."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting by summing the gradient down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-batch semantics (ndim >= 2 each)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return _make(out, (a, b), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_int(a: Tensor, k: int) -> Tensor:
    """Elementwise integer power for k >= 1."""
    if not isinstance(k, int) or k < 1:
        raise ValueError("pow_int expects an integer exponent >= 1")
    out = a.data**k

    def bwd(g):
        return (g * k * a.data ** (k - 1),)

    return _make(out, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _make(np.array(out, dtype=np.float64), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bwd)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_sum_to_shape(g, a.data.shape),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bwd)


def _ln_forward(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    return y, inv


def _ln_backward(gy: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    # d/dx of y = (x - mean(x)) / sqrt(var(x) + eps), normalizing the last axis.
    return inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))


def ln_no_affine(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the last axis without a learned scale or shift."""
    y, inv = _ln_forward(a.data, eps)
    return _make(y, (a,), lambda g: (_ln_backward(g, y, inv),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer normalization over the last axis with affine parameters gamma, beta."""
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    y, inv = _ln_forward(a.data, eps)
    out = gamma.data * y + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * y).sum(axis=lead) if lead else g * y
        gbeta = g.sum(axis=lead) if lead else g
        gx = _ln_backward(g * gamma.data, y, inv)
        return gx, ggamma, gbeta

    return _make(out, (a, gamma, beta), bwd)


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries, as a scalar tensor.

    At the origin the norm is not differentiable; the zero subgradient is
    used there so that perfectly matched statistics produce a zero update.
    """
    n = float(np.sqrt((a.data**2).sum()))

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _make(np.float64(n), (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns a map from each reachable leaf tensor with ``requires_grad`` to
    its gradient array. Raises ``GraphError`` for non-scalar losses or when
    no parameter is reachable, and ``NonFiniteError`` when the loss is NaN
    or infinite.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is not finite")

    # Iterative topological sort; graphs can be deep for long expressions.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[node] = leaves[node] + g if node in leaves else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    if not leaves:
        raise GraphError("loss is not connected to any parameter")
    return leaves


# ---------------------------------------------------------------------------
# optimizer


def clip_global_norm(grads: Mapping[Tensor, np.ndarray], max_norm: float) -> dict[Tensor, np.ndarray]:
    """Jointly rescale all gradients so their global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient contains non-finite entries")
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {p: g * scale for p, g in grads.items()}


@dataclass
class OptimizerState:
    """SGD-with-momentum state: one velocity buffer per parameter."""

    lr: float
    momentum: float
    clip_norm: float | None = None
    velocity: dict[Tensor, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


def make_optimizer_state(
    params: Iterable[Tensor], lr: float, momentum: float, clip_norm: float | None = None
) -> OptimizerState:
    state = OptimizerState(lr=lr, momentum=momentum, clip_norm=clip_norm)
    for p in params:
        state.velocity[p] = np.zeros_like(p.data)
    return state


def sgd_step(params: Iterable[Tensor], grads: Mapping[Tensor, np.ndarray], state: OptimizerState) -> None:
    """One classic-momentum update in place: v <- m*v + g, p <- p - lr*v.

    Parameters without a gradient entry (for example when the loss does not
    touch them) are stepped with a zero gradient so their velocity decays.
    """
    for p in params:
        v = state.velocity.get(p)
        if v is None:
            raise ValueError("parameter missing from optimizer state")
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        v = state.momentum * v + g
        state.velocity[p] = v
        p.data = p.data - state.lr * v
