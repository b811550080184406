"""
Reverse-mode autodiff in a few lines
====================================

The whole package rests on one float64 Tensor type that records every
operation into a graph. Calling ``backward`` on a scalar walks that graph
once and hands back a gradient per leaf. This script builds a couple of
small graphs, checks a gradient against finite differences by hand, and
runs the clipped momentum-SGD step that the adaptation loop uses.
"""

import numpy as np

from ttaforge import Tensor, backward, clip_global_norm, no_grad
from ttaforge import autodiff as ad

# --- a scalar chain ------------------------------------------------------
# f(x) = sum(tanh(x)^2); df/dx = 2 tanh(x) (1 - tanh(x)^2)
x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
y = ad.tsum(ad.pow_int(ad.tanh(x), 2))
grads = backward(y)
expected = 2 * np.tanh(x.data) * (1 - np.tanh(x.data) ** 2)
print("analytic :", grads[x])
print("closed   :", expected)

# --- the same thing, numerically -----------------------------------------
# Central differences on the loss value; the package's own tests do this
# for every operation and every adaptation method.
def f(v):
    return float(np.sum(np.tanh(v) ** 2))

h = 1e-6
numeric = np.array([(f(x.data + h * e) - f(x.data - h * e)) / (2 * h) for e in np.eye(3)])
print("numeric  :", numeric)
print("max abs gap:", np.abs(grads[x] - numeric).max())

# --- matrices, reductions, softmax ----------------------------------------
rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
data = Tensor(rng.normal(size=(8, 4)))
logits = ad.matmul(data, w)
loss = ad.tmean(-ad.tsum(ad.mul(ad.softmax(logits, axis=1), ad.log_softmax(logits, axis=1)), axis=1))
print("\nmean softmax entropy:", float(loss))
gw = backward(loss)[w]
print("gradient shape matches weight:", gw.shape == w.data.shape)

# Inside no_grad() nothing is recorded, which is how inference passes and
# finite-difference probes stay cheap.
with no_grad():
    silent = ad.matmul(data, w)
print("recorded parents under no_grad:", len(silent._parents))

# --- clipped momentum SGD --------------------------------------------------
# Minimize ||p - target||^2 with the exact optimizer the online loop uses:
# velocity <- momentum * velocity + grad; p <- p - lr * velocity, after the
# gradient dict is jointly rescaled to a global-norm budget.
target = np.array([1.0, -2.0, 0.5])
p = Tensor(np.zeros(3), requires_grad=True)
state = ad.make_optimizer_state([p], lr=0.1, momentum=0.9, clip_norm=1.0)
for step in range(120):
    diff = p - Tensor(target)
    g = backward(ad.tsum(ad.pow_int(diff, 2)))
    g = clip_global_norm(g, 1.0)
    ad.sgd_step([p], g, state)
print("\nafter 120 clipped SGD steps:", p.data, "(target", target, ")")
