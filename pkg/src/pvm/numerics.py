"""Dense MLP primitives used by every predictive unit.

A hand-rolled three-layer perceptron (input -> sigmoid hidden -> sigmoid
output) with exact analytic gradients of the summed squared error, plus
plain SGD.  Everything is float64.

Two shape conventions are supported by the same dataclasses:

* single instance: ``w_h`` is ``(hidden, in)``, ``w_p`` is ``(out, hidden)``;
* stacked: a leading axis enumerates independent parameter sets, so a few
  thousand small perceptrons advance in a handful of vectorised calls.

``sgd_step`` is shape-agnostic and works for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    """Numerically stable logistic function 1/(1+exp(-x)), elementwise.

    Saturates cleanly to 0.0/1.0 for large |x|; never overflows to NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class MlpParams:
    """Parameter blocks of one (or a stack of) three-layer perceptron(s)."""

    w_h: np.ndarray
    b_h: np.ndarray
    w_p: np.ndarray
    b_p: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w_h.shape[-1]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[-2]

    @property
    def out_dim(self) -> int:
        return self.w_p.shape[-2]

    def copy(self) -> "MlpParams":
        return MlpParams(self.w_h.copy(), self.b_h.copy(),
                         self.w_p.copy(), self.b_p.copy())


@dataclass
class MlpGradients:
    """Gradient blocks, shape-matched to the owning MlpParams."""

    dw_h: np.ndarray
    db_h: np.ndarray
    dw_p: np.ndarray
    db_p: np.ndarray


def init_mlp(in_dim: int, hidden_dim: int, out_dim: int,
             rng: np.random.Generator) -> MlpParams:
    """Seeded init: every block uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Draw order (w_h, b_h, w_p, b_p) is fixed so a given generator state
    always yields the same parameters.
    """
    bh = 1.0 / np.sqrt(in_dim)
    bp = 1.0 / np.sqrt(hidden_dim)
    return MlpParams(
        w_h=rng.uniform(-bh, bh, (hidden_dim, in_dim)),
        b_h=rng.uniform(-bh, bh, hidden_dim),
        w_p=rng.uniform(-bp, bp, (out_dim, hidden_dim)),
        b_p=rng.uniform(-bp, bp, out_dim),
    )


def _check_vector(name: str, v: np.ndarray, dim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({dim},)")
    return v


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass: returns (hidden, output), both sigmoid activations."""
    x = _check_vector("input", x, params.in_dim)
    hidden = sigmoid(params.w_h @ x + params.b_h)
    out = sigmoid(params.w_p @ hidden + params.b_p)
    return hidden, out


def mlp_backward(params: MlpParams, x: np.ndarray, target: np.ndarray):
    """Loss and exact gradients of sum((output - target)^2).

    The forward pass is recomputed internally, so the gradients are exact
    for the parameters as passed.  Returns (MlpGradients, loss).
    """
    x = _check_vector("input", x, params.in_dim)
    target = _check_vector("target", target, params.out_dim)
    hidden = sigmoid(params.w_h @ x + params.b_h)
    out = sigmoid(params.w_p @ hidden + params.b_p)
    diff = out - target
    loss = float(diff @ diff)
    # d loss / d preactivation, output layer then hidden layer
    d_out = 2.0 * diff * out * (1.0 - out)
    d_hid = (params.w_p.T @ d_out) * hidden * (1.0 - hidden)
    grads = MlpGradients(
        dw_h=np.outer(d_hid, x),
        db_h=d_hid,
        dw_p=np.outer(d_out, hidden),
        db_p=d_out,
    )
    return grads, loss


def sgd_step(params: MlpParams, grads: MlpGradients, rate: float) -> MlpParams:
    """In-place plain SGD: each block decremented by rate * gradient."""
    if not rate > 0.0:
        raise ValueError(f"learning rate must be positive, got {rate}")
    params.w_h -= rate * grads.dw_h
    params.b_h -= rate * grads.db_h
    params.w_p -= rate * grads.dw_p
    params.b_p -= rate * grads.db_p
    return params


# ---------------------------------------------------------------------------
# Stacked variants: leading axis = independent instances.
# ---------------------------------------------------------------------------

def init_mlp_stack(n: int, in_dim: int, hidden_dim: int, out_dim: int,
                   rng: np.random.Generator) -> MlpParams:
    """Stacked init; instance i gets the draws init_mlp would give it in order."""
    bh = 1.0 / np.sqrt(in_dim)
    bp = 1.0 / np.sqrt(hidden_dim)
    w_h = np.empty((n, hidden_dim, in_dim))
    b_h = np.empty((n, hidden_dim))
    w_p = np.empty((n, out_dim, hidden_dim))
    b_p = np.empty((n, out_dim))
    for i in range(n):
        w_h[i] = rng.uniform(-bh, bh, (hidden_dim, in_dim))
        b_h[i] = rng.uniform(-bh, bh, hidden_dim)
        w_p[i] = rng.uniform(-bp, bp, (out_dim, hidden_dim))
        b_p[i] = rng.uniform(-bp, bp, out_dim)
    return MlpParams(w_h, b_h, w_p, b_p)


def mlp_forward_stack(params: MlpParams, x: np.ndarray):
    """Batched forward: x is (n, in), returns hidden (n, h) and output (n, out)."""
    hidden = sigmoid(np.einsum("nhi,ni->nh", params.w_h, x) + params.b_h)
    out = sigmoid(np.einsum("noh,nh->no", params.w_p, hidden) + params.b_p)
    return hidden, out


def mlp_backward_stack(params: MlpParams, x: np.ndarray, target: np.ndarray):
    """Batched mlp_backward: returns (MlpGradients, losses (n,))."""
    hidden = sigmoid(np.einsum("nhi,ni->nh", params.w_h, x) + params.b_h)
    out = sigmoid(np.einsum("noh,nh->no", params.w_p, hidden) + params.b_p)
    diff = out - target
    losses = np.einsum("no,no->n", diff, diff)
    d_out = 2.0 * diff * out * (1.0 - out)
    d_hid = np.einsum("noh,no->nh", params.w_p, d_out) * hidden * (1.0 - hidden)
    grads = MlpGradients(
        dw_h=np.einsum("nh,ni->nhi", d_hid, x),
        db_h=d_hid,
        dw_p=np.einsum("no,nh->noh", d_out, hidden),
        db_p=d_out,
    )
    return grads, losses
