"""One predictive unit: a small recurrent perceptron trained on its own input.

Each unit receives a primary signal (a video tile, or the concatenated
hidden states of the units below it) plus derived layers and context, and
predicts what the signal will be on the next step.  The input fed to the
perceptron is the concatenation, in this exact order::

    [signal, derivative, integral, error, context]

where, for signal P_t with previous signal P_{t-1}, pending prediction
P*_t (emitted on the previous step) and decay tau::

    integral   = tau * I_{t-1} + (1 - tau) * P_t
    derivative = 0.5 + (P_t - P_{t-1}) / 2
    error      = 0.5 + (P*_t - P_t) / 2

All three stay in [0, 1] whenever the signals do.  Context is the
previous-step hidden states of the unit's context sources (itself, its
lateral neighbours, its superior and the topmost unit).

Training is strictly local: when the next signal arrives, the squared
error of the pending prediction is backpropagated through this unit's own
perceptron only, using the stored input that produced the prediction.
Gradients never cross unit boundaries.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .numerics import MlpParams, init_mlp, mlp_backward, mlp_forward, sgd_step

DEFAULT_TAU = 0.9


def derive_layers(signal_prev: np.ndarray, integral_prev: np.ndarray,
                  prediction_pending: np.ndarray, signal: np.ndarray,
                  tau: float):
    """Pure computation of (integral, derivative, error) for a new signal."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != signal_prev.shape:
        raise ValueError(
            f"signal has shape {signal.shape}, expected {signal_prev.shape}")
    integral = tau * integral_prev + (1.0 - tau) * signal
    derivative = 0.5 + (signal - signal_prev) / 2.0
    error = 0.5 + (prediction_pending - signal) / 2.0
    return integral, derivative, error


class PvmUnit:
    """Mutable state of one unit; see the module docstring for semantics."""

    def __init__(self, params: MlpParams, signal_dim: int,
                 tau: float = DEFAULT_TAU,
                 context_sources: Sequence[int] = ()):
        if params.out_dim != signal_dim:
            raise ValueError("prediction width must equal the signal width")
        context_dim = params.in_dim - 4 * signal_dim
        if context_dim < 0:
            raise ValueError("input width smaller than four signal blocks")
        self.params = params
        self.signal_dim = signal_dim
        self.context_dim = context_dim
        self.tau = float(tau)
        self.context_sources = tuple(context_sources)
        # Warm-up state: mid-range signals, hidden from the biases alone,
        # pending prediction from the initial weights acting on that hidden.
        self.signal_prev = np.full(signal_dim, 0.5)
        self.integral = np.full(signal_dim, 0.5)
        from .numerics import sigmoid
        self.hidden = sigmoid(params.b_h)
        self.prediction_pending = sigmoid(params.w_p @ self.hidden + params.b_p)
        self.input_prev: Optional[np.ndarray] = None

    @classmethod
    def build(cls, signal_dim: int, hidden_size: int, context_dim: int,
              rng: np.random.Generator, tau: float = DEFAULT_TAU,
              context_sources: Sequence[int] = ()) -> "PvmUnit":
        params = init_mlp(4 * signal_dim + context_dim, hidden_size,
                          signal_dim, rng)
        return cls(params, signal_dim, tau=tau, context_sources=context_sources)

    def forward(self, signal: np.ndarray, context: np.ndarray):
        """Advance one step: returns (hidden, prediction) and updates state."""
        context = np.asarray(context, dtype=np.float64)
        if context.shape != (self.context_dim,):
            raise ValueError(
                f"context has shape {context.shape}, expected ({self.context_dim},)")
        signal = np.asarray(signal, dtype=np.float64)
        integral, derivative, error = derive_layers(
            self.signal_prev, self.integral, self.prediction_pending,
            signal, self.tau)
        x = np.concatenate([signal, derivative, integral, error, context])
        hidden, prediction = mlp_forward(self.params, x)
        self.signal_prev = signal.copy()
        self.integral = integral
        self.prediction_pending = prediction
        self.hidden = hidden
        self.input_prev = x
        return hidden, prediction

    def train(self, observed_next: np.ndarray, rate: float) -> float:
        """Train the pending prediction against the signal that arrived.

        Must be called after at least one forward().  Applies one SGD step
        to this unit's parameters only and returns the squared-error loss.
        """
        if self.input_prev is None:
            raise RuntimeError("train() called before any forward()")
        grads, loss = mlp_backward(self.params, self.input_prev, observed_next)
        sgd_step(self.params, grads, rate)
        return loss

    def loss_against(self, observed: np.ndarray) -> float:
        """Squared error of the pending prediction, without training."""
        diff = self.prediction_pending - np.asarray(observed, dtype=np.float64)
        return float(diff @ diff)
