"""Adam on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BadHyperparameter, LengthMismatch, NonFiniteGradient, NonFiniteLoss


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # bias-corrected moments from the latest step, kept for inspection
    m_hat: np.ndarray = field(default=None, repr=False)
    v_hat: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.m.shape[0]


def adam_new(dim: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> AdamState:
    if int(dim) < 1:
        raise BadHyperparameter("dim must be >= 1")
    if not lr > 0:
        raise BadHyperparameter("lr must be positive")
    for name, b in (("beta1", beta1), ("beta2", beta2)):
        if not 0 <= b < 1:
            raise BadHyperparameter(f"{name} must lie in [0, 1)")
    if not eps >= 0:
        raise BadHyperparameter("eps must be non-negative")
    return AdamState(m=np.zeros(int(dim)), v=np.zeros(int(dim)), t=0, lr=float(lr),
                     beta1=float(beta1), beta2=float(beta2), eps=float(eps))


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """Advance ``state`` by one step and return the updated parameters.

    The counter is incremented before bias correction, so the first call
    divides by ``1 - beta**1``.
    """
    params = np.asarray(params, dtype=float)
    g = np.asarray(grads, dtype=float)
    if params.shape != (state.dim,) or g.shape != (state.dim,):
        raise LengthMismatch(
            f"expected length {state.dim}, got params {params.shape}, grads {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient at step {state.t + 1}")
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * (g * g)
    state.t += 1
    state.m_hat = state.m / (1.0 - b1 ** state.t)
    state.v_hat = state.v / (1.0 - b2 ** state.t)
    return params - state.lr / (np.sqrt(state.v_hat) + state.eps) * state.m_hat


def minimize(objective: Callable, theta0, steps: int, state: AdamState | None = None,
             early_stop_tol: float | None = None, early_stop_window: int = 500):
    """Run Adam on ``objective(theta) -> (loss, grad)`` for ``steps`` steps.

    Returns ``(theta_best, history)`` where ``history[k]`` is the loss of the
    ``k``-th evaluated iterate and ``theta_best`` is the iterate with the lowest
    recorded loss (the starting point included). With ``early_stop_tol`` set,
    stops once the best loss improved by less than that amount over the last
    ``early_stop_window`` steps.
    """
    if int(steps) < 1:
        raise BadHyperparameter("steps must be >= 1")
    theta = np.array(theta0, dtype=float)
    if state is None:
        state = adam_new(theta.shape[0])
    history = []
    best_trace = []
    best_loss = np.inf
    best_theta = theta.copy()
    for k in range(int(steps)):
        loss, grad = objective(theta)
        loss = float(loss)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss at step {k}", step=k)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
        best_trace.append(best_loss)
        if (early_stop_tol is not None and k >= early_stop_window
                and best_trace[k - early_stop_window] - best_loss < early_stop_tol):
            break
        try:
            theta = adam_step(state, theta, grad)
        except NonFiniteGradient as exc:
            raise NonFiniteLoss(f"non-finite gradient at step {k}", step=k) from exc
    return best_theta, np.array(history)


def write_loss_history(history, path) -> None:
    lines = ["step,loss"] + [f"{k},{v:.17g}" for k, v in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")
