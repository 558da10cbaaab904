"""Huber penalty, its derivative, and the weighted least-squares baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDelta, NonPositiveSigma, ShapeMismatch


@dataclass(frozen=True)
class HuberParams:
    delta: float = 1.0

    def __post_init__(self):
        _check_delta(self.delta)


def _check_delta(delta):
    if not delta > 0:
        raise NonPositiveDelta(f"delta must be positive, got {delta!r}")


def huber(z, delta=1.0):
    """Quadratic for ``|z| <= delta``, linear with slope ``delta`` beyond."""
    _check_delta(delta)
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    out = np.where(a <= delta, 0.5 * z * z, delta * (a - 0.5 * delta))
    return out[()] if out.ndim == 0 else out


def huber_grad(z, delta=1.0):
    _check_delta(delta)
    z = np.asarray(z, dtype=float)
    out = np.clip(z, -delta, delta)
    return out[()] if out.ndim == 0 else out


def weighted_l2(residuals, sigmas) -> float:
    """Sum of ``(residual / sigma)**2`` over all entries."""
    r = np.asarray(residuals, dtype=float)
    s = np.asarray(sigmas, dtype=float)
    if r.shape != s.shape:
        raise ShapeMismatch(f"residuals {r.shape} vs sigmas {s.shape}")
    if np.any(~(s > 0)):
        raise NonPositiveSigma("all sigmas must be positive")
    return float(np.sum(r * r / (s * s)))
