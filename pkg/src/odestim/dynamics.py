"""Benchmark ODE systems and a fixed-step RK4 integrator.

Right-hand sides are written against ``x[..., i]`` so that a single call can
evaluate one state of shape ``(m,)`` or a whole batch of shape ``(k, m)``.
Each built-in system also carries a numba kernel used by :func:`integrate`
for the inner time loop; user-defined systems without a kernel fall back to a
plain Python loop over :func:`rk4_step`.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numba
import numpy as np

from .errors import DimensionMismatch, NonFiniteState, ParseError, UnknownSystem

__all__ = [
    "OdeSystem",
    "Trajectory",
    "make_damped_cubic",
    "make_van_der_pol",
    "make_lotka_volterra",
    "make_lorenz",
    "get_system",
    "SYSTEMS",
    "rk4_step",
    "time_grid",
    "integrate",
]


@dataclass(frozen=True)
class OdeSystem:
    name: str
    dim: int
    param_names: tuple
    rhs: Callable
    jac_p: Callable
    jac_x: Callable
    true_params: tuple
    default_init: tuple
    default_tspan: tuple
    default_dt: float = 0.01
    kernel: Optional[Callable] = field(default=None, compare=False, repr=False)

    @property
    def n_params(self) -> int:
        return len(self.param_names)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if times.ndim != 1 or states.shape[0] != times.shape[0]:
            raise DimensionMismatch(
                f"times has {times.shape} but states has {states.shape}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self):
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def to_csv(self, path=None) -> str:
        """Write ``t,x1,...,xm`` with 17 significant digits; returns the text."""
        buf = io.StringIO()
        header = ["t"] + [f"x{i + 1}" for i in range(self.dim)]
        buf.write(",".join(header) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(",".join(f"{v:.17g}" for v in (t, *row)) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        return cls.from_csv_text(Path(path).read_text(), source=str(path))

    @classmethod
    def from_csv_text(cls, text: str, source: str = "<string>") -> "Trajectory":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{source}: empty file", line=1) from None
        if not header or header[0].strip() != "t" or len(header) < 2:
            raise ParseError(f"{source}:1: expected header 't,x1,...'", line=1)
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(
                    f"{source}:{lineno}: expected {width} fields, got {len(row)}",
                    line=lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"{source}:{lineno}: non-numeric field",
                                 line=lineno) from None
        if not rows:
            raise ParseError(f"{source}: no data rows", line=2)
        data = np.array(rows)
        if np.any(np.diff(data[:, 0]) <= 0):
            raise ParseError(f"{source}: times must be strictly increasing")
        return cls(data[:, 0], data[:, 1:])


def _stack(*cols):
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _zeros(x, *shape):
    return np.zeros(np.shape(x)[:-1] + shape)


# -- damped oscillator with cubic terms ---------------------------------------

def _damped_rhs(t, x, p):
    x1c, x2c = x[..., 0] ** 3, x[..., 1] ** 3
    return _stack(p[0] * x1c + p[1] * x2c, p[2] * x1c + p[3] * x2c)


def _damped_jac_p(t, x, p):
    x = np.asarray(x, dtype=float)
    J = _zeros(x, 2, 4)
    J[..., 0, 0] = J[..., 1, 2] = x[..., 0] ** 3
    J[..., 0, 1] = J[..., 1, 3] = x[..., 1] ** 3
    return J


def _damped_jac_x(t, x, p):
    x = np.asarray(x, dtype=float)
    J = _zeros(x, 2, 2)
    d1, d2 = 3 * x[..., 0] ** 2, 3 * x[..., 1] ** 2
    J[..., 0, 0] = p[0] * d1
    J[..., 0, 1] = p[1] * d2
    J[..., 1, 0] = p[2] * d1
    J[..., 1, 1] = p[3] * d2
    return J


@numba.njit(cache=True)
def _damped_kernel(t, x, p, out):
    a, b = x[0] ** 3, x[1] ** 3
    out[0] = p[0] * a + p[1] * b
    out[1] = p[2] * a + p[3] * b


def make_damped_cubic() -> OdeSystem:
    return OdeSystem(
        name="damped_cubic",
        dim=2,
        param_names=("p1", "p2", "p3", "p4"),
        rhs=_damped_rhs,
        jac_p=_damped_jac_p,
        jac_x=_damped_jac_x,
        true_params=(-0.1, 2.0, -2.0, -0.1),
        default_init=(2.0, 0.0),
        default_tspan=(0.0, 10.0),
        default_dt=0.01,
        kernel=_damped_kernel,
    )


# -- van der Pol ----------------------------------------------------------------

def _vdp_rhs(t, x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return _stack(x2, p[0] * (1 - x1 * x1) * x2 - x1)


def _vdp_jac_p(t, x, p):
    x = np.asarray(x, dtype=float)
    J = _zeros(x, 2, 1)
    J[..., 1, 0] = (1 - x[..., 0] ** 2) * x[..., 1]
    return J


def _vdp_jac_x(t, x, p):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    J = _zeros(x, 2, 2)
    J[..., 0, 1] = 1.0
    J[..., 1, 0] = -2 * p[0] * x1 * x2 - 1
    J[..., 1, 1] = p[0] * (1 - x1 * x1)
    return J


@numba.njit(cache=True)
def _vdp_kernel(t, x, p, out):
    out[0] = x[1]
    out[1] = p[0] * (1 - x[0] * x[0]) * x[1] - x[0]


def make_van_der_pol() -> OdeSystem:
    return OdeSystem(
        name="van_der_pol",
        dim=2,
        param_names=("mu",),
        rhs=_vdp_rhs,
        jac_p=_vdp_jac_p,
        jac_x=_vdp_jac_x,
        true_params=(2.0,),
        default_init=(2.0, 0.0),
        default_tspan=(0.0, 20.0),
        default_dt=0.01,
        kernel=_vdp_kernel,
    )


# -- Lotka-Volterra ------------------------------------------------------------

def _lv_rhs(t, x, p):
    u, v = x[..., 0], x[..., 1]
    return _stack(p[0] * u - p[1] * u * v, p[3] * u * v - p[2] * v)


def _lv_jac_p(t, x, p):
    x = np.asarray(x, dtype=float)
    u, v = x[..., 0], x[..., 1]
    J = _zeros(x, 2, 4)
    J[..., 0, 0] = u
    J[..., 0, 1] = -u * v
    J[..., 1, 2] = -v
    J[..., 1, 3] = u * v
    return J


def _lv_jac_x(t, x, p):
    x = np.asarray(x, dtype=float)
    u, v = x[..., 0], x[..., 1]
    J = _zeros(x, 2, 2)
    J[..., 0, 0] = p[0] - p[1] * v
    J[..., 0, 1] = -p[1] * u
    J[..., 1, 0] = p[3] * v
    J[..., 1, 1] = p[3] * u - p[2]
    return J


@numba.njit(cache=True)
def _lv_kernel(t, x, p, out):
    uv = x[0] * x[1]
    out[0] = p[0] * x[0] - p[1] * uv
    out[1] = p[3] * uv - p[2] * x[1]


def make_lotka_volterra() -> OdeSystem:
    return OdeSystem(
        name="lotka_volterra",
        dim=2,
        param_names=("alpha", "beta", "gamma", "delta"),
        rhs=_lv_rhs,
        jac_p=_lv_jac_p,
        jac_x=_lv_jac_x,
        true_params=(1.0, 0.5, 0.5, 2.0),
        default_init=(2.0, 1.0),
        default_tspan=(0.0, 10.0),
        default_dt=0.01,
        kernel=_lv_kernel,
    )


# -- Lorenz ----------------------------------------------------------------------

def _lorenz_rhs(t, x, p):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return _stack(p[0] * (x2 - x1), x1 * (p[1] - x3) - x2, x1 * x2 - p[2] * x3)


def _lorenz_jac_p(t, x, p):
    x = np.asarray(x, dtype=float)
    J = _zeros(x, 3, 3)
    J[..., 0, 0] = x[..., 1] - x[..., 0]
    J[..., 1, 1] = x[..., 0]
    J[..., 2, 2] = -x[..., 2]
    return J


def _lorenz_jac_x(t, x, p):
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    J = _zeros(x, 3, 3)
    J[..., 0, 0] = -p[0]
    J[..., 0, 1] = p[0]
    J[..., 1, 0] = p[1] - x3
    J[..., 1, 1] = -1.0
    J[..., 1, 2] = -x1
    J[..., 2, 0] = x2
    J[..., 2, 1] = x1
    J[..., 2, 2] = -p[2]
    return J


@numba.njit(cache=True)
def _lorenz_kernel(t, x, p, out):
    out[0] = p[0] * (x[1] - x[0])
    out[1] = x[0] * (p[1] - x[2]) - x[1]
    out[2] = x[0] * x[1] - p[2] * x[2]


def make_lorenz() -> OdeSystem:
    return OdeSystem(
        name="lorenz",
        dim=3,
        param_names=("sigma", "rho", "beta"),
        rhs=_lorenz_rhs,
        jac_p=_lorenz_jac_p,
        jac_x=_lorenz_jac_x,
        true_params=(10.0, 28.0, 8.0 / 3.0),
        default_init=(-8.0, 7.0, 27.0),
        default_tspan=(0.0, 25.0),
        default_dt=0.01,
        kernel=_lorenz_kernel,
    )


SYSTEMS = {
    "damped_cubic": make_damped_cubic,
    "van_der_pol": make_van_der_pol,
    "lotka_volterra": make_lotka_volterra,
    "lorenz": make_lorenz,
}

_ALIASES = {"damped": "damped_cubic", "vdp": "van_der_pol",
            "lv": "lotka_volterra"}


def get_system(name: str) -> OdeSystem:
    key = _ALIASES.get(name, name)
    if key not in SYSTEMS:
        raise UnknownSystem(
            f"unknown system {name!r}; valid: {', '.join(sorted(SYSTEMS))}")
    return SYSTEMS[key]()


# -- integration -----------------------------------------------------------------

def rk4_step(system: OdeSystem, t: float, x, p, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of size ``h``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    f = system.rhs
    k1 = f(t, x, p)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1, p)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2, p)
    k4 = f(t + h, x + h * k3, p)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise NonFiniteState(f"non-finite stage at t={t!r}", time=t)
    out = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite state after step from t={t!r}",
                             time=t + h)
    return out


def time_grid(t0: float, tf: float, dt: float) -> np.ndarray:
    """Uniform grid ``t0 + k*dt`` ending exactly at ``tf``.

    A non-integral span gets one shortened final step.
    """
    if not tf > t0:
        raise ValueError("tf must exceed t0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    ratio = (tf - t0) / dt
    n = int(math.floor(ratio + 1e-9))
    times = t0 + dt * np.arange(n + 1)
    if abs(ratio - n) <= 1e-9 * max(1.0, ratio):
        times[-1] = tf
    else:
        times = np.append(times, tf)
    return times


# not cached on disk: numba cannot pickle a signature holding another dispatcher
@numba.njit
def _rk4_loop(kernel, x0, p, times):
    n = times.shape[0]
    m = x0.shape[0]
    X = np.empty((n, m))
    X[0] = x0
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    for j in range(n - 1):
        t = times[j]
        h = times[j + 1] - t
        x = X[j]
        kernel(t, x, p, k1)
        for i in range(m):
            tmp[i] = x[i] + 0.5 * h * k1[i]
        kernel(t + 0.5 * h, tmp, p, k2)
        for i in range(m):
            tmp[i] = x[i] + 0.5 * h * k2[i]
        kernel(t + 0.5 * h, tmp, p, k3)
        for i in range(m):
            tmp[i] = x[i] + h * k3[i]
        kernel(t + h, tmp, p, k4)
        for i in range(m):
            v = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not np.isfinite(v):
                return X, j + 1
            X[j + 1, i] = v
    return X, -1


def integrate_on(system: OdeSystem, x0, p, times) -> Trajectory:
    """Integrate over an explicit, strictly increasing grid."""
    times = np.asarray(times, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    p = np.asarray(p, dtype=float)
    if x0.shape != (system.dim,):
        raise DimensionMismatch(f"x0 must have length {system.dim}")
    if not np.all(np.isfinite(x0)):
        raise NonFiniteState("non-finite initial state", time=times[0])
    if system.kernel is not None:
        states, bad = _rk4_loop(system.kernel, x0, p, times)
        if bad >= 0:
            raise NonFiniteState(
                f"{system.name}: integration diverged at t={times[bad]!r}",
                time=float(times[bad]))
        return Trajectory(times, states)
    states = np.empty((times.shape[0], system.dim))
    states[0] = x0
    for j in range(times.shape[0] - 1):
        states[j + 1] = rk4_step(system, times[j], states[j], p,
                                 times[j + 1] - times[j])
    return Trajectory(times, states)


def integrate(system: OdeSystem, x0=None, p=None, t0=None, tf=None,
              dt=None) -> Trajectory:
    """Integrate ``system`` from ``x0`` on a uniform grid; defaults fill gaps."""
    x0 = system.default_init if x0 is None else x0
    p = system.true_params if p is None else p
    t0 = system.default_tspan[0] if t0 is None else t0
    tf = system.default_tspan[1] if tf is None else tf
    dt = system.default_dt if dt is None else dt
    return integrate_on(system, x0, p, time_grid(t0, tf, dt))
