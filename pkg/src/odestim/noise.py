"""White and pink (1/f) measurement noise.

All generators are seeded ``numpy.random.Generator(PCG64(seed))`` instances
created per call; normal deviates come from numpy's ziggurat transform of the
generator's uniform bits. Nothing touches global RNG state.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory
from .errors import EmptyTrajectory

_SEED_MASK = (1 << 64) - 1


class NoiseKind(str, enum.Enum):
    WHITE = "white"
    PINK = "pink"


class NoiseMode(str, enum.Enum):
    MULTIPLICATIVE = "mult"
    ADDITIVE = "add"


_MODE_ALIASES = {"multiplicative": "mult", "additive": "add"}


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.WHITE
    intensity: float = 0.0
    mode: NoiseMode = NoiseMode.MULTIPLICATIVE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(str(getattr(self.kind, "value", self.kind)).lower()))
        mode = str(getattr(self.mode, "value", self.mode)).lower()
        object.__setattr__(self, "mode", NoiseMode(_MODE_ALIASES.get(mode, mode)))
        if not self.intensity >= 0:
            raise ValueError(f"noise intensity must be >= 0, got {self.intensity!r}")
        object.__setattr__(self, "seed", int(self.seed) & _SEED_MASK)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _SEED_MASK))


def white_noise(n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return _rng(seed).standard_normal(int(n))


def pink_noise(n: int, seed: int) -> np.ndarray:
    """Spectrally shaped noise with power spectral density proportional to 1/f.

    White Gaussian samples are transformed to the frequency domain, each bin is
    scaled by ``f**-0.5`` (the zero-frequency bin is dropped), and the inverse
    transform is standardized to zero mean and unit variance.
    """
    if n < 8:
        raise ValueError("pink noise needs n >= 8")
    spectrum = np.fft.rfft(_rng(seed).standard_normal(int(n)))
    f = np.arange(spectrum.shape[0], dtype=float)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spectrum * scale, n=int(n))
    x -= x.mean()
    x /= np.sqrt(np.mean(x * x))
    return x


_GENERATORS = {NoiseKind.WHITE: white_noise, NoiseKind.PINK: pink_noise}


def noise_matrix(kind, n: int, dim: int, seed: int) -> np.ndarray:
    """``n x dim`` matrix with one independent stream per column (seed + column)."""
    gen = _GENERATORS[NoiseKind(kind)]
    return np.column_stack([gen(n, (int(seed) + i) & _SEED_MASK) for i in range(dim)])


def corrupt(clean: Trajectory, spec: NoiseSpec) -> Trajectory:
    """Observation noise on every state component; the time grid is untouched.

    Multiplicative: ``x * (1 + eta * eps)``. Additive: ``x + eta * s * eps`` with
    ``s`` the per-component standard deviation of the clean signal.
    """
    if len(clean) == 0:
        raise EmptyTrajectory("cannot corrupt an empty trajectory")
    if spec.intensity == 0:
        return Trajectory(clean.times.copy(), clean.states.copy())
    eps = noise_matrix(spec.kind, len(clean), clean.dim, spec.seed)
    x = clean.states
    if spec.mode is NoiseMode.MULTIPLICATIVE:
        noisy = x * (1.0 + spec.intensity * eps)
    else:
        noisy = x + spec.intensity * x.std(axis=0) * eps
    return Trajectory(clean.times.copy(), noisy)
