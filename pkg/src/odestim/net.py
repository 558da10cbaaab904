"""Single-hidden-layer perceptron with hand-written reverse-mode gradients.

The network maps time to a state estimate::

    s   = in_scale * t + in_shift                 (affine, [t0, tf] -> [-1, 1])
    h   = act(W1 @ s + b1)
    y   = W2 @ h + b2                             (linear output layer)
    out = out_mean + out_std * y                  (back to data units)

Flat parameter ordering: W1 row-major, b1, W2 row-major, b2. The affine
input/output maps are fixed metadata, not trainable parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, ParseError, ShapeMismatch

ACTIVATIONS = ("tanh", "logistic", "relu")


@dataclass
class Mlp:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"
    in_scale: np.ndarray = None
    in_shift: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.in_scale is None:
            self.in_scale = np.ones(self.in_dim)
        if self.in_shift is None:
            self.in_shift = np.zeros(self.in_dim)
        if self.out_mean is None:
            self.out_mean = np.zeros(self.out_dim)
        if self.out_std is None:
            self.out_std = np.ones(self.out_dim)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def n_params(self) -> int:
        return param_count(self.in_dim, self.hidden, self.out_dim)

    def set_input_range(self, lo, hi) -> None:
        """Map ``[lo, hi]`` (per input) affinely onto ``[-1, 1]``."""
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.in_dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.in_dim,))
        self.in_scale = 2.0 / (hi - lo)
        self.in_shift = -1.0 - lo * self.in_scale

    def set_output_scale(self, mean, std) -> None:
        self.out_mean = np.array(mean, dtype=float).reshape(self.out_dim)
        self.out_std = np.array(std, dtype=float).reshape(self.out_dim)


def param_count(in_dim: int, hidden: int, out_dim: int) -> int:
    return hidden * in_dim + hidden + out_dim * hidden + out_dim


def init(in_dim: int, hidden: int, out_dim: int, activation: str = "tanh",
         seed: int = 0) -> Mlp:
    """Glorot-uniform weights, zero biases, identity input/output maps."""
    if min(in_dim, hidden, out_dim) < 1:
        raise ValueError("all layer sizes must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    a1 = np.sqrt(6.0 / (in_dim + hidden))
    a2 = np.sqrt(6.0 / (hidden + out_dim))
    W1 = rng.uniform(-a1, a1, size=(hidden, in_dim))
    W2 = rng.uniform(-a2, a2, size=(out_dim, hidden))
    return Mlp(W1, np.zeros(hidden), W2, np.zeros(out_dim), activation)


def _as_inputs(net: Mlp, times) -> np.ndarray:
    x = np.asarray(times, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if net.in_dim == 1 else x.reshape(1, -1)
    if x.shape[1] != net.in_dim:
        raise ShapeMismatch(f"inputs have width {x.shape[1]}, net expects {net.in_dim}")
    return x


class Workspace:
    """Reusable scratch arrays for repeated passes over the same batch size.

    Training loops evaluate the same ``batch x hidden`` shapes thousands of
    times; reusing buffers avoids a fresh large allocation on every pass.
    Not thread-safe: one workspace per training loop.
    """

    def __init__(self):
        self._bufs = {}

    def get(self, name, shape):
        buf = self._bufs.get(name)
        if buf is None or buf.shape != shape:
            buf = self._bufs[name] = np.empty(shape)
        return buf


def _hidden_act(net: Mlp, x, out):
    """Fill ``out`` with the hidden activations; returns the scaled inputs.

    Only elementwise operations, so every row is computed exactly as it
    would be on its own.
    """
    s = x * net.in_scale + net.in_shift
    np.multiply.outer(s[:, 0], net.W1[:, 0], out=out)
    for j in range(1, net.in_dim):
        out += np.multiply.outer(s[:, j], net.W1[:, j])
    out += net.b1
    if net.activation == "tanh":
        np.tanh(out, out=out)
    elif net.activation == "logistic":
        out *= 0.5
        np.tanh(out, out=out)
        out += 1.0
        out *= 0.5
    else:
        np.maximum(out, 0.0, out=out)
    return s


def _act_deriv_inplace(name, a, out):
    """Activation derivative expressed through the activation value ``a``."""
    if name == "tanh":
        np.multiply(a, a, out=out)
        np.subtract(1.0, out, out=out)
    elif name == "logistic":
        np.subtract(1.0, a, out=out)
        out *= a
    else:
        # relu(z) > 0 iff z > 0, which makes the subgradient 0 at z == 0
        np.greater(a, 0.0, out=out)


def forward_cached(net: Mlp, times, ws: Workspace | None = None, exact: bool = False):
    """Forward pass that also returns the cache :func:`backward` can reuse.

    The output layer uses BLAS unless ``exact`` is set, in which case each
    row is reduced on its own (slower, but independent of the batch).
    """
    x = _as_inputs(net, times)
    if x.shape[0] == 0:
        return np.empty((0, net.out_dim)), None
    A = (ws.get("act", (x.shape[0], net.hidden)) if ws is not None
         else np.empty((x.shape[0], net.hidden)))
    s = _hidden_act(net, x, A)
    if exact:
        # BLAS may round a row differently depending on the batch around it
        y = np.empty((net.out_dim, x.shape[0]))
        tmp = np.empty(A.shape)
        for k in range(net.out_dim):
            np.multiply(A, net.W2[k], out=tmp)
            y[k] = np.add.reduce(tmp, axis=1)
        y = y.T.copy()
    else:
        y = A @ net.W2.T
    y += net.b2
    y *= net.out_std
    y += net.out_mean
    return y, (s, A)


def forward_batch(net: Mlp, times) -> np.ndarray:
    """Row ``i`` equals ``forward(net, times[i])`` bit for bit."""
    return forward_cached(net, times, exact=True)[0]


def forward(net: Mlp, t) -> np.ndarray:
    x = np.asarray(t, dtype=float).reshape(1, net.in_dim)
    return forward_batch(net, x)[0]


def backward(net: Mlp, times, out_grads, cache=None, ws: Workspace | None = None,
             input_grad: bool = True):
    """Gradient of ``sum(out_grads * forward_batch(net, times))``.

    Returns ``(param_grad, input_grad)``: ``param_grad`` is ordered like
    :func:`flatten`; ``input_grad`` has the shape of the inputs (``None`` when
    ``input_grad=False``). ``cache`` is the second value of
    :func:`forward_cached` for the same net and inputs.
    """
    x = _as_inputs(net, times)
    G = np.asarray(out_grads, dtype=float)
    if G.shape != (x.shape[0], net.out_dim):
        raise ShapeMismatch(
            f"out_grads shape {G.shape} != ({x.shape[0]}, {net.out_dim})")
    if x.shape[0] == 0:
        return np.zeros(net.n_params), (np.zeros(np.shape(times)) if input_grad else None)
    shape = (x.shape[0], net.hidden)
    if cache is None:
        A = ws.get("act", shape) if ws is not None else np.empty(shape)
        s = _hidden_act(net, x, A)
    else:
        s, A = cache
    B = ws.get("gz", shape) if ws is not None else np.empty(shape)
    D = ws.get("deriv", shape) if ws is not None else np.empty(shape)
    gy = G * net.out_std
    gW2 = gy.T @ A
    gb2 = gy.sum(axis=0)
    np.matmul(gy, net.W2, out=B)
    _act_deriv_inplace(net.activation, A, D)
    B *= D
    gW1 = B.T @ s
    gb1 = np.ones(x.shape[0]) @ B
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    if not input_grad:
        return grad, None
    gx = (B @ net.W1) * net.in_scale
    if np.ndim(times) <= 1 and net.in_dim == 1:
        gx = gx.reshape(np.shape(times))
    return grad, gx


def flatten(net: Mlp) -> np.ndarray:
    return np.concatenate([net.W1.ravel(), net.b1, net.W2.ravel(), net.b2])


def unflatten(net: Mlp, vector) -> Mlp:
    """Copy of ``net`` carrying the weights in ``vector``."""
    v = np.asarray(vector, dtype=float)
    if v.shape != (net.n_params,):
        raise LengthMismatch(f"expected {net.n_params} parameters, got {v.shape}")
    h, i, o = net.hidden, net.in_dim, net.out_dim
    cuts = np.cumsum([h * i, h, o * h])
    W1, b1, W2, b2 = np.split(v.copy(), cuts)
    return replace(net, W1=W1.reshape(h, i), b1=b1, W2=W2.reshape(o, h), b2=b2)


# -- checkpoint files ----------------------------------------------------------

def save_checkpoint(net: Mlp, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.params.csv`` and ``<prefix>.header.txt``.

    The header is ``key = value`` lines; vectors are space separated.
    """
    prefix = Path(prefix)
    params = prefix.with_name(prefix.name + ".params.csv")
    header = prefix.with_name(prefix.name + ".header.txt")
    params.write_text("value\n" + "".join(f"{v:.17g}\n" for v in flatten(net)))

    def vec(a):
        return " ".join(f"{v:.17g}" for v in np.ravel(a))

    header.write_text(
        f"in_dim = {net.in_dim}\n"
        f"hidden = {net.hidden}\n"
        f"out_dim = {net.out_dim}\n"
        f"activation = {net.activation}\n"
        f"in_scale = {vec(net.in_scale)}\n"
        f"in_shift = {vec(net.in_shift)}\n"
        f"out_mean = {vec(net.out_mean)}\n"
        f"out_std = {vec(net.out_std)}\n")
    return params, header


def load_checkpoint(prefix) -> Mlp:
    prefix = Path(prefix)
    header = prefix.with_name(prefix.name + ".header.txt")
    meta = {}
    for lineno, line in enumerate(header.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{header}:{lineno}: expected 'key = value'", line=lineno)
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    try:
        i, h, o = int(meta["in_dim"]), int(meta["hidden"]), int(meta["out_dim"])
        net = Mlp(np.zeros((h, i)), np.zeros(h), np.zeros((o, h)), np.zeros(o),
                  meta["activation"],
                  *(np.array(meta[k].split(), dtype=float)
                    for k in ("in_scale", "in_shift", "out_mean", "out_std")))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{header}: bad checkpoint header ({exc})") from None
    lines = prefix.with_name(prefix.name + ".params.csv").read_text().split()
    return unflatten(net, np.array(lines[1:], dtype=float))
