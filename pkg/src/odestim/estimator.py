"""Parameter estimators.

``fit_collocation`` trains a trajectory network jointly with the physical
parameters against a Huber cost made of three parts:

* data:  mean over grid points of the summed Huber penalty of ``phi - zeta``,
         divided per component by the noise level estimated from the data
* ODE:   sum over grid intervals of the Huber penalty of the difference
         quotient ``(phi[k+1] - phi[k]) / dt`` minus the right-hand side,
         weighted by ``dt`` and divided by the state std
* IC:    Huber penalty of ``phi(t0) - x0``, divided by the state std

The right-hand side is evaluated at the interval midpoint by default
(``residual="midpoint"``); ``residual="forward"`` evaluates it at the left
end point, which leaves an O(dt) bias in the recovered parameters.

Training has two stages. With the hidden layer tiled over the time window,
the output layer and ``p`` first minimize the cost exactly (the network is
linear in them); Adam then trains every weight and ``p`` together.

``fit_shooting`` integrates the ODE from the known initial state and fits the
parameters directly; it involves no network and serves as a cross-check.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import net as mlp
from .dynamics import OdeSystem, Trajectory, integrate_on
from .errors import BadHyperparameter, DimensionMismatch, NonFiniteLoss, NonFiniteState
from .loss import HuberParams, huber, huber_grad
from .optim import adam_new, minimize

DIVERGENCE_PENALTY = 1e6


@dataclass
class EstimationProblem:
    system: OdeSystem
    observations: Trajectory
    x0: Optional[np.ndarray] = None
    huber: HuberParams = field(default_factory=HuberParams)
    lambda_data: float = 1.0
    lambda_ode: float = 1.0
    lambda_ic: float = 1.0
    net_hidden: int = 64
    net_activation: str = "tanh"
    p_init: Optional[np.ndarray] = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 20000
    seed: int = 0
    residual: str = "midpoint"
    # "glorot": random net; "spread": tiled hidden units; "lsq": spread plus a
    # least-squares output layer; "solve": lsq, then the output layer and p
    # minimize the collocation cost exactly before Adam starts
    init_scheme: str = "solve"
    spread_slope: float = 1.0
    ridge: float = 1e-6
    solve_iters: int = 60
    solve_tol: float = 1e-5
    # lower bound on the estimated noise level, relative to the state std
    noise_floor: float = 1e-4
    # 0: one noise level per component; n > 0: levels from a sliding window
    # of n points, which tracks noise whose size follows the signal
    noise_window: int = 0
    # divide each ODE residual by the relative noise level of its interval
    ode_noise_weighting: bool = False
    early_stop_tol: Optional[float] = None
    early_stop_window: int = 500
    # shooting: Adam on p alone, over growing prefixes of the window
    shooting_steps: int = 3000
    shooting_lr: float = 3e-2
    shooting_stages: int = 6
    shooting_fd_step: float = 1e-6

    def __post_init__(self):
        sys_ = self.system
        if self.observations.dim != sys_.dim:
            raise DimensionMismatch(
                f"{sys_.name} has {sys_.dim} states, observations have "
                f"{self.observations.dim}")
        dts = np.diff(self.observations.times)
        if dts.size == 0:
            raise DimensionMismatch("need at least two observation times")
        self.x0 = np.asarray(sys_.default_init if self.x0 is None else self.x0, dtype=float)
        if self.x0.shape != (sys_.dim,):
            raise DimensionMismatch(f"x0 must have length {sys_.dim}")
        if self.p_init is None:
            self.p_init = 0.5 * np.asarray(sys_.true_params)
        self.p_init = np.asarray(self.p_init, dtype=float)
        if self.p_init.shape != (sys_.n_params,):
            raise DimensionMismatch(f"p_init must have length {sys_.n_params}")
        if min(self.lambda_data, self.lambda_ode, self.lambda_ic) < 0:
            raise BadHyperparameter("cost weights must be non-negative")
        if self.lambda_data + self.lambda_ode <= 0:
            raise BadHyperparameter("lambda_data + lambda_ode must be positive")
        if self.residual not in ("midpoint", "forward"):
            raise BadHyperparameter("residual must be 'midpoint' or 'forward'")
        if self.init_scheme not in INIT_SCHEMES:
            raise BadHyperparameter(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.net_hidden < 1 or min(self.steps, self.solve_iters, self.shooting_steps) < 0:
            raise BadHyperparameter("net_hidden must be >= 1 and step counts >= 0")
        if self.shooting_stages < 1:
            raise BadHyperparameter("shooting_stages must be >= 1")
        if not self.noise_floor > 0:
            raise BadHyperparameter("noise_floor must be positive")
        if self.noise_window < 0:
            raise BadHyperparameter("noise_window must be >= 0")
        self._data_scale = None
        self._ode_weight = None

    @property
    def delta(self) -> float:
        return self.huber.delta

    @property
    def state_scale(self) -> np.ndarray:
        s = self.observations.states.std(axis=0)
        return np.where(s > 0, s, 1.0)

    @property
    def data_scale(self) -> np.ndarray:
        """Noise level of the observations in data units.

        Shape ``(dim,)``, or one row per grid point when ``noise_window > 0``.
        """
        if self._data_scale is None:
            scale = self.state_scale
            z = self.observations.states / scale
            level = (local_noise_level(z, self.noise_window) if self.noise_window
                     else noise_level(z))
            self._data_scale = scale * np.maximum(level, self.noise_floor)
        return self._data_scale

    @property
    def ode_weight(self):
        """Per-interval divisor of the ODE residuals, mean one per component.

        Follows the local noise level when ``ode_noise_weighting`` is set and
        the noise level varies along the grid; otherwise 1.
        """
        if self._ode_weight is None:
            level = self.data_scale
            if self.ode_noise_weighting and level.ndim == 2:
                mid = 0.5 * (level[1:] + level[:-1])
                self._ode_weight = mid / mid.mean(axis=0)
            else:
                self._ode_weight = 1.0
        return self._ode_weight

    @property
    def param_scale(self) -> np.ndarray:
        s = np.abs(self.p_init)
        return np.where(s > 0, s, 1.0)


INIT_SCHEMES = ("glorot", "spread", "lsq", "solve")


@dataclass
class EstimateResult:
    p_hat: np.ndarray
    final_huber: float
    loss_history: np.ndarray
    net: Optional[mlp.Mlp] = None
    wall_time: float = 0.0
    method: str = "collocation"
    steps: int = 0


def noise_level(states) -> np.ndarray:
    """Per-column white-noise std estimated from fourth differences.

    Independent noise of std ``s`` gives fourth differences of variance
    ``70 s**2``; a smooth signal sampled finely contributes almost nothing.
    Needs at least five rows; returns zeros otherwise.
    """
    x = np.asarray(states, dtype=float)
    if x.shape[0] < 5:
        return np.zeros(x.shape[1])
    return np.sqrt(np.mean(np.diff(x, 4, axis=0) ** 2, axis=0) / 70.0)


def local_noise_level(states, window: int) -> np.ndarray:
    """Per-point noise std from fourth differences averaged over ``window`` points.

    Returns an array shaped like ``states``. Edge rows repeat the nearest
    interior estimate. Fewer than five rows give zeros.
    """
    x = np.asarray(states, dtype=float)
    if x.shape[0] < 5:
        return np.zeros_like(x)
    sq = np.diff(x, 4, axis=0) ** 2 / 70.0
    kernel = np.ones(max(int(window), 1))
    count = np.convolve(np.ones(sq.shape[0]), kernel, mode="same")
    smooth = np.column_stack([np.convolve(c, kernel, mode="same") / count for c in sq.T])
    # difference j spans points j..j+4; centre it on point j+2
    return np.sqrt(np.pad(smooth, ((2, 2), (0, 0)), mode="edge"))


def data_loss(estimate, observations, scale, delta) -> float:
    """Mean over all entries of the Huber penalty of normalized residuals."""
    r = (np.asarray(estimate) - np.asarray(observations)) / scale
    return float(np.mean(huber(r, delta)))


def make_net(problem: EstimationProblem) -> mlp.Mlp:
    obs = problem.observations
    net = mlp.init(1, problem.net_hidden, problem.system.dim,
                   problem.net_activation, problem.seed)
    net.set_input_range(obs.times[0], obs.times[-1])
    net.set_output_scale(obs.states.mean(axis=0), problem.state_scale)
    if problem.init_scheme != "glorot":
        spread_hidden_units(net, problem.spread_slope, problem.seed)
    if problem.init_scheme in ("lsq", "solve"):
        fit_output_layer(net, obs.times, obs.states, problem.ridge)
    return net


def fit_output_layer(net: mlp.Mlp, times, states, ridge: float = 1e-6) -> None:
    """Set the linear output layer to the ridge least-squares fit of ``states``."""
    _, (_, A) = mlp.forward_cached(net, times)
    A = np.hstack([A, np.ones((A.shape[0], 1))])
    Y = (np.asarray(states) - net.out_mean) / net.out_std
    reg = ridge * A.shape[0] * np.eye(A.shape[1])
    reg[-1, -1] = 0.0
    coef = np.linalg.solve(A.T @ A + reg, A.T @ Y)
    net.W2[:] = coef[:-1].T
    net.b2[:] = coef[-1]


def spread_hidden_units(net: mlp.Mlp, slope: float = 1.0, seed: int = 0) -> None:
    """Place one tanh transition per hidden unit, evenly across ``[-1, 1]``.

    Unit ``j`` becomes ``act(+-w * (s - c_j))`` with centers ``c_j`` on a uniform
    grid and ``w = slope * hidden / 2``, so neighbouring transitions overlap by
    roughly ``1 / slope`` widths. Output weights are redrawn uniform in
    ``+-1/sqrt(hidden)``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    h = net.hidden
    centers = np.linspace(-1.0, 1.0, h)
    w = slope * h / 2.0 * rng.choice([-1.0, 1.0], size=h)
    net.W1[:, 0] = w
    net.b1[:] = -w * centers
    net.W2[:] = rng.uniform(-1.0, 1.0, size=net.W2.shape) / np.sqrt(h)


def _ode_points(t, phi, residual):
    """Interval widths, difference quotients and the (t, x) where f is evaluated."""
    dt = np.diff(t)[:, None]
    slope = (phi[1:] - phi[:-1]) / dt
    if residual == "midpoint":
        return dt, slope, t[:-1] + 0.5 * dt[:, 0], 0.5 * (phi[1:] + phi[:-1])
    return dt, slope, t[:-1], phi[:-1]


def _residuals(phi, p, problem: EstimationProblem, scale):
    """Normalized data, ODE and IC residuals of a trajectory estimate."""
    t = problem.observations.times
    r_data = (phi - problem.observations.states) / problem.data_scale
    dt, slope, tk, xk = _ode_points(t, phi, problem.residual)
    r_ode = (slope - problem.system.rhs(tk, xk, p)) / (scale * problem.ode_weight)
    r_ic = (phi[0] - problem.x0) / scale
    return r_data, r_ode, r_ic, dt, tk, xk


def _total(problem: EstimationProblem, r_data, r_ode, r_ic, dt) -> float:
    delta = problem.delta
    return float(problem.lambda_data * np.sum(huber(r_data, delta)) / r_data.shape[0]
                 + problem.lambda_ode * np.sum(huber(r_ode, delta) * dt)
                 + problem.lambda_ic * np.sum(huber(r_ic, delta)))


def collocation_cost(net: mlp.Mlp, p, problem: EstimationProblem,
                     ws: mlp.Workspace | None = None):
    """Loss and gradient with respect to ``[flatten(net); p]``.

    Data residuals are divided by the estimated noise level, ODE and IC
    residuals by the state std.
    """
    p = np.asarray(p, dtype=float)
    sys_ = problem.system
    delta = problem.delta
    t = problem.observations.times
    scale = net.out_std
    phi, cache = mlp.forward_cached(net, t, ws)
    r_data, r_ode, r_ic, dt, tk, xk = _residuals(phi, p, problem, scale)
    loss = _total(problem, r_data, r_ode, r_ic, dt)
    if not np.isfinite(loss):
        raise NonFiniteLoss("non-finite collocation loss")

    g_phi = (problem.lambda_data / len(t)) * huber_grad(r_data, delta) / problem.data_scale
    g = problem.lambda_ode * huber_grad(r_ode, delta) * dt / (scale * problem.ode_weight)
    gJ = np.einsum("ki,kij->kj", g, sys_.jac_x(tk, xk, p))
    w_left, w_right = (0.5, 0.5) if problem.residual == "midpoint" else (1.0, 0.0)
    g_phi[1:] += g / dt - w_right * gJ
    g_phi[:-1] += -g / dt - w_left * gJ
    g_phi[0] += problem.lambda_ic * huber_grad(r_ic, delta) / scale
    g_p = -np.einsum("ki,kij->j", g, sys_.jac_p(tk, xk, p))
    g_theta, _ = mlp.backward(net, t, g_phi, cache=cache, ws=ws, input_grad=False)
    return loss, np.concatenate([g_theta, g_p])


def _irls_weights(r, delta):
    """Huber penalty divided by its quadratic surrogate: 1 inside the knee."""
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.where(a > 0, a, 1.0))


def solve_output_layer(net: mlp.Mlp, p, problem: EstimationProblem) -> np.ndarray:
    """Minimize the collocation cost over the output layer and ``p``, in place.

    With the hidden layer fixed the network output is linear in the output
    weights and every right-hand side is linear in ``p``, so Levenberg-Marquardt
    with Huber reweighting converges in a few dozen linear solves. Returns the
    new ``p``; ``net.W2`` and ``net.b2`` are overwritten.
    """
    sys_ = problem.system
    t = problem.observations.times
    K, d, P = len(t), sys_.dim, sys_.n_params
    _, (_, A) = mlp.forward_cached(net, t)
    A = np.hstack([A, np.ones((K, 1))])
    H1 = A.shape[1]
    n = d * H1 + P
    s, m = net.out_std, net.out_mean
    dt = np.diff(t)[:, None]
    D = (A[1:] - A[:-1]) / dt
    M = 0.5 * (A[1:] + A[:-1]) if problem.residual == "midpoint" else A[:-1]
    C = np.vstack([net.W2.T, net.b2[None, :]])
    p = np.array(p, dtype=float)
    delta = problem.delta
    data_gain = np.broadcast_to(s / problem.data_scale, (K, d))
    rows = np.empty((K - 1, n))
    rho = np.broadcast_to(problem.ode_weight, (K - 1, d))

    def evaluate(C, p):
        phi = m + s * (A @ C)
        res = _residuals(phi, p, problem, s)
        return _total(problem, *res[:4]), res

    cost, res = evaluate(C, p)
    # start near Gauss-Newton: the problem is linear but for the Huber weights
    mu = 1e-8
    for _ in range(problem.solve_iters):
        r_data, r_ode, r_ic, _, tk, xk = res
        Jx = sys_.jac_x(tk, xk, p)
        Jp = sys_.jac_p(tk, xk, p)
        w_data = _irls_weights(r_data, delta) * (problem.lambda_data / K)
        # rows below differentiate the unweighted residual r_ode * rho
        w_ode = _irls_weights(r_ode, delta) * (problem.lambda_ode * dt) / rho**2
        w_ic = _irls_weights(r_ic, delta) * problem.lambda_ic
        N = np.zeros((n, n))
        g = np.zeros(n)
        for i in range(d):
            blk = slice(i * H1, (i + 1) * H1)
            X = A * (np.sqrt(w_data[:, i]) * data_gain[:, i])[:, None]
            N[blk, blk] += X.T @ X
            g[blk] += A.T @ (w_data[:, i] * r_data[:, i] * data_gain[:, i])
            N[blk, blk] += w_ic[i] * np.outer(A[0], A[0])
            g[blk] += w_ic[i] * r_ic[i] * A[0]
            # d r_ode_i / d [C_0 .. C_{d-1}, p]
            for j in range(d):
                cols = rows[:, j * H1:(j + 1) * H1]
                np.multiply(M, (-Jx[:, i, j] * s[j] / s[i])[:, None], out=cols)
                if i == j:
                    cols += D
            rows[:, d * H1:] = -Jp[:, i, :] / s[i]
            g += rows.T @ (w_ode[:, i] * r_ode[:, i] * rho[:, i])
            rows *= np.sqrt(w_ode[:, i])[:, None]
            N += rows.T @ rows
        diag = np.diag(N).copy()
        while mu < 1e10:
            step = np.linalg.solve(N + np.diag(mu * (diag + 1e-12)), -g)
            C_new = C + step[:d * H1].reshape(d, H1).T
            p_new = p + step[d * H1:]
            new_cost, new_res = evaluate(C_new, p_new)
            if new_cost < cost:
                break
            mu *= 4.0
        else:
            break
        done = cost - new_cost <= problem.solve_tol * cost
        C, p, cost, res = C_new, p_new, new_cost, new_res
        mu = max(mu / 3.0, 1e-9)
        if done:
            break
    net.W2[:] = C[:-1].T
    net.b2[:] = C[-1]
    return p


def fit_collocation(problem: EstimationProblem) -> EstimateResult:
    start = time.perf_counter()
    net0 = make_net(problem)
    n_theta = net0.n_params
    pscale = problem.param_scale
    ws = mlp.Workspace()
    p0 = problem.p_init
    if problem.init_scheme == "solve":
        p0 = solve_output_layer(net0, p0, problem)

    # p is optimized in units of |p_init| so one learning rate suits 0.1 and 28 alike
    def objective(z):
        loss, grad = collocation_cost(mlp.unflatten(net0, z[:n_theta]),
                                      z[n_theta:] * pscale, problem, ws)
        grad[n_theta:] *= pscale
        return loss, grad

    z0 = np.concatenate([mlp.flatten(net0), p0 / pscale])
    if problem.steps > 0:
        state = adam_new(z0.shape[0], problem.lr, problem.beta1, problem.beta2, problem.eps)
        z, history = minimize(objective, z0, problem.steps, state,
                              problem.early_stop_tol, problem.early_stop_window)
    else:
        z, history = z0, np.array([objective(z0)[0]])
    trained = mlp.unflatten(net0, z[:n_theta])
    p_hat = z[n_theta:] * pscale
    obs = problem.observations
    final = data_loss(mlp.forward_batch(trained, obs.times), obs.states,
                      problem.state_scale, problem.delta)
    return EstimateResult(p_hat=p_hat, final_huber=final, loss_history=np.asarray(history),
                          net=trained, wall_time=time.perf_counter() - start,
                          method="collocation", steps=int(problem.steps))


def shooting_loss(problem: EstimationProblem, p, n_points: Optional[int] = None) -> float:
    """Mean normalized Huber loss of the integrated trajectory against the data.

    Divergent integrations return a large finite penalty.
    """
    obs = problem.observations
    n = len(obs) if n_points is None else n_points
    try:
        sim = integrate_on(problem.system, problem.x0, p, obs.times[:n])
    except NonFiniteState:
        return DIVERGENCE_PENALTY
    return min(data_loss(sim.states, obs.states[:n], problem.state_scale, problem.delta),
               DIVERGENCE_PENALTY)


def _stage_lengths(n_total: int, stages: int) -> list[int]:
    """Prefix lengths doubling up to the full window."""
    lengths = [n_total]
    for _ in range(stages - 1):
        lengths.append(max(lengths[-1] // 2, 3))
    return sorted(set(lengths))


def fit_shooting(problem: EstimationProblem) -> EstimateResult:
    start = time.perf_counter()
    pscale = problem.param_scale
    h_rel = problem.shooting_fd_step
    n_total = len(problem.observations)
    lengths = _stage_lengths(n_total, problem.shooting_stages)
    per_stage = max(problem.shooting_steps // len(lengths), 1)
    q = problem.p_init / pscale
    history = []
    for n_points in lengths:
        def objective(q, n_points=n_points):
            p = q * pscale
            loss = shooting_loss(problem, p, n_points)
            grad = np.empty_like(p)
            for j in range(p.shape[0]):
                h = h_rel * max(abs(p[j]), 1e-8)
                up, dn = p.copy(), p.copy()
                up[j] += h
                dn[j] -= h
                grad[j] = ((shooting_loss(problem, up, n_points)
                            - shooting_loss(problem, dn, n_points)) / (2 * h) * pscale[j])
            return loss, grad

        state = adam_new(q.shape[0], problem.shooting_lr, problem.beta1, problem.beta2,
                         problem.eps)
        q, hist = minimize(objective, q, per_stage, state,
                           problem.early_stop_tol, problem.early_stop_window)
        history.extend(hist)
    p_hat = q * pscale
    return EstimateResult(p_hat=p_hat, final_huber=shooting_loss(problem, p_hat),
                          loss_history=np.array(history), net=None,
                          wall_time=time.perf_counter() - start, method="shooting",
                          steps=len(history))


def estimated_trajectory(problem: EstimationProblem, result: EstimateResult) -> np.ndarray:
    """State estimate on the observation grid: the network, or the ODE at p_hat."""
    obs = problem.observations
    if result.net is not None:
        return mlp.forward_batch(result.net, obs.times)
    try:
        return integrate_on(problem.system, problem.x0, result.p_hat, obs.times).states
    except NonFiniteState:
        return np.full_like(obs.states, np.nan)
