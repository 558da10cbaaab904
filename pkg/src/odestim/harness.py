"""Config-driven experiment runner: sweep, repeat, aggregate, tabulate.

An experiment fits one system at several noise intensities, repeating each
setting with independent noise draws. The run grid is the first noise kind
at every intensity, plus every other kind at ``comparison_eta`` (the
white-vs-pink comparison). ``full_grid = true`` runs every kind at every
intensity instead.

Each run's seed is ``base_seed + seed_offset(kind, eta, rep)`` where
``seed_offset`` is the first four bytes (big endian) of the SHA-256 digest of
the text ``"<kind>|<eta!r>|<rep>"``. The same seed drives the noise and the
network initialization, so a config file fully determines every output byte
(wall-clock timings go to a separate file).
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import get_system, integrate
from .errors import (BadHyperparameter, ConfigError, EmptyResults, NonFiniteLoss,
                     OdestimError, ParseError)
from .estimator import (EstimationProblem, estimated_trajectory, fit_collocation,
                        fit_shooting)
from .loss import HuberParams
from .noise import NoiseKind, NoiseSpec, corrupt

ESTIMATORS = ("collocation", "shooting")

def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# estimator options a config may set, with their parsers
_PROBLEM_FIELDS = {
    "lambda_data": float, "lambda_ode": float, "lambda_ic": float,
    "net_hidden": int, "net_activation": str, "lr": float, "beta1": float,
    "beta2": float, "eps": float, "steps": int, "residual": str,
    "init_scheme": str, "spread_slope": float, "ridge": float,
    "solve_iters": int, "solve_tol": float, "noise_floor": float, "noise_window": int,
    "ode_noise_weighting": _parse_bool,
    "early_stop_tol": float, "early_stop_window": int,
    "shooting_steps": int, "shooting_lr": float, "shooting_stages": int,
    "shooting_fd_step": float,
}


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    system: str = "damped_cubic"
    estimator: str = "collocation"
    kinds: tuple = ("white", "pink")
    intensities: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    repetitions: int = 10
    mode: str = "mult"
    base_seed: int = 0
    comparison_eta: float = 1e-3
    full_grid: bool = False
    out_dir: str = "results"
    huber_delta: float = 1.0
    # None means half the true parameters
    p_init: Optional[tuple] = None
    p_init_factor: float = 0.5
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            sys_ = get_system(self.system)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        self.system = sys_.name
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        try:
            self.kinds = tuple(NoiseKind(k).value for k in self.kinds)
            self.mode = NoiseSpec(mode=self.mode).mode.value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.kinds:
            raise ConfigError("at least one noise kind is required")
        self.intensities = tuple(float(e) for e in self.intensities)
        if not self.intensities or any(not (e >= 0 and math.isfinite(e))
                                       for e in self.intensities):
            raise ConfigError("intensities must be a non-empty list of finite values >= 0")
        if not (self.comparison_eta >= 0 and math.isfinite(self.comparison_eta)):
            raise ConfigError("comparison_eta must be finite and >= 0")
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be >= 1")
        self.repetitions = int(self.repetitions)
        if self.p_init is not None:
            self.p_init = tuple(float(v) for v in self.p_init)
            if len(self.p_init) != sys_.n_params:
                raise ConfigError(f"p_init needs {sys_.n_params} values")
        unknown = set(self.options) - set(_PROBLEM_FIELDS)
        if unknown:
            raise ConfigError(f"unknown estimator option(s): {', '.join(sorted(unknown))}")
        try:
            HuberParams(self.huber_delta)
            # validates the options against a throwaway problem
            self.make_problem(integrate(sys_, tf=sys_.default_tspan[0] + 10 * sys_.default_dt))
        except (BadHyperparameter, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid estimator options: {exc}") from None

    @property
    def sweep_kind(self) -> str:
        return self.kinds[0]

    def initial_guess(self) -> np.ndarray:
        if self.p_init is not None:
            return np.array(self.p_init)
        return self.p_init_factor * np.asarray(get_system(self.system).true_params)

    def make_problem(self, observations, seed: int = 0) -> EstimationProblem:
        return EstimationProblem(get_system(self.system), observations,
                                 huber=HuberParams(self.huber_delta),
                                 p_init=self.initial_guess(), seed=seed, **self.options)

    def tasks(self) -> list["RunTask"]:
        """Every (kind, eta, rep) run in a fixed order."""
        pairs = []
        for kind in self.kinds:
            if self.full_grid:
                etas = self.intensities
            elif kind == self.sweep_kind:
                etas = self.intensities + (self.comparison_eta,)
            else:
                etas = (self.comparison_eta,)
            pairs.extend((kind, eta) for eta in etas if (kind, eta) not in pairs)
        return [RunTask(self, kind, eta, rep, run_seed(self.base_seed, kind, eta, rep))
                for kind, eta in pairs for rep in range(self.repetitions)]

    # -- config files -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        """Parse the ``[experiment]`` / ``[estimator]`` key-value format.

        Unknown sections or keys are errors; every key is optional.
        """
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        extra = set(parser.sections()) - {"experiment", "estimator"}
        if extra:
            raise ConfigError(f"{source}: unknown section(s): {', '.join(sorted(extra))}")
        parsers = {
            "system": str, "estimator": str, "kinds": _str_list,
            "intensities": _float_list, "repetitions": int, "mode": str,
            "base_seed": int, "comparison_eta": float, "full_grid": _parse_bool,
            "out_dir": str, "huber_delta": float, "p_init": _float_list,
            "p_init_factor": float,
        }
        kwargs, options = {}, {}
        for section, table, dest in (("experiment", parsers, kwargs),
                                     ("estimator", _PROBLEM_FIELDS, options)):
            if not parser.has_section(section):
                continue
            for key, raw in parser.items(section):
                if key not in table:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                try:
                    dest[key] = table[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
        return cls(options=options, **kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, source=str(path))

    def to_text(self) -> str:
        lines = ["[experiment]",
                 f"system = {self.system}",
                 f"estimator = {self.estimator}",
                 f"kinds = {', '.join(self.kinds)}",
                 f"intensities = {', '.join(repr(e) for e in self.intensities)}",
                 f"repetitions = {self.repetitions}",
                 f"mode = {self.mode}",
                 f"base_seed = {self.base_seed}",
                 f"comparison_eta = {self.comparison_eta!r}",
                 f"full_grid = {str(self.full_grid).lower()}",
                 f"out_dir = {self.out_dir}",
                 f"huber_delta = {self.huber_delta!r}"]
        if self.p_init is not None:
            lines.append(f"p_init = {', '.join(repr(v) for v in self.p_init)}")
        else:
            lines.append(f"p_init_factor = {self.p_init_factor!r}")
        lines.append("")
        lines.append("[estimator]")
        lines.extend(f"{k} = {v!r}" if not isinstance(v, str) else f"{k} = {v}"
                     for k, v in sorted(self.options.items()))
        return "\n".join(lines) + "\n"


def seed_offset(kind: str, eta: float, rep: int) -> int:
    digest = hashlib.sha256(f"{kind}|{float(eta)!r}|{int(rep)}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def run_seed(base_seed: int, kind: str, eta: float, rep: int) -> int:
    return (int(base_seed) + seed_offset(kind, eta, rep)) % (1 << 63)


@dataclass(frozen=True)
class RunTask:
    config: ExperimentConfig
    kind: str
    eta: float
    rep: int
    seed: int


@dataclass
class RunRecord:
    system: str
    estimator: str
    kind: str
    mode: str
    eta: float
    rep: int
    seed: int
    status: str
    p_hat: np.ndarray
    final_huber: float
    steps: int
    wall_time: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class PlotData:
    system: str
    kind: str
    eta: float
    times: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    estimate: np.ndarray


def run_task(task: RunTask, keep_plot: bool = False):
    """Simulate, corrupt and fit one run. Returns ``(RunRecord, PlotData | None)``."""
    cfg = task.config
    sys_ = get_system(cfg.system)
    clean = integrate(sys_)
    noisy = corrupt(clean, NoiseSpec(task.kind, task.eta, cfg.mode, task.seed))
    problem = cfg.make_problem(noisy, seed=task.seed)
    fit = fit_collocation if cfg.estimator == "collocation" else fit_shooting
    base = dict(system=sys_.name, estimator=cfg.estimator, kind=task.kind, mode=cfg.mode,
                eta=task.eta, rep=task.rep, seed=task.seed)
    try:
        result = fit(problem)
    except NonFiniteLoss as exc:
        record = RunRecord(status="failed", p_hat=np.full(sys_.n_params, np.nan),
                           final_huber=math.nan, steps=0, error=str(exc), **base)
        return record, None
    record = RunRecord(status="ok", p_hat=np.asarray(result.p_hat, dtype=float),
                       final_huber=float(result.final_huber), steps=int(result.steps),
                       wall_time=float(result.wall_time), **base)
    plot = None
    if keep_plot:
        plot = PlotData(sys_.name, task.kind, task.eta, clean.times, clean.states,
                        noisy.states, estimated_trajectory(problem, result))
    return record, plot


def _run_indexed(args):
    task, keep = args
    return run_task(task, keep)


def run_experiment(config: ExperimentConfig, jobs: int = 1,
                   progress: Optional[Callable[[RunRecord], None]] = None,
                   plots: Optional[list] = None) -> list[RunRecord]:
    """Run every task of ``config``; results come back in task order.

    Runs that diverge are recorded with ``status="failed"`` rather than
    raising. When ``plots`` is a list, the first repetition of every
    (kind, eta) appends its :class:`PlotData` to it.
    """
    tasks = config.tasks()
    work = [(t, plots is not None and t.rep == 0) for t in tasks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = []
            for out in pool.map(_run_indexed, work):
                outputs.append(out)
                if progress:
                    progress(out[0])
    else:
        outputs = []
        for item in work:
            out = _run_indexed(item)
            outputs.append(out)
            if progress:
                progress(out[0])
    if plots is not None:
        plots.extend(p for _, p in outputs if p is not None)
    return [r for r, _ in outputs]


# -- aggregation ------------------------------------------------------------------

@dataclass
class AggregateRow:
    system: str
    estimator: str
    kind: str
    eta: float
    mean_p: np.ndarray
    std_p: np.ndarray
    mean_huber: float
    runs: int
    failed: int

    @property
    def key(self):
        return (self.system, self.estimator, self.kind, self.eta)


def aggregate(records: Sequence[RunRecord]) -> list[AggregateRow]:
    """Mean and sample std of p_hat per (system, estimator, kind, eta).

    Failed runs are counted but excluded from the statistics. Rows and the
    summation order inside each group are sorted, so any permutation of
    ``records`` gives identical output.
    """
    if not records:
        raise EmptyResults("no runs to aggregate")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.system, r.estimator, r.kind, float(r.eta)), []).append(r)
    rows = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: (r.rep, r.seed))
        good = [r for r in members if r.ok]
        if good:
            P = np.array([r.p_hat for r in good])
            mean = P.mean(axis=0)
            std = P.std(axis=0, ddof=1) if len(good) > 1 else np.zeros(P.shape[1])
            huber_mean = float(np.mean([r.final_huber for r in good]))
        else:
            n = len(members[0].p_hat)
            mean = std = np.full(n, np.nan)
            huber_mean = math.nan
        rows.append(AggregateRow(*key, mean_p=mean, std_p=std, mean_huber=huber_mean,
                                 runs=len(good), failed=len(members) - len(good)))
    if not any(r.runs for r in rows):
        raise EmptyResults("every run failed")
    return rows


def mean_relative_error(row: AggregateRow) -> float:
    """Mean over components of |mean p_hat / true - 1|."""
    true = np.asarray(get_system(row.system).true_params)
    return float(np.mean(np.abs(row.mean_p / true - 1.0)))


# -- files ------------------------------------------------------------------------

def _fmt(v) -> str:
    # shortest text that round-trips to the same double
    return repr(float(v))


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to a temporary sibling, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


_RUN_FIELDS = ["system", "estimator", "kind", "mode", "eta", "rep", "seed", "status",
               "p_hat", "final_huber", "steps", "error"]


def runs_csv(records: Sequence[RunRecord]) -> str:
    """Per-run rows; ``p_hat`` is a space-separated vector. No timings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_RUN_FIELDS)
    for r in records:
        w.writerow([r.system, r.estimator, r.kind, r.mode, _fmt(r.eta), r.rep, r.seed,
                    r.status, " ".join(_fmt(v) for v in r.p_hat), _fmt(r.final_huber),
                    r.steps, r.error])
    return buf.getvalue()


def timings_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "kind", "eta", "rep", "wall_time"])
    for r in records:
        w.writerow([r.system, r.kind, _fmt(r.eta), r.rep, f"{r.wall_time:.3f}"])
    return buf.getvalue()


def read_runs(path) -> list[RunRecord]:
    """Parse a ``runs.csv`` written by :func:`runs_csv`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise EmptyResults(f"{path}: file is empty")
    if header != _RUN_FIELDS:
        raise ParseError(f"{path}:1: unexpected header {header!r}", line=1)
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(_RUN_FIELDS):
            raise ParseError(f"{path}:{lineno}: expected {len(_RUN_FIELDS)} fields, "
                             f"got {len(row)}", line=lineno)
        v = dict(zip(_RUN_FIELDS, row))
        try:
            records.append(RunRecord(
                system=v["system"], estimator=v["estimator"], kind=v["kind"],
                mode=v["mode"], eta=float(v["eta"]), rep=int(v["rep"]),
                seed=int(v["seed"]), status=v["status"],
                p_hat=np.array(v["p_hat"].split(), dtype=float),
                final_huber=float(v["final_huber"]), steps=int(v["steps"]),
                error=v["error"]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from None
    return records


def aggregate_csv(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "estimator", "kind", "eta", "param", "true", "mean", "std",
                "mean_huber", "runs", "failed"])
    for row in rows:
        sys_ = get_system(row.system)
        for name, true, mean, std in zip(sys_.param_names, sys_.true_params,
                                         row.mean_p, row.std_p):
            w.writerow([row.system, row.estimator, row.kind, _fmt(row.eta), name,
                        _fmt(true), _fmt(mean), _fmt(std), _fmt(row.mean_huber),
                        row.runs, row.failed])
    return buf.getvalue()


def _markdown(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"


def _csv_text(header, body) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def _num(v) -> str:
    return "nan" if not np.isfinite(v) else format(float(v), ".6g")


def sweep_tables(rows: Sequence[AggregateRow], kind: str = "white"):
    """Per system: rows are intensities, columns the mean estimates."""
    tables = {}
    for system in sorted({r.system for r in rows}):
        header = ["eta"] + list(get_system(system).param_names)
        body = [[_num(r.eta)] + [_num(v) for v in r.mean_p]
                for r in rows if r.system == system and r.kind == kind]
        if body:
            tables[system] = (header, body)
    return tables


def comparison_tables(rows: Sequence[AggregateRow], eta: float):
    """Per system at ``eta``: rows are estimates plus the Huber loss, columns kinds."""
    tables = {}
    for system in sorted({r.system for r in rows}):
        at_eta = sorted((r for r in rows if r.system == system and r.eta == eta),
                        key=lambda r: (r.kind != "white", r.kind))
        if not at_eta:
            continue
        sys_ = get_system(system)
        header = ["quantity", "true"] + [r.kind for r in at_eta]
        body = [[name, _num(true)] + [_num(r.mean_p[i]) for r in at_eta]
                for i, (name, true) in enumerate(zip(sys_.param_names, sys_.true_params))]
        body.append(["Huber Loss", "-"] + [_num(r.mean_huber) for r in at_eta])
        tables[system] = (header, body)
    return tables


def render_tables(rows: Sequence[AggregateRow], out_dir, comparison_eta: float = 1e-3,
                  sweep_kind: str = "white") -> list[Path]:
    """Write the sweep and noise-comparison tables as CSV and Markdown.

    The CSV files are in long format (one value per row) because systems
    have different parameter names. Everything is rendered in memory first
    so an error leaves no files.
    """
    if not rows:
        raise EmptyResults("no aggregate rows to render")
    sweep = sweep_tables(rows, sweep_kind)
    comp = comparison_tables(rows, comparison_eta)
    eta_label = _num(comparison_eta)

    md_sweep, long_sweep = [], []
    for system, (header, body) in sweep.items():
        md_sweep.append(f"## {system}: mean estimates by noise intensity "
                        f"({sweep_kind} noise)\n\n" + _markdown(header, body))
        long_sweep.extend([system, sweep_kind, b[0], name, v]
                          for b in body for name, v in zip(header[1:], b[1:]))
    md_comp, long_comp = [], []
    for system, (header, body) in comp.items():
        md_comp.append(f"## {system}: noise kinds at eta = {eta_label}\n\n"
                       "Huber Loss is the mean per-point Huber data loss on the "
                       "state-std scale.\n\n" + _markdown(header, body))
        long_comp.extend([system, eta_label, b[0], b[1], kind, v]
                         for b in body for kind, v in zip(header[2:], b[2:]))
    files = {
        "table_sweep.md": "\n".join(md_sweep) or f"No {sweep_kind} noise runs.\n",
        "table_sweep.csv": _csv_text(["system", "kind", "eta", "param", "mean"], long_sweep),
        "table_noise_comparison.md": "\n".join(md_comp) or f"No runs at eta = {eta_label}.\n",
        "table_noise_comparison.csv": _csv_text(
            ["system", "eta", "quantity", "true", "kind", "value"], long_comp),
    }
    out = Path(out_dir)
    return [atomic_write(out / name, text) for name, text in files.items()]


def emit_plot_data(plot: PlotData, out_dir, sweep_kind: str = "white") -> list[Path]:
    """Time series and phase-portrait CSVs for one fitted run.

    ``plot_<system>_<eta>.csv`` has columns ``t, x1_true, x1_noisy, x1_est, ...``;
    ``phase_<system>_<eta>.csv`` pairs the true and estimated states. Kinds
    other than ``sweep_kind`` get the kind in the file name.
    """
    tag = f"{plot.system}_{_num(plot.eta)}" if plot.kind == sweep_kind else \
        f"{plot.system}_{plot.kind}_{_num(plot.eta)}"
    dim = plot.clean.shape[1]
    header = ["t"]
    for i in range(1, dim + 1):
        header += [f"x{i}_true", f"x{i}_noisy", f"x{i}_est"]
    cols = [plot.times]
    for i in range(dim):
        cols += [plot.clean[:, i], plot.noisy[:, i], plot.estimate[:, i]]
    series = np.column_stack(cols)
    phase_header = [f"x{i}_true" for i in range(1, dim + 1)] + \
        [f"x{i}_est" for i in range(1, dim + 1)]
    phase = np.column_stack([plot.clean, plot.estimate])
    out = Path(out_dir)

    def table(head, data):
        return ",".join(head) + "\n" + "".join(",".join(_fmt(v) for v in row) + "\n"
                                               for row in data)

    return [atomic_write(out / f"plot_{tag}.csv", table(header, series)),
            atomic_write(out / f"phase_{tag}.csv", table(phase_header, phase))]


def write_outputs(config: ExperimentConfig, records: Sequence[RunRecord],
                  plots: Sequence[PlotData] = (), out_dir=None) -> list[AggregateRow]:
    """Write runs, timings, aggregate, tables and plot data; returns the aggregate."""
    out = Path(out_dir or config.out_dir)
    rows = aggregate(records)
    atomic_write(out / "runs.csv", runs_csv(records))
    atomic_write(out / "timings.csv", timings_csv(records))
    atomic_write(out / "aggregate.csv", aggregate_csv(rows))
    render_tables(rows, out, config.comparison_eta, config.sweep_kind)
    for plot in plots:
        emit_plot_data(plot, out, config.sweep_kind)
    atomic_write(out / "config.cfg", config.to_text())
    return rows


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``config`` with the non-None keyword values replaced."""
    changes = {k: v for k, v in changes.items() if v is not None}
    try:
        return dataclasses.replace(config, **changes)
    except OdestimError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
