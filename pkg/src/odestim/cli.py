"""Command-line entry point: ``odestim {simulate,fit,benchmark,report}``.

Exit status is 0 when all requested work completed and 2 on any error, with
``error[<category>]: <message>`` on stderr. Output files go to ``--out``, else
``$ODESTIM_OUT``, else the config's ``out_dir`` (or the current directory
where no config is involved).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .dynamics import SYSTEMS, Trajectory, get_system, integrate
from .errors import ConfigError, DimensionMismatch, EmptyResults, OdestimError
from .estimator import estimated_trajectory, fit_collocation, fit_shooting
from .noise import NoiseSpec, corrupt

log = logging.getLogger("odestim")


def _out_dir(args, fallback=".") -> Path:
    return Path(args.out or os.environ.get("ODESTIM_OUT") or fallback)


def _load_config(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = harness.ExperimentConfig.from_file(args.config)
    return harness.with_overrides(
        cfg,
        system=getattr(args, "system", None),
        estimator=getattr(args, "estimator", None),
        repetitions=getattr(args, "reps", None),
        base_seed=getattr(args, "seed", None),
    )


def cmd_simulate(args) -> int:
    sys_ = get_system(args.system)
    clean = integrate(sys_)
    noisy = corrupt(clean, NoiseSpec(args.kind, args.eta, args.mode, args.seed))
    out = _out_dir(args)
    clean_path = harness.atomic_write(out / f"{sys_.name}_clean.csv", clean.to_csv())
    noisy_path = harness.atomic_write(out / f"{sys_.name}_noisy.csv", noisy.to_csv())
    print(f"wrote {clean_path} and {noisy_path} ({len(clean)} rows each)")
    return 0


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    sys_ = get_system(cfg.system)
    data = Trajectory.from_csv(args.data)
    if data.dim != sys_.dim:
        raise DimensionMismatch(
            f"{args.data} has {data.dim} state columns, {sys_.name} needs {sys_.dim}")
    seed = cfg.base_seed if args.seed is None else args.seed
    problem = cfg.make_problem(data, seed=seed)
    fit = fit_collocation if cfg.estimator == "collocation" else fit_shooting
    result = fit(problem)
    for name, value in zip(sys_.param_names, result.p_hat):
        print(f"{name} = {value:.10g}")
    print(f"final_huber = {result.final_huber:.6g}")
    print(f"wall_time = {result.wall_time:.2f}s")

    out = _out_dir(args, cfg.out_dir)
    record = harness.RunRecord(sys_.name, cfg.estimator, "data", "-", float("nan"), 0, seed,
                               "ok", result.p_hat, result.final_huber, result.steps,
                               result.wall_time)
    harness.atomic_write(out / "fit_result.csv", harness.runs_csv([record]))
    estimate = estimated_trajectory(problem, result)
    header = ["t"] + [f"x{i}_{tag}" for i in range(1, sys_.dim + 1) for tag in ("data", "est")]
    cols = [data.times] + [c for i in range(sys_.dim)
                           for c in (data.states[:, i], estimate[:, i])]
    table = np.column_stack(cols)
    harness.atomic_write(out / f"fit_plot_{sys_.name}.csv",
                         ",".join(header) + "\n"
                         + "".join(",".join(format(v, ".17g") for v in row) + "\n"
                                   for row in table))
    return 0


def _summary(rows) -> str:
    lines = []
    for row in rows:
        err = harness.mean_relative_error(row) if row.runs else float("nan")
        lines.append(f"{row.system:15s} {row.estimator:11s} {row.kind:5s} "
                     f"eta={row.eta:<8g} runs={row.runs:<3d} failed={row.failed:<3d} "
                     f"mean |rel err|={err:.3%}")
    return "\n".join(lines)


def cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg.out_dir)

    def progress(r):
        log.info("%s %s eta=%g rep=%d %s p=%s", r.system, r.kind, r.eta, r.rep, r.status,
                 np.array2string(r.p_hat, precision=5))

    plots = []
    records = harness.run_experiment(cfg, jobs=args.jobs, progress=progress, plots=plots)
    rows = harness.write_outputs(cfg, records, plots, out)
    print(_summary(rows))
    failed = sum(not r.ok for r in records)
    if failed:
        print(f"{failed} run(s) failed and were excluded from the means", file=sys.stderr)
    print(f"outputs in {out}")
    return 0


def cmd_report(args) -> int:
    records = harness.read_runs(args.runs)
    if args.system:
        name = get_system(args.system).name
        records = [r for r in records if r.system == name]
    if not records:
        raise EmptyResults(f"no runs in {args.runs}"
                           + (f" for {args.system}" if args.system else ""))
    out = _out_dir(args, Path(args.runs).parent)
    rows = harness.aggregate(records)
    harness.atomic_write(out / "aggregate.csv", harness.aggregate_csv(rows))
    eta = 1e-3 if args.eta is None else args.eta
    harness.render_tables(rows, out, eta, args.kind or "white")
    print(_summary(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odestim", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--out", help="output directory (default: $ODESTIM_OUT)")
        p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
        if config:
            p.add_argument("--config", help="experiment config (.cfg)")

    p = sub.add_parser("simulate", help="write clean and noisy trajectories")
    common(p)
    p.add_argument("--system", required=True, help=f"one of {', '.join(SYSTEMS)}")
    p.add_argument("--eta", type=float, default=0.0, help="noise intensity")
    p.add_argument("--kind", choices=["white", "pink"], default="white")
    p.add_argument("--mode", choices=["mult", "add"], default="mult")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate parameters from a trajectory CSV")
    common(p, config=True)
    p.add_argument("--data", required=True, help="CSV with header t,x1,...")
    p.add_argument("--system", help="override the config's system")
    p.add_argument("--estimator", choices=harness.ESTIMATORS)
    p.add_argument("--seed", type=int, help="network initialization seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("benchmark", help="run a full noise sweep from a config")
    common(p, config=True)
    p.add_argument("--system", help="override the config's system")
    p.add_argument("--estimator", choices=harness.ESTIMATORS)
    p.add_argument("--seed", type=int, help="override base_seed")
    p.add_argument("--reps", type=int, help="override repetitions")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="re-aggregate a runs.csv into tables")
    common(p)
    p.add_argument("runs", help="runs.csv from a benchmark")
    p.add_argument("--system", help="only this system")
    p.add_argument("--eta", type=float, help="intensity for the noise-kind comparison")
    p.add_argument("--kind", choices=["white", "pink"], help="noise kind of the sweep table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OdestimError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io_error]: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error[interrupted]: stopped before completion", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
