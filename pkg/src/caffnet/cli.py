"""Command-line entry point.

Verbs::

    caffnet train   --config run.yaml     checkpoints + losses.csv
    caffnet eval    --config run.yaml     metrics.csv + table.csv/.md from checkpoints
    caffnet rollout --config run.yaml     trajectory CSVs, plot data, rollouts.csv
    caffnet bench   --nc 4 6 8 --m 3      lite/full counts and latency, bench.csv
    caffnet report  --config run.yaml     train, evaluate and roll out in one go
    caffnet report  --metrics a.csv ...   re-tabulate existing metrics

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .affine import NoFeasibleCandidate
from .config import METHODS, AlphaConfig, ConfigError, RunConfig, dump_config, load_config
from .experiment import (
    evaluate_controller,
    load_run_scenario,
    load_trained,
    make_datasets,
    make_filter,
    run_table,
    save_trained,
    scalability_bench,
    start_states,
    summarize_rollouts,
    train_all,
    write_bench_csv,
    write_losses_csv,
    write_rollouts_csv,
    write_table,
)
from .qp import QpInfeasible, QpMaxIterations
from .sim import (
    ScenarioError,
    read_metrics_csv,
    rollout_batch,
    write_metrics_csv,
    write_trajectory_csv,
)
from .train import TrainingDiverged

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME"]

log = logging.getLogger("caffnet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_RUNTIME_ERRORS = (NoFeasibleCandidate, TrainingDiverged, QpInfeasible, QpMaxIterations,
                   FileNotFoundError, FloatingPointError, RuntimeError, np.linalg.LinAlgError)


def _common(p, config=True):
    if config:
        p.add_argument("--config", type=Path, help="run config (YAML); defaults apply if omitted")
        seeds = p.add_mutually_exclusive_group()
        seeds.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
        seeds.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--epochs", type=int, help="override the epoch count")
        p.add_argument("--method", choices=METHODS, help="run one method instead of the config's")
        p.add_argument("--omega", type=float, help="fixed alpha gain (implies a fixed alpha)")
        p.add_argument("--parallel", type=int, default=1, metavar="N",
                       help="train up to N seeds concurrently (default 1, sequential)")
    p.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="caffnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train network controllers, one checkpoint per seed")
    _common(p)

    p = sub.add_parser("eval", help="Table-I style metrics from checkpoints or filters")
    _common(p)
    p.add_argument("--checkpoints", type=Path, help="checkpoint directory (default OUT/checkpoints)")

    p = sub.add_parser("rollout", help="closed-loop trajectories")
    _common(p)
    p.add_argument("--checkpoints", type=Path, help="checkpoint directory (default OUT/checkpoints)")
    p.add_argument("--x0", type=str, action="append", metavar="X1,X2,...",
                   help="initial state, repeatable; default: sampled start states")

    p = sub.add_parser("bench", help="lite vs full subset counts and selection latency")
    _common(p, config=False)
    p.add_argument("--nc", type=int, nargs="+", default=list(range(4, 13)),
                   help="constraint counts (default 4..12)")
    p.add_argument("--m", type=int, default=3, help="input dimension (default 3)")
    p.add_argument("--calls", type=int, default=10_000, help="timed calls per family and n_c")
    p.add_argument("--bench-seed", type=int, default=0)

    p = sub.add_parser("report", help="full train/eval/rollout pipeline, or re-tabulate metrics")
    _common(p)
    p.add_argument("--metrics", type=Path, nargs="+", help="existing metrics CSVs to tabulate")
    return parser


def resolve_config(args) -> RunConfig:
    """Load ``--config`` and apply command-line overrides, then re-validate."""
    rc = load_config(args.config) if args.config else RunConfig()
    if args.seeds is not None:
        rc.seeds = list(args.seeds)
    elif args.seed is not None:
        rc.seeds = [args.seed]
    if args.epochs is not None:
        rc.epochs = args.epochs
    if args.method is not None or args.omega is not None:
        method = args.method or rc.method
        alpha = rc.alpha
        if args.omega is not None:
            alpha = AlphaConfig("fixed", args.omega, alpha.softplus)
        elif method in ("qp", "od_qp") and alpha.kind != "fixed":
            alpha = AlphaConfig("fixed", alpha.omega, alpha.softplus)
        rc.method, rc.alpha, rc.sweep = method, alpha, []
    if args.out is not None:
        rc.out = str(args.out)
    try:
        return rc.validate()
    except ConfigError as err:
        raise ConfigError(f"after command-line overrides: {err}", source=args.config) from None


def _outdir(rc, args):
    out = Path(args.out) if args.out else Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out, rc):
    (out / "config.yaml").write_text(dump_config(rc))


def cmd_train(args):
    rc = resolve_config(args)
    out = _outdir(rc, args)
    scenario = load_run_scenario(rc)
    entries = [e for e in rc.entries() if e.trained]
    if not entries:
        raise ConfigError("nothing to train: qp and od_qp need no training", source=args.config)
    rc_train = dataclasses.replace(rc, sweep=entries, method=entries[0].method, alpha=entries[0].alpha)
    data = make_datasets(scenario, rc_train)
    trained = train_all(scenario, rc_train, data, args.parallel)
    paths = save_trained(out / "checkpoints", trained, rc)
    write_losses_csv(out / "losses.csv", trained)
    _write_resolved(out, rc)
    for p in paths:
        print(p)
    print(out / "losses.csv")
    return EXIT_OK


def _controllers(rc, scenario, args):
    """Yield ``(entry, seed, controller, t_train_ms)`` for every entry and seed."""
    ckpt = args.checkpoints or (_outdir(rc, args) / "checkpoints")
    for entry in rc.entries():
        if not entry.trained:
            ctrl = make_filter(scenario, rc, entry)
            for seed in rc.seeds:
                yield entry, seed, ctrl, 0.0
            continue
        for seed in rc.seeds:
            ctrl, meta = load_trained(ckpt, scenario, rc, entry, seed)
            yield entry, seed, ctrl, float(meta.get("t_train_ms", 0.0))


def cmd_eval(args):
    rc = resolve_config(args)
    out = _outdir(rc, args)
    scenario = load_run_scenario(rc)
    data = make_datasets(scenario, rc)
    runs = [evaluate_controller(ctrl, data, entry.label, seed, t_ms, rc.tolerances.violation)
            for entry, seed, ctrl, t_ms in _controllers(rc, scenario, args)]
    _write_tables(out, runs)
    _write_resolved(out, rc)
    return EXIT_OK


def _write_tables(out, runs):
    write_metrics_csv(out / "metrics.csv", runs)
    write_table(out / "table.csv", runs)
    write_table(out / "table.md", runs, markdown=True)
    print((out / "table.md").read_text(), end="")


def _parse_x0(texts, n):
    X0 = []
    for t in texts:
        try:
            x = [float(v) for v in t.split(",")]
        except ValueError:
            raise ConfigError(f"--x0 {t!r}: expected {n} comma-separated numbers") from None
        if len(x) != n:
            raise ConfigError(f"--x0 {t!r}: expected {n} values, got {len(x)}")
        X0.append(x)
    return np.array(X0)


def _write_obstacles(path, scenario):
    """Polygon vertices from the scenario file, for plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["obstacle", "vertex", "x", "y"])
        for i, ob in enumerate(scenario.source.get("obstacles", [])):
            for k, v in enumerate(ob.get("vertices", [])):
                w.writerow([i, k, *v])


def cmd_rollout(args):
    rc = resolve_config(args)
    out = _outdir(rc, args)
    scenario = load_run_scenario(rc)
    if args.x0:
        X0 = _parse_x0(args.x0, scenario.n)
        if not np.all(scenario.is_safe(X0)):
            bad = X0[~scenario.is_safe(X0)][0]
            raise ConfigError(f"initial state {bad.tolist()} is outside the safe set")
    else:
        X0 = start_states(scenario, rc)
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    summaries = []
    plot_path = out / "plot_data.csv"
    with open(plot_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "start", "t"] + [f"x{i}" for i in range(scenario.n)] + ["h_min"])
        for entry, seed, ctrl, _ in _controllers(rc, scenario, args):
            trajs = rollout_batch(scenario, ctrl, X0)
            summaries += summarize_rollouts(scenario, trajs, entry.label, seed, X0)
            for i, tr in enumerate(trajs):
                write_trajectory_csv(tdir / f"{entry.label}_seed{seed}_start{i}.csv", tr)
                hmin = tr.h.min(axis=1) if tr.h.size else np.full(len(tr.times), np.inf)
                for t, x, h in zip(tr.times, tr.states, hmin):
                    w.writerow([entry.label, seed, i, repr(float(t)), *map(repr, map(float, x)),
                                repr(float(h))])
    write_rollouts_csv(out / "rollouts.csv", summaries)
    _write_obstacles(out / "obstacles.csv", scenario)
    _write_resolved(out, rc)
    for s in summaries:
        print(f"{s.method} seed {s.seed} start {s.start}: h_min {s.h_min:.3g}, "
              f"final distance {s.final_dist:.3g}")
    return EXIT_OK


def cmd_bench(args):
    out = Path(args.out) if args.out else Path("runs/bench")
    out.mkdir(parents=True, exist_ok=True)
    if args.calls < 1:
        raise ConfigError("--calls must be >= 1")
    if any(n < args.m + 1 for n in args.nc):
        raise ConfigError(f"--nc values must be >= m + 1 = {args.m + 1}")
    rows = scalability_bench(args.nc, args.m, args.calls, args.bench_seed)
    write_bench_csv(out / "bench.csv", rows)
    for r in rows:
        print(f"n_c={r['n_c']:>3} lite {r['count_lite']:>5} full {r['count_full']:>5}  "
              f"median {r['lite_median_us']:.1f}us vs {r['full_median_us']:.1f}us "
              f"(ratio {r['ratio']:.2f})")
    return EXIT_OK


def cmd_report(args):
    if args.metrics:
        runs = [r for p in args.metrics for r in read_metrics_csv(p)]
        out = Path(args.out) if args.out else Path(args.metrics[0]).parent
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "table.csv", runs)
        write_table(out / "table.md", runs, markdown=True)
        print((out / "table.md").read_text(), end="")
        return EXIT_OK
    rc = resolve_config(args)
    out = _outdir(rc, args)
    res = run_table(rc, parallel=args.parallel)
    if res.trained:
        save_trained(out / "checkpoints", res.trained, rc)
        write_losses_csv(out / "losses.csv", res.trained)
    write_rollouts_csv(out / "rollouts.csv", res.rollouts)
    _write_resolved(out, rc)
    _write_tables(out, res.metrics)
    print(f"wall time {res.wall_time:.1f}s")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout,
            "bench": cmd_bench, "report": cmd_report}


def _glue_x0(argv):
    """Turn ``--x0 -4,-3`` into ``--x0=-4,-3`` so negative states parse as values."""
    out = []
    it = iter(argv)
    for a in it:
        if a == "--x0":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--x0={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_glue_x0(argv))
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
