"""The evaluation protocol shared by the command line and the benchmark tests.

For one run config: sample a training set (cost is measured there) and a
held-out test set (violations and test time are measured there), build or
train a controller per method entry and seed, then roll each one out from a
fixed set of start states.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import count_subsets_full, count_subsets_lite, select_output
from .cbf import FixedAlpha
from .config import MethodEntry, RunConfig
from .controller import (
    NetworkController,
    ODQPController,
    QPController,
    load_checkpoint,
    save_checkpoint,
)
from .sim import (
    RolloutMetrics,
    Scenario,
    Trajectory,
    aggregate_metrics,
    compute_metrics,
    format_mean_std,
    load_scenario,
    nominal_control,
    rollout_batch,
    sample_safe_states,
    scenario_scalability,
    scenario_single_integrator,
)
from .train import TrainConfig, TrainResult, train

__all__ = [
    "Datasets",
    "RolloutSummary",
    "TableResult",
    "load_run_scenario",
    "make_datasets",
    "train_config",
    "make_filter",
    "train_entry",
    "train_all",
    "evaluate_controller",
    "start_states",
    "summarize_rollouts",
    "run_table",
    "table_rows",
    "checkpoint_path",
    "load_trained",
    "save_trained",
    "scalability_bench",
    "write_bench_csv",
    "BENCH_COLUMNS",
    "write_losses_csv",
    "write_rollouts_csv",
    "write_table",
    "ROLLOUT_COLUMNS",
    "TABLE_COLUMNS",
]

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    X: np.ndarray
    U_nom: np.ndarray
    X_test: np.ndarray
    U_nom_test: np.ndarray


@dataclass
class RolloutSummary:
    method: str
    seed: int
    start: int
    x0: np.ndarray
    h_min: float
    final_dist: float
    steps: int


def load_run_scenario(rc: RunConfig) -> Scenario:
    return scenario_single_integrator() if rc.scenario is None else load_scenario(rc.scenario)


def make_datasets(scenario: Scenario, rc: RunConfig) -> Datasets:
    d = rc.data
    X = sample_safe_states(scenario, d.n_samples, seed=d.data_seed)
    X_test = sample_safe_states(scenario, d.n_test, seed=d.test_seed)
    return Datasets(X, nominal_control(scenario, X), X_test, nominal_control(scenario, X_test))


def train_config(rc: RunConfig, entry: MethodEntry) -> TrainConfig:
    t = rc.training
    return TrainConfig(
        method=entry.method,
        epochs=rc.epochs,
        n_samples=rc.data.n_samples,
        data_seed=rc.data.data_seed,
        lr=t.lr,
        penalty_weight=t.penalty_weight,
        alpha=entry.alpha.kind,
        omega=entry.alpha.omega,
        softplus=entry.alpha.softplus,
        alpha_init_gain=t.alpha_init_gain,
        controller_hidden=tuple(t.controller_hidden),
        null_hidden=tuple(t.null_hidden),
        alpha_hidden=tuple(t.alpha_hidden),
        norm_p=rc.norm_p,
        feas_tol=rc.tolerances.feas,
        pinv_rtol=rc.tolerances.pinv_rtol,
        tie_tol=rc.tolerances.tie,
    )


def make_filter(scenario: Scenario, rc: RunConfig, entry: MethodEntry):
    """QP or OD-QP controller for a training-free entry."""
    if entry.method == "qp":
        return QPController(scenario, entry.alpha.omega)
    if entry.method == "od_qp":
        o = rc.od_qp
        return ODQPController(scenario, entry.alpha.omega, o.p_omega, o.shared, o.penalty)
    raise ValueError(f"{entry.method} is not a filter method")


def train_entry(scenario: Scenario, rc: RunConfig, entry: MethodEntry, seed: int,
                data: Datasets | None = None) -> TrainResult:
    cfg = train_config(rc, entry)
    pair = None if data is None else (data.X, data.U_nom)
    return train(scenario, cfg, seed=seed, data=pair)


def _train_job(scenario, rc, entry, seed, data) -> TrainResult:
    return train_entry(scenario, rc, entry, seed, data)


def train_all(scenario: Scenario, rc: RunConfig, data: Datasets, parallel: int = 1):
    """Train every network entry for every seed; returns ``{(label, seed): TrainResult}``."""
    jobs = [(e, s) for e in rc.entries() if e.trained for s in rc.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futs = [pool.submit(_train_job, scenario, rc, e, s, data) for e, s in jobs]
            results = [f.result() for f in futs]
    else:
        results = []
        for e, s in jobs:
            t0 = time.perf_counter()
            results.append(train_entry(scenario, rc, e, s, data))
            log.info("trained %s seed %d in %.1fs", e.label, s, time.perf_counter() - t0)
    return {(e.label, s): r for (e, s), r in zip(jobs, results)}


def evaluate_controller(ctrl, data: Datasets, label: str, seed: int, t_train_ms: float = 0.0,
                        viol_tol: float = 1e-8) -> RolloutMetrics:
    """Cost over the training set; violations and timing over the test set.

    ``t_test_s`` covers constraint assembly plus the controller itself over the
    whole test set.
    """
    joint = hasattr(ctrl, "evaluate_with_constraints")
    t0 = time.perf_counter()
    if joint:
        U_test, A, B = ctrl.evaluate_with_constraints(data.X_test)
    else:
        U_test = ctrl.evaluate(data.X_test)
    t_test = time.perf_counter() - t0
    if not joint:
        A, B = ctrl.constraint_batch(data.X_test)
    m = compute_metrics(U_test, A, B, data.U_nom_test, t_train_ms, t_test, viol_tol, label, seed)
    if joint:
        U = ctrl.evaluate_with_constraints(data.X)[0]
    else:
        U = ctrl.evaluate(data.X)
    d = U - data.U_nom
    return dataclasses.replace(m, cost=float(np.mean(d * d)))


def start_states(scenario: Scenario, rc: RunConfig) -> np.ndarray:
    """Safe initial states for rollouts, drawn from the scenario's start region."""
    return sample_safe_states(scenario, rc.rollout.n_starts, seed=rc.rollout.start_seed,
                              lower=scenario.start_lower, upper=scenario.start_upper)


def summarize_rollouts(scenario: Scenario, trajs, label, seed, X0):
    out = []
    for i, (tr, x0) in enumerate(zip(trajs, X0)):
        h_min = float(tr.h.min()) if tr.h.size else float("inf")
        out.append(RolloutSummary(label, seed, i, np.asarray(x0), h_min,
                                  float(np.linalg.norm(tr.states[-1] - scenario.x_ref)),
                                  len(tr.controls)))
    return out


@dataclass
class TableResult:
    metrics: list
    rollouts: list
    trained: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def by_method(self):
        out = {}
        for m in self.metrics:
            out.setdefault(m.method, []).append(m)
        return out

    def rollouts_of(self, label):
        return [r for r in self.rollouts if r.method == label]


def run_table(rc: RunConfig, scenario: Scenario | None = None, parallel: int = 1,
              keep_trajectories: bool = False) -> TableResult:
    """Train, evaluate and roll out every entry of ``rc`` for every seed.

    Training-free filters are deterministic and independent of the seed, so
    they are rolled out once and their summaries are reported under every seed.
    """
    t_start = time.perf_counter()
    scenario = load_run_scenario(rc) if scenario is None else scenario
    data = make_datasets(scenario, rc)
    X0 = start_states(scenario, rc) if rc.rollout.n_starts else np.zeros((0, scenario.n))
    trained = train_all(scenario, rc, data, parallel)
    metrics, rollouts, trajs = [], [], {}
    tol = rc.tolerances.violation
    for entry in rc.entries():
        if entry.trained:
            per_seed = [(s, trained[(entry.label, s)].controller, trained[(entry.label, s)].t_train_ms)
                        for s in rc.seeds]
        else:
            ctrl = make_filter(scenario, rc, entry)
            per_seed = [(s, ctrl, 0.0) for s in rc.seeds]
        shared = None
        for seed, ctrl, t_ms in per_seed:
            metrics.append(evaluate_controller(ctrl, data, entry.label, seed, t_ms, tol))
            if not len(X0):
                continue
            if entry.trained or shared is None:
                shared = rollout_batch(scenario, ctrl, X0)
            rollouts += summarize_rollouts(scenario, shared, entry.label, seed, X0)
            if keep_trajectories:
                trajs[(entry.label, seed)] = shared
        log.info("evaluated %s", entry.label)
    return TableResult(metrics, rollouts, trained, trajs, time.perf_counter() - t_start)


# ------------------------------------------------------------------ output

TABLE_COLUMNS = ["method", "cost", "viol_max", "viol_mean", "viol_pct", "t_train_ms", "t_test_s"]
ROLLOUT_COLUMNS = ["method", "seed", "start", "x0", "h_min", "final_dist", "steps"]


def table_rows(metrics) -> list[dict]:
    """One Table-I-style row per method, each cell ``mean(std)`` over seeds."""
    groups = {}
    for m in metrics:
        groups.setdefault(m.method, []).append(m)
    rows = []
    for label, runs in groups.items():
        agg = aggregate_metrics(runs)
        row = {"method": label}
        for k in TABLE_COLUMNS[1:]:
            mean, std = agg[k]
            row[k] = format_mean_std(mean, std) + ("%" if k == "viol_pct" else "")
        rows.append(row)
    return rows


def write_table(path, metrics, markdown: bool = False):
    rows = table_rows(metrics)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if markdown:
            fh.write("| " + " | ".join(TABLE_COLUMNS) + " |\n")
            fh.write("|" + "---|" * len(TABLE_COLUMNS) + "\n")
            for r in rows:
                fh.write("| " + " | ".join(r[c] for c in TABLE_COLUMNS) + " |\n")
        else:
            w = csv.DictWriter(fh, TABLE_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return path


def write_rollouts_csv(path, summaries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROLLOUT_COLUMNS)
        for r in summaries:
            w.writerow([r.method, r.seed, r.start, " ".join(repr(float(v)) for v in r.x0),
                        repr(r.h_min), repr(r.final_dist), r.steps])
    return Path(path)


def write_losses_csv(path, trained: dict):
    """Long format: one row per (method, seed, epoch)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "epoch", "loss", "epoch_ms", "max_residual"])
        for (label, seed), res in trained.items():
            for k, (loss, ms, r) in enumerate(zip(res.losses, res.epoch_ms, res.max_residual)):
                w.writerow([label, seed, k, repr(loss), repr(ms), repr(r)])
    return Path(path)


def checkpoint_path(directory, label: str, seed: int) -> Path:
    return Path(directory) / f"{label}_seed{seed}.npz"


def save_trained(directory, trained: dict, rc: RunConfig):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for (label, seed), res in trained.items():
        meta = {"label": label, "seed": seed, "epochs": len(res.losses),
                "t_train_ms": res.t_train_ms,
                "final_loss": res.losses[-1] if res.losses else None}
        paths.append(save_checkpoint(checkpoint_path(directory, label, seed), res.controller, meta))
    return paths


def load_trained(directory, scenario: Scenario, rc: RunConfig, entry: MethodEntry, seed: int):
    """Load one checkpoint; raises ``FileNotFoundError`` if it is missing."""
    path = checkpoint_path(directory, entry.label, seed)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run 'train' first")
    ctrl, meta = load_checkpoint(path, scenario)
    if ctrl.method != entry.method:
        raise ValueError(f"{path} holds a {ctrl.method} controller, expected {entry.method}")
    ctrl.cfg = rc.selector
    return ctrl, meta


# --------------------------------------------------------------- scalability

BENCH_COLUMNS = ["n_c", "m", "count_lite", "count_full", "calls",
                 "lite_median_us", "lite_p95_us", "full_median_us", "full_p95_us", "ratio"]


def _latencies(f, w, sets, subsets, cfg):
    out = np.empty(len(sets))
    for i, cs in enumerate(sets):
        t0 = time.perf_counter()
        select_output(f[i], w[i], cs, subsets, cfg)
        out[i] = time.perf_counter() - t0
    return out


def scalability_bench(n_cs, m: int = 3, calls: int = 10_000, seed: int = 0,
                      omega: float = 1.0, cfg=None) -> list[dict]:
    """Candidate counts and per-call ``select_output`` latency, lite against full.

    Each call uses the constraint set at a sampled state of
    :func:`scenario_scalability` and random ``f``, ``w``. The same instances
    are timed for both families, lite first and then full, after one warm-up
    call each so that the subset tables are built before timing.
    """
    from .affine import AffineConstraintSet, SelectorConfig

    cfg = SelectorConfig() if cfg is None else cfg
    rng = np.random.default_rng(seed)
    alpha = FixedAlpha(omega)
    rows = []
    for n_c in n_cs:
        sc = scenario_scalability(n_c, m=m, seed=seed)
        X = rng.uniform(sc.sample_lower, sc.sample_upper, size=(calls, sc.n))
        t = sc.terms(X)
        A = t.A
        B = t.b(alpha.gains(X, t.n_cbf))
        sets = [AffineConstraintSet(A[i], B[i]) for i in range(calls)]
        f = rng.uniform(-3.0, 3.0, size=(calls, m))
        w = rng.standard_normal((calls, m))
        for fam in ("lite", "full"):
            select_output(f[0], w[0], sets[0], fam, cfg)
        lite = _latencies(f, w, sets, "lite", cfg) * 1e6
        full = _latencies(f, w, sets, "full", cfg) * 1e6
        rows.append({
            "n_c": n_c, "m": m,
            "count_lite": count_subsets_lite(n_c, m), "count_full": count_subsets_full(n_c, m),
            "calls": calls,
            "lite_median_us": float(np.median(lite)), "lite_p95_us": float(np.percentile(lite, 95)),
            "full_median_us": float(np.median(full)), "full_p95_us": float(np.percentile(full, 95)),
            "ratio": float(np.median(lite) / np.median(full)),
        })
    return rows


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return Path(path)
