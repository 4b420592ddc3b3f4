"""Scenarios, closed-loop rollouts, safe-state sampling and the metric suite."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ._yamlutil import line_index, line_of, yaml_error_line
from .affine import count_subsets_full, count_subsets_lite
from .cbf import (
    HalfspaceBarrier,
    InputPolytope,
    SmoothUnionCBF,
    box_barriers,
    cbf_terms,
    polygon_barrier,
)
from .dynamics import ControlAffine, LinearDynamics, SingleIntegrator

__all__ = [
    "Scenario",
    "Trajectory",
    "RolloutMetrics",
    "ScenarioError",
    "load_scenario",
    "scenario_from_dict",
    "scenario_single_integrator",
    "scenario_scalability",
    "nominal_control",
    "sample_safe_states",
    "rollout",
    "rollout_batch",
    "compute_metrics",
    "aggregate_metrics",
    "format_mean_std",
    "write_trajectory_csv",
    "write_metrics_csv",
    "read_metrics_csv",
    "trajectory_columns",
    "METRIC_COLUMNS",
]


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` is the offending key path when known."""

    def __init__(self, message, path=None):
        self.path = tuple(path) if path is not None else None
        super().__init__(message)


@dataclass
class Scenario:
    name: str
    dynamics: ControlAffine
    U: InputPolytope
    obstacles: list
    state_cbfs: list
    kp: float
    x_ref: np.ndarray
    sample_lower: np.ndarray
    sample_upper: np.ndarray
    dt: float = 0.01
    horizon: float = 10.0
    kappa: float = 10.0
    start_lower: np.ndarray | None = None
    start_upper: np.ndarray | None = None
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.horizon < self.dt:
            raise ScenarioError("horizon must be at least one step")
        if self.U.m != self.dynamics.m:
            raise ScenarioError("input polytope and dynamics disagree on m")

    @property
    def n(self):
        return self.dynamics.n

    @property
    def m(self):
        return self.dynamics.m

    @property
    def cbfs(self):
        return list(self.obstacles) + list(self.state_cbfs)

    @property
    def n_cbf(self):
        return len(self.obstacles) + len(self.state_cbfs)

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def terms(self, x):
        return cbf_terms(x, self.cbfs, self.U, self.dynamics)

    def barrier_values(self, x):
        """All CBF values at ``x``, shape ``(..., n_cbf)``."""
        x = np.asarray(x, dtype=float)
        if not self.cbfs:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack([c.value(x) for c in self.cbfs], axis=-1)

    def is_safe(self, x):
        return np.all(self.barrier_values(x) >= 0.0, axis=-1)


# ------------------------------------------------------------ scenario files

_TOP_KEYS = {
    "name", "dynamics", "state_box", "state_limits_as_cbfs", "input_box", "kappa",
    "gradient_mode", "obstacles", "nominal", "dt", "horizon", "start_region",
}


def _box(d, key):
    try:
        lo = np.asarray(d["lower"], dtype=float)
        hi = np.asarray(d["upper"], dtype=float)
    except (KeyError, TypeError, ValueError):
        raise ScenarioError(f"{key} needs numeric 'lower' and 'upper'", (key,)) from None
    if lo.ndim != 1 or lo.shape != hi.shape or np.any(lo > hi):
        raise ScenarioError(f"{key} bounds are inconsistent", (key,))
    return lo, hi


def scenario_from_dict(d: dict) -> Scenario:
    for key in d:
        if key not in _TOP_KEYS:
            raise ScenarioError(f"unknown scenario key {key!r}", (key,))
    for key in ("state_box", "input_box"):
        if key not in d:
            raise ScenarioError(f"missing required key {key!r}")
    dyn = d.get("dynamics", {"kind": "single_integrator"})
    kind = dyn.get("kind")
    if kind == "single_integrator":
        dynamics = SingleIntegrator(int(dyn.get("n", 2)))
    elif kind == "linear":
        dynamics = LinearDynamics(dyn["B"], dyn["C"])
    else:
        raise ScenarioError(f"unsupported dynamics kind {kind!r}", ("dynamics", "kind"))
    kappa = float(d.get("kappa", 10.0))
    mode = d.get("gradient_mode", "analytic")
    lo, hi = _box(d["state_box"], "state_box")
    ulo, uhi = _box(d["input_box"], "input_box")
    obstacles = []
    for i, ob in enumerate(d.get("obstacles", [])):
        if "vertices" in ob:
            obstacles.append(polygon_barrier(ob["vertices"], kappa, mode))
        elif "halfspaces" in ob:
            hs = ob["halfspaces"]
            edges = tuple(HalfspaceBarrier(a, c) for a, c in zip(hs["normals"], hs["offsets"]))
            obstacles.append(SmoothUnionCBF(edges, kappa, mode))
        else:
            raise ScenarioError(f"obstacle {i} needs 'vertices' or 'halfspaces'", ("obstacles", i))
    state_cbfs = box_barriers(lo, hi) if d.get("state_limits_as_cbfs", True) else []
    nom = d.get("nominal", {})
    start = d.get("start_region")
    slo, shi = _box(start, "start_region") if start else (None, None)
    return Scenario(
        name=d.get("name", "scenario"),
        dynamics=dynamics,
        U=InputPolytope.box(ulo, uhi),
        obstacles=obstacles,
        state_cbfs=state_cbfs,
        kp=float(nom.get("kp", 2.0)),
        x_ref=np.asarray(nom.get("x_ref", np.zeros(dynamics.n)), dtype=float),
        sample_lower=lo,
        sample_upper=hi,
        dt=float(d.get("dt", 0.01)),
        horizon=float(d.get("horizon", 10.0)),
        kappa=kappa,
        start_lower=slo,
        start_upper=shi,
        source=d,
    )


def load_scenario(path) -> Scenario:
    """Read a scenario file; errors name the file and, when known, the line."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc.strerror}") from None
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = yaml_error_line(exc)
        raise ScenarioError(f"{path}:{line or '?'}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: scenario file must hold a mapping")
    try:
        return scenario_from_dict(data)
    except ScenarioError as exc:
        line = line_of(line_index(node), exc.path)
        where = f"{path}:{line}" if line else f"{path}"
        raise ScenarioError(f"{where}: {exc}", exc.path) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: invalid scenario: {exc!r}") from None


def scenario_single_integrator(path=None) -> Scenario:
    """The 2-D single-integrator obstacle scenario shipped with the package."""
    if path is None:
        ref = resources.files("caffnet") / "scenarios" / "single_integrator.yaml"
        with resources.as_file(ref) as p:
            return load_scenario(p)
    return load_scenario(path)


def scenario_scalability(n_c: int, m: int = 3, n: int = 4, seed: int = 0) -> Scenario:
    """Synthetic linear system whose constraint set has exactly ``n_c`` rows.

    Inputs live in the simplex-like polytope ``{u_i >= -1, sum u <= 1}``
    (``m + 1`` rows); the remaining ``n_c - m - 1`` rows are halfspace CBFs
    with random unit normals.
    """
    if n_c < m + 1:
        raise ScenarioError(f"need n_c >= m + 1 = {m + 1}")
    rng = np.random.default_rng(seed)
    B = -0.5 * np.eye(n) + 0.1 * rng.standard_normal((n, n))
    C = rng.standard_normal((n, m))
    P = np.vstack([-np.eye(m), np.ones((1, m))])
    q = np.concatenate([np.ones(m), [1.0]])
    cbfs = []
    for _ in range(n_c - m - 1):
        a = rng.standard_normal(n)
        a /= np.linalg.norm(a)
        cbfs.append(HalfspaceBarrier(a, -3.0 - rng.uniform(0, 1)))
    return Scenario(
        name=f"scalability_nc{n_c}_m{m}",
        dynamics=LinearDynamics(B, C),
        U=InputPolytope(P, q),
        obstacles=[],
        state_cbfs=cbfs,
        kp=1.0,
        x_ref=np.zeros(n),
        sample_lower=-np.ones(n),
        sample_upper=np.ones(n),
        source={"n_c": n_c, "m": m, "seed": seed,
                "count_lite": count_subsets_lite(n_c, m),
                "count_full": count_subsets_full(n_c, m)},
    )


# ---------------------------------------------------------------- dynamics


def nominal_control(scenario: Scenario, x):
    """Saturated proportional law ``k_p (x_ref - x)``."""
    u = scenario.kp * (scenario.x_ref - np.asarray(x, dtype=float))
    return scenario.U.saturate(u) if scenario.U.is_box else u


def sample_safe_states(scenario: Scenario, count: int, seed=0, lower=None, upper=None,
                       max_reject: float = 0.999):
    """Uniform rejection sampling of states with every barrier >= 0."""
    rng = np.random.default_rng(seed)
    lo = scenario.sample_lower if lower is None else np.asarray(lower, dtype=float)
    hi = scenario.sample_upper if upper is None else np.asarray(upper, dtype=float)
    out = []
    drawn = kept = 0
    while kept < count:
        batch = max(64, 2 * (count - kept))
        X = rng.uniform(lo, hi, size=(batch, len(lo)))
        ok = scenario.is_safe(X)
        drawn += batch
        kept += int(ok.sum())
        out.append(X[ok])
        if drawn >= 10_000 and kept / drawn < 1.0 - max_reject:
            raise RuntimeError(
                f"rejection sampling kept {kept} of {drawn} draws; safe set too small"
            )
    return np.concatenate(out)[:count]


@dataclass
class Trajectory:
    times: np.ndarray        # (K+1,)
    states: np.ndarray       # (K+1, n)
    controls: np.ndarray     # (K, m)
    nominal: np.ndarray      # (K, m)
    h: np.ndarray            # (K+1, n_cbf), recorded before each step
    residual: np.ndarray     # (K,) max_i (A u - b)_i of the controller's own constraints
    wall_time: float = 0.0


def rollout(scenario: Scenario, controller, x0, seed=None, steps=None) -> Trajectory:
    """Forward-Euler closed loop; controls are saturated before being applied.

    ``controller(x)`` returns a control. If it also has ``constraint_set(x)``,
    the per-step residual of that constraint set is recorded, else NaN.
    ``seed`` is accepted for controllers that draw randomness and is otherwise
    unused.
    """
    K = scenario.n_steps if steps is None else int(steps)
    dt = scenario.dt
    x = np.asarray(x0, dtype=float).copy()
    n, m = scenario.n, scenario.m
    states = np.empty((K + 1, n))
    controls = np.empty((K, m))
    nominal = np.empty((K, m))
    hs = np.empty((K + 1, scenario.n_cbf))
    resid = np.full(K, np.nan)
    has_cs = hasattr(controller, "constraint_set")
    elapsed = 0.0
    for k in range(K):
        states[k] = x
        hs[k] = scenario.barrier_values(x)
        t0 = time.perf_counter()
        u = np.asarray(controller(x), dtype=float)
        elapsed += time.perf_counter() - t0
        if scenario.U.is_box:
            u = scenario.U.saturate(u)
        if has_cs:
            cs = controller.constraint_set(x)
            resid[k] = np.max(cs.A @ u - cs.b)
        controls[k] = u
        nominal[k] = nominal_control(scenario, x)
        x = x + dt * scenario.dynamics.xdot(x, u)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"state became non-finite at step {k}")
    states[K] = x
    hs[K] = scenario.barrier_values(x)
    times = dt * np.arange(K + 1)
    return Trajectory(times, states, controls, nominal, hs, resid, elapsed)


def rollout_batch(scenario: Scenario, controller, X0, steps=None) -> list[Trajectory]:
    """Step several initial states together through ``controller.evaluate``.

    Produces the same trajectories as calling :func:`rollout` on each row of
    ``X0``, provided the controller's batched and single-state paths agree.
    Residuals come from ``controller.constraint_batch`` when available; a
    controller with ``evaluate_with_constraints`` supplies both in one call.
    ``wall_time`` is the shared controller time divided evenly.
    """
    K = scenario.n_steps if steps is None else int(steps)
    dt = scenario.dt
    X = np.array(X0, dtype=float, ndmin=2)
    N, n, m = len(X), scenario.n, scenario.m
    states = np.empty((K + 1, N, n))
    controls = np.empty((K, N, m))
    nominal = np.empty((K, N, m))
    hs = np.empty((K + 1, N, scenario.n_cbf))
    resid = np.full((K, N), np.nan)
    joint = hasattr(controller, "evaluate_with_constraints")
    has_cs = joint or hasattr(controller, "constraint_batch")
    elapsed = 0.0
    for k in range(K):
        states[k] = X
        hs[k] = scenario.barrier_values(X)
        t0 = time.perf_counter()
        if joint:
            U, A, B = controller.evaluate_with_constraints(X)
        else:
            U = controller.evaluate(X)
        elapsed += time.perf_counter() - t0
        U = np.asarray(U, dtype=float)
        if scenario.U.is_box:
            U = scenario.U.saturate(U)
        if has_cs:
            if not joint:
                A, B = controller.constraint_batch(X)
            resid[k] = np.max(np.einsum("nij,nj->ni", A, U) - B, axis=1)
        controls[k] = U
        nominal[k] = nominal_control(scenario, X)
        X = X + dt * scenario.dynamics.xdot(X, U)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"state became non-finite at step {k}")
    states[K] = X
    hs[K] = scenario.barrier_values(X)
    times = dt * np.arange(K + 1)
    return [Trajectory(times, states[:, i], controls[:, i], nominal[:, i], hs[:, i],
                       resid[:, i], elapsed / N) for i in range(N)]


# ----------------------------------------------------------------- metrics


@dataclass
class RolloutMetrics:
    cost: float
    viol_max: float
    viol_mean: float
    viol_pct: float
    t_train_ms: float = 0.0
    t_test_s: float = 0.0
    method: str = ""
    seed: int = 0


def compute_metrics(U, A, b, U_nom, t_train_ms=0.0, t_test_s=0.0, viol_tol=1e-8,
                    method="", seed=0) -> RolloutMetrics:
    """Cost and violation statistics over an evaluation set.

    ``r = ReLU(A u - b)`` per sample and row. ``viol_max``/``viol_mean`` are the
    max/mean over all entries; ``viol_pct`` is the percentage of samples with
    some entry above ``viol_tol``. ``cost`` is the MSE against ``U_nom``.
    """
    U = np.asarray(U, dtype=float)
    r = np.maximum(np.einsum("nij,nj->ni", A, U) - b, 0.0)
    d = U - U_nom
    return RolloutMetrics(
        cost=float(np.mean(d * d)),
        viol_max=float(r.max()),
        viol_mean=float(r.mean()),
        viol_pct=float(100.0 * np.mean(np.any(r > viol_tol, axis=1))),
        t_train_ms=float(t_train_ms),
        t_test_s=float(t_test_s),
        method=method,
        seed=int(seed),
    )


_METRIC_FIELDS = ("cost", "viol_max", "viol_mean", "viol_pct", "t_train_ms", "t_test_s")


def aggregate_metrics(runs) -> dict:
    """Mean and (population) std of each metric over seeds."""
    out = {}
    for f in _METRIC_FIELDS:
        v = np.array([getattr(r, f) for r in runs], dtype=float)
        out[f] = (float(v.mean()), float(v.std()))
    return out


def format_mean_std(mean, std, fmt="{:.2f}", zero_tol=1e-12):
    """``mean(std)``; magnitudes outside [0.01, 1e5) switch to scientific notation.

    Magnitudes at or below ``zero_tol`` (rounding residue) print as zero.
    """
    mean = 0.0 if abs(mean) <= zero_tol else mean
    std = 0.0 if abs(std) <= zero_tol else std
    if abs(mean) >= 1e5 or 0 < abs(mean) < 0.01:
        fmt = "{:.2e}"
    return f"{fmt.format(mean)}({fmt.format(std)})"


# --------------------------------------------------------------------- CSV

METRIC_COLUMNS = ["method", "seed", "cost", "viol_max", "viol_mean", "viol_pct",
                  "t_train_ms", "t_test_s"]


def trajectory_columns(n, m, n_cbf):
    return (["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
            + [f"u_nom{i}" for i in range(m)] + [f"h{j + 1}" for j in range(n_cbf)]
            + ["r_max"])


def write_trajectory_csv(path, traj: Trajectory):
    """One row per time step; the final row holds the terminal state with empty controls."""
    K, m = traj.controls.shape
    n = traj.states.shape[1]
    cols = trajectory_columns(n, m, traj.h.shape[1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(K + 1):
            if k < K:
                tail = list(traj.controls[k]) + list(traj.nominal[k])
                r = traj.residual[k]
            else:
                tail = [""] * (2 * m)
                r = ""
            w.writerow([traj.times[k], *traj.states[k], *tail, *traj.h[k], r])
    return Path(path)


def write_metrics_csv(path, runs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in runs:
            w.writerow([r.method, r.seed, repr(r.cost), repr(r.viol_max), repr(r.viol_mean),
                        repr(r.viol_pct), repr(r.t_train_ms), repr(r.t_test_s)])
    return Path(path)


def read_metrics_csv(path):
    runs = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        for row in rd:
            runs.append(RolloutMetrics(
                cost=float(row["cost"]), viol_max=float(row["viol_max"]),
                viol_mean=float(row["viol_mean"]), viol_pct=float(row["viol_pct"]),
                t_train_ms=float(row["t_train_ms"]), t_test_s=float(row["t_test_s"]),
                method=row["method"], seed=int(row["seed"]),
            ))
    return runs
