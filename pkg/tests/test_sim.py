import csv

import numpy as np
import pytest

from caffnet.controller import NominalController, ODQPController, QPController
from caffnet.sim import (
    METRIC_COLUMNS,
    RolloutMetrics,
    ScenarioError,
    aggregate_metrics,
    compute_metrics,
    format_mean_std,
    load_scenario,
    nominal_control,
    read_metrics_csv,
    rollout,
    rollout_batch,
    sample_safe_states,
    scenario_from_dict,
    scenario_scalability,
    trajectory_columns,
    write_metrics_csv,
    write_trajectory_csv,
)

BASE = {
    "dynamics": {"kind": "single_integrator", "n": 2},
    "state_box": {"lower": [-5.0, -4.0], "upper": [1.0, 2.0]},
    "input_box": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]},
}


def free_scenario(**extra):
    return scenario_from_dict({**BASE, "state_limits_as_cbfs": False, **extra})


def inside_polygon(verts, X):
    """Strict interior test for a counter-clockwise convex polygon."""
    V = np.asarray(verts, dtype=float)
    E = np.roll(V, -1, axis=0) - V
    rel = X[:, None, :] - V[None]
    cross = E[None, :, 0] * rel[..., 1] - E[None, :, 1] * rel[..., 0]
    return np.all(cross > 0, axis=1)


class ZeroController:
    def __call__(self, x):
        return np.zeros(2)


# ---------------------------------------------------------------- scenario


def test_default_scenario_constants(si_scenario):
    s = si_scenario
    assert (s.n, s.m) == (2, 2)
    assert len(s.obstacles) == 3 and len(s.state_cbfs) == 4
    assert s.kappa == 10.0 and s.kp == 2.0 and s.dt == 0.01 and s.horizon == 10.0
    np.testing.assert_array_equal(s.x_ref, [0.0, 0.0])
    np.testing.assert_array_equal(s.sample_lower, [-5.0, -4.0])
    np.testing.assert_array_equal(s.sample_upper, [1.0, 2.0])
    np.testing.assert_array_equal(s.U.lower, [-1.0, -1.0])
    assert s.n_steps == 1000


def test_scenario_validation():
    with pytest.raises(ScenarioError):
        scenario_from_dict({**BASE, "dt": 0.0})
    with pytest.raises(ScenarioError):
        scenario_from_dict({**BASE, "dt": 0.1, "horizon": 0.05})
    with pytest.raises(ScenarioError) as e:
        scenario_from_dict({**BASE, "colour": 1})
    assert e.value.path == ("colour",)
    with pytest.raises(ScenarioError):
        scenario_from_dict({"state_box": BASE["state_box"]})
    with pytest.raises(ScenarioError) as e:
        scenario_from_dict({**BASE, "obstacles": [{"vertices": [[0, 0], [1, 0], [0, 1]]}, {}]})
    assert e.value.path == ("obstacles", 1)


def test_linear_and_halfspace_scenario():
    s = scenario_from_dict({
        **BASE,
        "dynamics": {"kind": "linear", "B": [[0, 0], [0, 0]], "C": [[1, 0], [0, 1]]},
        "obstacles": [{"halfspaces": {"normals": [[1, 0]], "offsets": [0.5]}}],
    })
    assert s.n_cbf == 5
    assert s.barrier_values(np.array([1.0, 0.0]))[0] == pytest.approx(0.5)


SCENARIO_ERRORS = [
    ("name: x\nstate_box: {lower: [0], upper: [1]}\ninput_box: {lower: [0], upper: [1]}\nbogus: 3\n",
     ":4:", "bogus"),
    ("state_box: {lower: [0], upper: [1]}\ninput_box:\n  lower: [1]\n  upper: [0]\n",
     ":2:", "input_box"),
    ("state_box: {lower: [0, 0], upper: [1, 1]}\ninput_box: {lower: [0, 0], upper: [1, 1]}\n"
     "dynamics:\n  kind: unicycle\n", ":4:", "unicycle"),
    ("state_box: [\n", ":", "invalid YAML"),
]


@pytest.mark.parametrize("text, where, word", SCENARIO_ERRORS)
def test_scenario_errors_name_file_and_line(tmp_path, text, where, word):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    with pytest.raises(ScenarioError) as e:
        load_scenario(p)
    msg = str(e.value)
    assert msg.startswith(str(p)) and where in msg and word in msg


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "nope.yaml")


def test_scalability_counts():
    for n_c, lite, full in ((6, 26, 41), (12, 232, 298)):
        s = scenario_scalability(n_c)
        assert s.source["count_lite"] == lite and s.source["count_full"] == full
        assert s.terms(np.zeros(4)).A.shape == (n_c, 3)
    with pytest.raises(ScenarioError):
        scenario_scalability(3)


# ------------------------------------------------------------------ nominal


def test_nominal_control_examples(si_scenario):
    s = si_scenario
    np.testing.assert_array_equal(nominal_control(s, s.x_ref), [0.0, 0.0])
    np.testing.assert_array_equal(nominal_control(s, [1.0, 1.0]), [-1.0, -1.0])
    np.testing.assert_allclose(nominal_control(s, [-0.25, 0.0]), [0.5, 0.0])


# ----------------------------------------------------------------- sampling


def test_obstacle_free_box_accepts_everything():
    s = free_scenario()
    rng_draws = np.random.default_rng(7).uniform(s.sample_lower, s.sample_upper, (1000, 2))
    assert s.is_safe(rng_draws).all()
    X = sample_safe_states(s, 500, seed=7)
    np.testing.assert_array_equal(X, rng_draws[:500])   # every draw kept, in order


def test_samples_avoid_obstacles(si_scenario):
    s = si_scenario
    X = sample_safe_states(s, 100_000, seed=3)
    assert X.shape == (100_000, 2)
    for ob in s.source["obstacles"]:
        assert not inside_polygon(ob["vertices"], X).any()
    assert np.all((X >= s.sample_lower) & (X <= s.sample_upper))


def test_sampling_is_deterministic(si_scenario):
    np.testing.assert_array_equal(sample_safe_states(si_scenario, 200, seed=11),
                                  sample_safe_states(si_scenario, 200, seed=11))
    assert not np.array_equal(sample_safe_states(si_scenario, 200, seed=11),
                              sample_safe_states(si_scenario, 200, seed=12))


def test_sampling_aborts_on_tiny_safe_set():
    s = scenario_from_dict({**BASE, "obstacles": [
        {"vertices": [[-6, -5], [2, -5], [2, 3], [-6, 3]]}]})
    with pytest.raises(RuntimeError, match="rejection"):
        sample_safe_states(s, 10)


# ----------------------------------------------------------------- rollout


def test_zero_controller_keeps_state(si_scenario):
    tr = rollout(si_scenario, ZeroController(), [-4.0, -3.0], steps=50)
    np.testing.assert_array_equal(tr.states, np.tile([-4.0, -3.0], (51, 1)))
    assert tr.times[-1] == pytest.approx(0.5)
    assert np.isnan(tr.residual).all()


def test_nominal_rollout_decays_to_origin():
    s = free_scenario()
    tr = rollout(s, NominalController(s), [1.0, 1.0])
    assert np.linalg.norm(tr.states[-1]) < 1e-3
    assert tr.states.shape == (1001, 2) and tr.controls.shape == (1000, 2)
    # once unsaturated each step multiplies the state by (1 - dt kp)
    k = 200
    np.testing.assert_allclose(tr.states[k + 1], 0.98 * tr.states[k])


def test_controls_are_saturated(si_scenario):
    class Wild:
        def __call__(self, x):
            return np.array([50.0, -50.0])

    tr = rollout(si_scenario, Wild(), [-4.0, -3.0], steps=5)
    np.testing.assert_array_equal(tr.controls, np.tile([1.0, -1.0], (5, 1)))


def test_non_finite_state_aborts():
    s = free_scenario()

    class Bad:
        def __call__(self, x):
            return np.array([np.nan, 0.0])

    with pytest.raises(FloatingPointError):
        rollout(s, Bad(), [0.0, 0.0], steps=3)


@pytest.mark.parametrize("make", [lambda s: QPController(s, 1.0), lambda s: ODQPController(s, 0.1),
                                  NominalController])
def test_rollout_batch_matches_rollout(si_scenario, make):
    s = si_scenario
    ctrl = make(s)
    X0 = np.array([[-4.2, -3.1], [-3.7, -2.6]])
    batch = rollout_batch(s, ctrl, X0, steps=60)
    for x0, tb in zip(X0, batch):
        ts = rollout(s, ctrl, x0, steps=60)
        np.testing.assert_allclose(tb.states, ts.states, atol=1e-9)
        np.testing.assert_allclose(tb.h, ts.h, atol=1e-9)
        np.testing.assert_allclose(tb.residual, ts.residual, atol=1e-8, equal_nan=True)


def test_qp_rollout_stays_safe(si_scenario):
    s = si_scenario
    trajs = rollout_batch(s, QPController(s, 10.0), [[-4.0, -3.0], [-3.6, -2.6]])
    for tr in trajs:
        assert tr.h.min() >= -1e-6
        assert np.nanmax(tr.residual) <= 1e-8
        assert np.linalg.norm(tr.states[-1]) < 0.2


# ----------------------------------------------------------------- metrics


def test_metrics_examples():
    A = np.tile(np.eye(2), (100, 1, 1))
    b = np.ones((100, 2))
    U = np.zeros((100, 2))
    m = compute_metrics(U, A, b, U)
    assert (m.cost, m.viol_max, m.viol_mean, m.viol_pct) == (0.0, 0.0, 0.0, 0.0)
    U[17] = [1.5, 0.0]
    m = compute_metrics(U, A, b, np.zeros((100, 2)))
    assert m.viol_max == 0.5 and m.viol_pct == 1.0
    assert m.viol_mean == pytest.approx(0.5 / 200)


def test_metrics_two_by_two_by_hand():
    A = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [-1.0, 0.0]]])
    b = np.array([[0.0, 0.0], [1.0, 0.0]])
    U = np.array([[0.2, -0.1], [1.0, 0.5]])
    # residuals: [0.2, 0], [0.5, 0]
    m = compute_metrics(U, A, b, np.zeros((2, 2)))
    assert m.viol_max == pytest.approx(0.5)
    assert m.viol_mean == pytest.approx(0.7 / 4)
    assert m.viol_pct == 100.0
    assert m.cost == pytest.approx((0.04 + 0.01 + 1.0 + 0.25) / 4)


def test_metrics_tolerance_and_range(rng):
    A = rng.standard_normal((50, 4, 2))
    U = rng.standard_normal((50, 2))
    b = np.einsum("nij,nj->ni", A, U) + 5e-9   # feasible up to the tolerance
    b[0, 0] -= 1e-8                           # exactly 5e-9 past the row, under viol_tol
    m = compute_metrics(U, A, b, U)
    assert m.viol_pct == 0.0 and m.viol_max <= 1e-8
    m = compute_metrics(U, A, b - 1.0, U)
    assert m.viol_pct == 100.0 and 0 <= m.viol_mean <= m.viol_max


def test_aggregate_and_format():
    runs = [RolloutMetrics(1.0, 0, 0, 0), RolloutMetrics(3.0, 0, 0, 0)]
    agg = aggregate_metrics(runs)
    assert agg["cost"] == (2.0, 1.0)
    assert format_mean_std(*agg["cost"]) == "2.00(1.00)"
    assert format_mean_std(0.0, 0.0) == "0.00(0.00)"
    assert format_mean_std(1e-17, 1e-18) == "0.00(0.00)"
    assert format_mean_std(0.004, 0.001) == "4.00e-03(1.00e-03)"
    assert format_mean_std(2e5, 10.0) == "2.00e+05(1.00e+01)"


# --------------------------------------------------------------------- CSV


def test_trajectory_csv_schema(tmp_path, si_scenario):
    tr = rollout(si_scenario, QPController(si_scenario, 1.0), [-4.0, -3.0], steps=4)
    p = write_trajectory_csv(tmp_path / "t.csv", tr)
    rows = list(csv.reader(open(p)))
    assert rows[0] == trajectory_columns(2, 2, 7)
    assert rows[0][:3] == ["t", "x0", "x1"] and rows[0][-1] == "r_max"
    assert len(rows) == 1 + 5
    assert rows[-1][3] == ""   # terminal row carries no control
    np.testing.assert_allclose([float(v) for v in rows[2][1:3]], tr.states[1])


def test_metrics_csv_round_trip(tmp_path):
    runs = [RolloutMetrics(0.1, 0.0, 0.0, 0.0, 3.5, 0.02, "qp_w10", 0),
            RolloutMetrics(1 / 3, 1e-3, 2e-5, 1.2, 0.0, 0.04, "nn_penalty", 4)]
    p = write_metrics_csv(tmp_path / "m.csv", runs)
    assert next(csv.reader(open(p))) == METRIC_COLUMNS
    assert read_metrics_csv(p) == runs


def test_metrics_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_csv(p)
