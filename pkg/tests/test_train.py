import numpy as np
import pytest

from caffnet.affine import select_output
from caffnet.controller import (
    NetworkController,
    ODQPController,
    QPController,
    load_checkpoint,
    save_checkpoint,
)
from caffnet.nn import MLP
from caffnet.qp import cbf_qp_filter
from caffnet.sim import nominal_control, sample_safe_states
from caffnet.train import TrainConfig, train, training_set


def small(method="caffnet_lite", **kw):
    base = dict(method=method, epochs=30, n_samples=40, lr=1e-3,
                controller_hidden=(16, 16), null_hidden=(8,), alpha_hidden=(8,))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_initial_nets(si_scenario):
    res = train(si_scenario, small(epochs=0), seed=3)
    assert res.losses == [] and res.epoch_ms == [] and res.t_train_ms == 0.0
    fresh = train(si_scenario, small(epochs=0), seed=3)
    for a, b in zip(res.controller.f_net.params, fresh.controller.f_net.params):
        np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="bogus")
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_training_is_deterministic(si_scenario):
    a = train(si_scenario, small(), seed=5)
    b = train(si_scenario, small(), seed=5)
    assert a.losses == b.losses
    for k in a.controller.nets:
        for p, q in zip(a.controller.nets[k].params, b.controller.nets[k].params):
            np.testing.assert_array_equal(p, q)
    c = train(si_scenario, small(), seed=6)
    assert c.losses != a.losses


def test_full_and_lite_coincide_for_two_inputs(si_scenario):
    lite = train(si_scenario, small("caffnet_lite"), seed=1)
    full = train(si_scenario, small("caffnet"), seed=1)
    assert lite.losses == full.losses


@pytest.mark.parametrize("alpha", ["learned", "fixed"])
@pytest.mark.parametrize("method", ["caffnet_lite", "caffnet"])
def test_no_violation_at_any_epoch(si_scenario, method, alpha):
    res = train(si_scenario, small(method, alpha=alpha, epochs=40), seed=2)
    assert max(res.max_residual) <= 1e-9


def test_training_reduces_loss(si_scenario):
    res = train(si_scenario, small(epochs=150), seed=0)
    assert res.losses[-1] < 0.5 * res.losses[0]


def test_penalty_baseline_trains(si_scenario):
    res = train(si_scenario, small("nn_penalty", epochs=50), seed=0)
    assert res.controller.w_net is None
    assert np.isfinite(res.losses).all()


def test_learned_alpha_starts_at_init_gain(si_scenario):
    cfg = small(epochs=0, alpha_init_gain=2.0)
    ctrl = train(si_scenario, cfg, seed=0).controller
    X = sample_safe_states(si_scenario, 50, seed=0)
    g = ctrl.alpha.gains(X, si_scenario.n_cbf)
    assert g.shape == (50, si_scenario.n_cbf)
    assert np.all(g > 0)
    # random last-layer weights add a small spread around the target gain
    assert abs(np.median(g) - 2.0) < 1.0


def test_supplied_data_is_used(si_scenario):
    cfg = small(epochs=2)
    X, U = training_set(si_scenario, cfg)
    a = train(si_scenario, cfg, seed=0)
    b = train(si_scenario, cfg, seed=0, data=(X, U))
    assert a.losses == b.losses
    np.testing.assert_allclose(U, nominal_control(si_scenario, X))


# -------------------------------------------------------------- controllers


def test_network_controller_single_matches_batch(si_scenario):
    ctrl = train(si_scenario, small(epochs=5), seed=0).controller
    X = sample_safe_states(si_scenario, 30, seed=4)
    Y = ctrl.evaluate(X)
    for x, y in zip(X, Y):
        np.testing.assert_allclose(ctrl(x), y, atol=1e-10)
        cs = ctrl.constraint_set(x)
        assert np.all(cs.A @ y <= cs.b + 1e-9)


def test_network_controller_requires_null_net(si_scenario):
    f = MLP([2, 2], rng=0)
    with pytest.raises(ValueError):
        NetworkController(si_scenario, "caffnet_lite", f)
    with pytest.raises(ValueError):
        NetworkController(si_scenario, "qp", f)


def test_filter_controllers(si_scenario):
    s = si_scenario
    X = sample_safe_states(s, 10, seed=9)
    qp = QPController(s, 10.0)
    np.testing.assert_allclose(qp.evaluate(X)[0], cbf_qp_filter(X[0], nominal_control(s, X[0]),
                                                                s.cbfs, 10.0, s.U, s.dynamics))
    od = ODQPController(s, 0.1)
    U, A, B = od.evaluate_with_constraints(X)
    assert np.all(np.einsum("nij,nj->ni", A, U) <= B + 1e-8)
    np.testing.assert_allclose(od.evaluate(X), U)


def test_checkpoint_round_trip(tmp_path, si_scenario):
    ctrl = train(si_scenario, small(epochs=3), seed=0).controller
    p = save_checkpoint(tmp_path / "c.npz", ctrl, {"seed": 0, "label": "x"})
    back, meta = load_checkpoint(p, si_scenario)
    assert meta == {"seed": 0, "label": "x"}
    assert back.method == ctrl.method and back.softplus == ctrl.softplus
    assert back.cfg == ctrl.cfg
    X = sample_safe_states(si_scenario, 20, seed=1)
    np.testing.assert_array_equal(back.evaluate(X), ctrl.evaluate(X))


def test_checkpoint_version_check(tmp_path, si_scenario):
    import json

    ctrl = train(si_scenario, small("nn_penalty", epochs=0), seed=0).controller
    p = save_checkpoint(tmp_path / "c.npz", ctrl)
    with np.load(p) as z:
        arrays = dict(z)
    doc = json.loads(str(arrays["meta"]))
    doc["format_version"] = 99
    arrays["meta"] = np.array(json.dumps(doc))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz", si_scenario)


def test_scalar_and_layer_projection_agree_after_training(si_scenario):
    ctrl = train(si_scenario, small(epochs=10), seed=0).controller
    x = np.array([-2.0, -1.5])
    y_ref, _ = select_output(ctrl.f_net(x), ctrl.w_net(x), ctrl.constraint_set(x), "lite", ctrl.cfg)
    np.testing.assert_allclose(ctrl.evaluate(x[None])[0], y_ref, atol=1e-12)
