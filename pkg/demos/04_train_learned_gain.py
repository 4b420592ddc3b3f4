"""
Training a projected controller with a learned CBF gain
=======================================================

Three small networks are trained together: the controller ``f``, the
null-space input ``w`` and a positive multiplier on the barrier gain. The
projection keeps every output feasible from the first epoch on, so the loss
only has to measure closeness to the nominal command.

This is a scaled-down run (smaller networks, 400 epochs) that finishes in
well under a minute. ``caffnet report --config configs/table1.yaml`` runs the
full comparison.
"""

import numpy as np

from caffnet.controller import QPController
from caffnet.sim import (
    compute_metrics,
    nominal_control,
    rollout_batch,
    sample_safe_states,
    scenario_single_integrator,
)
from caffnet.train import TrainConfig, train

s = scenario_single_integrator()
cfg = TrainConfig(method="caffnet_lite", epochs=400, n_samples=300, lr=1e-3,
                  controller_hidden=(64, 64), null_hidden=(32,), alpha_hidden=(32,))
res = train(s, cfg, seed=0)
print(f"loss {res.losses[0]:.3f} -> {res.losses[-1]:.4f}; "
      f"worst residual during training {max(res.max_residual):.1e}; "
      f"{res.t_train_ms:.1f} ms/epoch")

# %%
# Compare against the fixed-gain QP filter on held-out states.
X = sample_safe_states(s, 300, seed=1)
U_nom = nominal_control(s, X)
for name, ctrl in (("learned", res.controller), ("QP w=10", QPController(s, 10.0))):
    A, B = ctrl.constraint_batch(X)
    m = compute_metrics(ctrl.evaluate(X), A, B, U_nom)
    print(f"{name:8s} cost {m.cost:.4f}  max violation {m.viol_max:.1e}")

# %%
# Learned gains vary over the state space.
g = res.controller.alpha.gains(X, s.n_cbf)
print("gain range per barrier:", np.round(g.min(axis=0), 2), np.round(g.max(axis=0), 2))

# %%
# Closed loop from the start region.
X0 = sample_safe_states(s, 5, seed=123, lower=s.start_lower, upper=s.start_upper)
for tr in rollout_batch(s, res.controller, X0):
    print(f"min h {tr.h.min():+.4f}  final distance {np.linalg.norm(tr.states[-1]):.3f}")
