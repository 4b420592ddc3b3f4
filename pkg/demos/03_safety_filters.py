"""
QP safety filters on the single integrator
==========================================

A nominal proportional controller drives straight at the origin through the
obstacles. A CBF-QP filter keeps it safe; a small decay gain makes it
cautious enough to stall, while the optimal-decay variant can raise the gain
when it needs to.
"""

import numpy as np

from caffnet.controller import NominalController, ODQPController, QPController
from caffnet.sim import rollout_batch, sample_safe_states, scenario_single_integrator

s = scenario_single_integrator()
X0 = sample_safe_states(s, 5, seed=123, lower=s.start_lower, upper=s.start_upper)

controllers = {
    "nominal": NominalController(s),
    "QP  w=0.1": QPController(s, 0.1),
    "QP  w=10": QPController(s, 10.0),
    "ODQP w=0.1": ODQPController(s, 0.1),
}

# %%
# Roll each controller out for 10 s from the same five start states. The
# nominal controller ignores the obstacles, so its lowest barrier value can
# go negative.
for name, ctrl in controllers.items():
    trajs = rollout_batch(s, ctrl, X0)
    h_min = min(tr.h.min() for tr in trajs)
    dist = [np.linalg.norm(tr.states[-1]) for tr in trajs]
    print(f"{name:11s} min h {h_min:+.3f}   final distance {np.round(dist, 3)}")
