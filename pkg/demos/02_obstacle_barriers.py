"""
Smooth barriers for polygonal obstacles
=======================================

Each edge of a convex obstacle gives a halfspace barrier that is positive on
the far side of the edge. Outside the obstacle at least one of them is
positive, so a soft maximum of the edge values is a single differentiable
barrier for the whole polygon.
"""

import numpy as np

from caffnet.cbf import FixedAlpha, assemble_constraints, polygon_barrier
from caffnet.sim import scenario_single_integrator

square = polygon_barrier([[-1, -1], [1, -1], [1, 1], [-1, 1]], kappa=10.0)

# %%
# The soft maximum sits at most ln(n)/kappa below the true maximum.
for x in ([0.0, 0.0], [1.0, 0.0], [1.5, 1.5], [4.0, 0.2]):
    hi = square.edge_values(np.array(x))
    print(f"x={x}: max edge {hi.max():+.3f}  barrier {square.value(x):+.3f}  "
          f"lower bound {hi.max() - np.log(4) / square.kappa:+.3f}")

# %%
# Larger kappa tightens the bound. The gradient is a convex combination of
# edge normals, weighted toward the most positive edges.
x = np.array([1.2, 1.1])
for kappa in (1.0, 10.0, 100.0):
    b = polygon_barrier([[-1, -1], [1, -1], [1, 1], [-1, 1]], kappa)
    print(f"kappa={kappa:5}: h={b.value(x):+.4f}  grad={np.round(b.gradient(x), 4)}")

# %%
# In the shipped scenario every obstacle and every state limit contributes one
# row of the form  -Lg h u <= Lf h + alpha(h). The input box adds four more.
s = scenario_single_integrator()
cs = assemble_constraints(np.array([-3.0, -2.0]), s.cbfs, FixedAlpha(1.0), s.U, s.dynamics)
print("rows:", cs.A.shape[0], "(", len(s.obstacles), "obstacles,", len(s.state_cbfs),
      "state limits, 4 input rows )")
print(np.column_stack([cs.A, cs.b]).round(3))
