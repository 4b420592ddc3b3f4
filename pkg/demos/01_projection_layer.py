"""
Projecting a network output onto a polytope
===========================================

A raw output ``f`` either already satisfies ``A u <= b`` and passes through
unchanged, or it is replaced by the closest of a family of candidate
projections. Each candidate enforces one subset of rows with equality and
moves along their null space by ``w``.
"""

import numpy as np

from caffnet.affine import (
    AffineConstraintSet,
    NoFeasibleCandidate,
    count_subsets_full,
    count_subsets_lite,
    enumerate_subsets_lite,
    feasible_candidates,
    select_output,
)

# %%
# The unit box in the plane: four rows, two inputs.
box = AffineConstraintSet(np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))

y, trace = select_output([0.3, -0.4], [0.0, 0.0], box)
print("inside the box:", y, trace.branch)

# %%
# Outside the box, every single-row and every two-row candidate is formed.
# The null-space input ``w`` slides single-row candidates along their edge.
f, w = np.array([2.0, 0.5]), np.array([0.0, 0.3])
for c in feasible_candidates(f, w, box, "lite"):
    print(f"  rows {c.gamma!s:8} -> {np.round(c.value, 3)}  feasible={c.feasible}  dist={c.distance:.3f}")
y, trace = select_output(f, w, box)
print("selected", trace.gamma, "->", y)

# %%
# The lite family keeps only orders 1 and min(n_c, m). For three inputs the
# savings grow quickly with the number of rows.
for n_c in (4, 6, 8, 12):
    print(f"n_c={n_c:2d}: lite {count_subsets_lite(n_c, 3):4d}  full {count_subsets_full(n_c, 3):4d}")
print(enumerate_subsets_lite(4, 3))

# %%
# With linearly dependent rows the lite family can miss the feasible set:
# here rank(A) = 2 < min(n_c, m) = 3 and no order-3 subset is consistent.
A = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]])
cs = AffineConstraintSet(A, np.array([0.0, 0.0, 5.0]))
try:
    select_output([1.0, 1.0, 0.0], np.zeros(3), cs, "lite")
except NoFeasibleCandidate as exc:
    print("lite:", exc)
print("full:", select_output([1.0, 1.0, 0.0], np.zeros(3), cs, "full")[0])
