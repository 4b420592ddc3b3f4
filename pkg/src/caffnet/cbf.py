"""Barrier functions and assembly of the state-dependent constraint set.

Sign convention: every barrier is safe where it is nonnegative. A polygonal
obstacle is the region where all of its edge barriers are negative, and its
smooth union is nonnegative outside the (slightly inflated) obstacle.

Each CBF row reads ``-L_g h(x) u <= L_f h(x) + alpha(x, h(x))``, followed by
the input rows ``P u <= q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .affine import AffineConstraintSet
from .dynamics import ControlAffine

__all__ = [
    "HalfspaceBarrier",
    "SmoothUnionCBF",
    "InputPolytope",
    "FixedAlpha",
    "LearnedAlpha",
    "ConstraintTerms",
    "smooth_union_value",
    "smooth_union_gradient",
    "lie_derivatives",
    "cbf_terms",
    "assemble_constraints",
    "box_barriers",
    "polygon_barrier",
]


@dataclass(frozen=True)
class HalfspaceBarrier:
    """``h(x) = a . x - c``."""

    a: np.ndarray
    c: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        if not np.any(a):
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))

    def value(self, x):
        return np.asarray(x, dtype=float) @ self.a - self.c

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.a, x.shape).copy()


@dataclass(frozen=True)
class SmoothUnionCBF:
    """Log-sum-exp union of halfspace barriers.

    ``h(x) = ln(sum_i exp(kappa h_i(x))) / kappa - ln(n) / kappa``.

    ``gradient_mode`` picks the gradient used in the Lie derivatives:
    ``"analytic"`` is the true gradient of ``h`` (softmax weights summing to 1);
    ``"paper"`` uses weights ``exp(kappa (h_i - h))``, which sum to ``n``.
    """

    edges: tuple
    kappa: float = 10.0
    gradient_mode: str = "analytic"

    def __post_init__(self):
        edges = tuple(self.edges)
        if not edges:
            raise ValueError("smooth union needs at least one edge")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.gradient_mode not in ("analytic", "paper"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_normals", np.stack([e.a for e in edges]))
        object.__setattr__(self, "_offsets", np.array([e.c for e in edges]))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_values(self, x):
        return np.asarray(x, dtype=float) @ self._normals.T - self._offsets

    def value(self, x):
        return smooth_union_value(self, x)

    def lambdas(self, x):
        """Weights ``exp(kappa (h_i - h))``; they sum to the number of edges."""
        hi = self.edge_values(x)
        h = self.value(x)
        return np.exp(self.kappa * (hi - np.asarray(h)[..., None]))

    def gradient(self, x):
        if self.gradient_mode == "paper":
            return self.lambdas(x) @ self._normals
        return smooth_union_gradient(self, x)


def smooth_union_value(cbf: SmoothUnionCBF, x):
    hi = cbf.edge_values(x)
    top = hi.max(axis=-1)
    s = np.sum(np.exp(cbf.kappa * (hi - top[..., None])), axis=-1)
    return top + np.log(s) / cbf.kappa - np.log(cbf.n_edges) / cbf.kappa


def smooth_union_gradient(cbf: SmoothUnionCBF, x):
    """True gradient of the smooth union: softmax(kappa h_i) weighted normals."""
    hi = cbf.edge_values(x)
    z = cbf.kappa * (hi - hi.max(axis=-1, keepdims=True))
    wts = np.exp(z)
    wts /= wts.sum(axis=-1, keepdims=True)
    return wts @ cbf._normals


def polygon_barrier(vertices, kappa: float = 10.0, gradient_mode: str = "analytic"):
    """Smooth-union barrier for the exterior of a convex polygon.

    Vertices may be listed in either orientation.
    """
    V = np.asarray(vertices, dtype=float)
    if V.ndim != 2 or V.shape[1] != 2 or len(V) < 3:
        raise ValueError("need at least three 2-D vertices")
    area2 = np.sum(V[:, 0] * np.roll(V[:, 1], -1) - np.roll(V[:, 0], -1) * V[:, 1])
    if area2 < 0:
        V = V[::-1]
    edges = []
    for i in range(len(V)):
        p, q = V[i], V[(i + 1) % len(V)]
        d = q - p
        n = np.array([d[1], -d[0]]) / np.hypot(*d)  # outward for CCW order
        edges.append(HalfspaceBarrier(n, n @ p))
    return SmoothUnionCBF(tuple(edges), kappa, gradient_mode)


def box_barriers(lower, upper):
    """One halfspace barrier per face of ``lower <= x <= upper``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    out = []
    for i in range(len(lower)):
        e = np.zeros(len(lower))
        e[i] = 1.0
        out.append(HalfspaceBarrier(e, lower[i]))     # x_i - lo >= 0
        out.append(HalfspaceBarrier(-e, -upper[i]))   # hi - x_i >= 0
    return out


@dataclass(frozen=True)
class InputPolytope:
    """``U = {u | P u <= q}``; boxes also remember their bounds for saturation."""

    P: np.ndarray
    q: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=float)))
        object.__setattr__(self, "q", np.atleast_1d(np.asarray(self.q, dtype=float)))
        if self.P.shape[0] != self.q.shape[0]:
            raise ValueError("P and q row counts differ")

    @classmethod
    def box(cls, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(lower > upper):
            raise ValueError("empty input box")
        m = len(lower)
        P = np.vstack([np.eye(m), -np.eye(m)])
        q = np.concatenate([upper, -lower])
        return cls(P, q, lower, upper)

    @property
    def m(self) -> int:
        return self.P.shape[1]

    @property
    def is_box(self) -> bool:
        return self.lower is not None

    def saturate(self, u):
        if not self.is_box:
            raise NotImplementedError("saturation is only defined for box input sets")
        return np.clip(u, self.lower, self.upper)


@dataclass(frozen=True)
class FixedAlpha:
    """``alpha(h) = omega h``."""

    omega: float

    def gains(self, x, n_cbf: int):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (n_cbf,), float(self.omega))


@dataclass(frozen=True)
class LearnedAlpha:
    """``alpha(x, h) = net(x) * omega h`` with one network output per CBF.

    ``net`` is any callable mapping states ``(..., n)`` to ``(..., n_cbf)``.
    """

    net: Callable = field(repr=False)
    omega: float = 1.0
    softplus: bool = False

    def gains(self, x, n_cbf: int):
        g = np.asarray(self.net(x), dtype=float)
        if g.shape[-1] != n_cbf:
            raise ValueError(f"alpha network gives {g.shape[-1]} outputs for {n_cbf} CBFs")
        if self.softplus:
            g = np.logaddexp(0.0, g)
        return g * self.omega


def lie_derivatives(cbf, dynamics: ControlAffine, x):
    """Return ``(L_f h, L_g h)`` at ``x`` (batched over leading axes)."""
    grad = cbf.gradient(x)
    Lf = np.einsum("...n,...n->...", grad, dynamics.f(x))
    Lg = np.einsum("...n,...nm->...m", grad, dynamics.g(x))
    return Lf, Lg


@dataclass
class ConstraintTerms:
    """Parameter-free pieces of the constraint set at a batch of states.

    ``Lf``, ``h`` have shape ``(..., J)``; ``Lg`` is ``(..., J, m)``. The CBF
    right-hand side depends on the alpha gains, which is where a learned
    alpha enters: ``b_j = Lf_j + gain_j * h_j``.
    """

    Lf: np.ndarray
    Lg: np.ndarray
    h: np.ndarray
    P: np.ndarray
    q: np.ndarray

    @property
    def n_cbf(self) -> int:
        return self.h.shape[-1]

    @property
    def A(self):
        batch = self.Lg.shape[:-2]
        P = np.broadcast_to(self.P, batch + self.P.shape)
        return np.concatenate([-self.Lg, P], axis=-2)

    def b(self, gains):
        batch = self.h.shape[:-1]
        q = np.broadcast_to(self.q, batch + self.q.shape)
        return np.concatenate([self.Lf + gains * self.h, q], axis=-1)


def cbf_terms(x, cbfs: Sequence, U: InputPolytope, dynamics: ControlAffine) -> ConstraintTerms:
    x = np.asarray(x, dtype=float)
    if not cbfs:
        batch = x.shape[:-1]
        return ConstraintTerms(np.zeros(batch + (0,)), np.zeros(batch + (0, U.m)),
                               np.zeros(batch + (0,)), U.P, U.q)
    Lf, Lg, h = [], [], []
    for cbf in cbfs:
        lf, lg = lie_derivatives(cbf, dynamics, x)
        Lf.append(lf)
        Lg.append(lg)
        h.append(cbf.value(x))
    terms = ConstraintTerms(
        np.stack(Lf, axis=-1), np.stack(Lg, axis=-2), np.stack(h, axis=-1), U.P, U.q
    )
    if not (np.all(np.isfinite(terms.Lf)) and np.all(np.isfinite(terms.Lg))):
        raise FloatingPointError("non-finite Lie derivative")
    return terms


def assemble_constraints(x, cbfs: Sequence, alpha, U: InputPolytope,
                         dynamics: ControlAffine) -> AffineConstraintSet:
    """Stack the CBF rows and the input rows into ``{u | A u <= b}`` at one state."""
    terms = cbf_terms(x, cbfs, U, dynamics)
    gains = alpha.gains(x, terms.n_cbf)
    return AffineConstraintSet(terms.A, terms.b(gains))
