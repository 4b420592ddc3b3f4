"""Constraint decomposition and pseudoinverse projection layer.

Subsets are 0-based index tuples into the rows of ``A``. Candidates for every
subset are computed in stacked form, grouped by subset order so that the
pseudoinverses of all ``A_gamma`` of one order come out of a single batched
SVD.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

__all__ = [
    "AffineConstraintSet",
    "SelectorConfig",
    "ProjectionCandidate",
    "SelectionTrace",
    "NoFeasibleCandidate",
    "NotOnBoundary",
    "enumerate_subsets_lite",
    "enumerate_subsets_full",
    "count_subsets_lite",
    "count_subsets_full",
    "pinv",
    "project_subconstraint",
    "feasible_candidates",
    "select_output",
    "recover_target",
    "CandidateBank",
]


class NoFeasibleCandidate(RuntimeError):
    """No projection candidate satisfies the constraints (empty polytope)."""


class NotOnBoundary(Exception):
    """No constraint row is active at the requested target point."""


@dataclass(frozen=True)
class AffineConstraintSet:
    """The polytope ``{u | A u <= b}`` at one state."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.ndim != 2 or b.ndim != 1:
            raise ValueError("A must be 2-D and b 1-D")
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        if A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError("need at least one constraint and one input")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("constraint data must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_c(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def residual(self, u) -> np.ndarray:
        return self.A @ np.asarray(u, dtype=float) - self.b

    def contains(self, u, tol: float = 0.0) -> bool:
        return bool(np.all(self.residual(u) <= tol))


@dataclass(frozen=True)
class SelectorConfig:
    norm_p: float = 2
    feas_tol: float = 1e-9
    pinv_rtol: float = 1e-10
    tie_tol: float = 1e-12
    tie_break: str = "lexicographic"

    def __post_init__(self):
        if self.feas_tol < 0:
            raise ValueError("feas_tol must be >= 0")
        if self.pinv_rtol <= 0:
            raise ValueError("pinv_rtol must be > 0")
        if self.norm_p < 1:
            raise ValueError("norm_p must be >= 1")
        if self.tie_break != "lexicographic":
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")


@dataclass(frozen=True)
class ProjectionCandidate:
    gamma: tuple
    value: np.ndarray
    feasible: bool
    distance: float


@dataclass(frozen=True)
class SelectionTrace:
    """Which branch of the output rule fired, kept for gradient routing."""

    branch: str  # "passthrough" or "projection"
    gamma: tuple | None
    distance: float
    n_feasible: int
    A: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)

    def matches(self, cs: AffineConstraintSet) -> bool:
        return (
            self.A.shape == cs.A.shape
            and np.array_equal(self.A, cs.A)
            and np.array_equal(self.b, cs.b)
        )


# ---------------------------------------------------------------- subsets


@lru_cache(maxsize=None)
def _subsets_of_order(n_c: int, k: int) -> tuple:
    return tuple(combinations(range(n_c), k))


def _check_dims(n_c, m):
    if int(n_c) != n_c or int(m) != m or n_c < 1 or m < 1:
        raise ValueError(f"n_c and m must be positive integers, got {n_c}, {m}")


@lru_cache(maxsize=None)
def enumerate_subsets_lite(n_c: int, m: int) -> tuple:
    """Row subsets of order 1 and order ``min(n_c, m)``, lexicographic within each order."""
    _check_dims(n_c, m)
    k = min(n_c, m)
    out = _subsets_of_order(n_c, 1)
    if k > 1:
        out = out + _subsets_of_order(n_c, k)
    return out


@lru_cache(maxsize=None)
def enumerate_subsets_full(n_c: int, m: int) -> tuple:
    """Row subsets of every order ``1 .. min(n_c, m)``."""
    _check_dims(n_c, m)
    out = ()
    for k in range(1, min(n_c, m) + 1):
        out = out + _subsets_of_order(n_c, k)
    return out


def count_subsets_lite(n_c: int, m: int) -> int:
    k = min(n_c, m)
    return n_c if k == 1 else n_c + comb(n_c, k)


def count_subsets_full(n_c: int, m: int) -> int:
    return sum(comb(n_c, k) for k in range(1, min(n_c, m) + 1))


# ---------------------------------------------------------- linear algebra


def pinv(M, rtol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the SVD.

    Works on a single ``(k, m)`` matrix or a stack ``(..., k, m)``. Singular
    values at or below ``rtol * sigma_max`` (per matrix) are treated as zero, so
    a zero matrix maps to a zero matrix of transposed shape.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        raise ValueError("pinv expects a matrix or a stack of matrices")
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("pinv of a non-finite matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = rtol * s.max(axis=-1, keepdims=True, initial=0.0)
    keep = (s > cutoff) & (s > 0)
    s_inv = np.divide(1.0, s, out=np.zeros_like(s), where=keep)
    return np.swapaxes(Vt, -1, -2) @ (s_inv[..., :, None] * np.swapaxes(U, -1, -2))


def project_subconstraint(f, w, A_g, b_g, rtol: float = 1e-10) -> np.ndarray:
    """Project ``f`` onto ``{y | A_g y = b_g}`` and shift along its null space by ``w``.

    Returns ``f - A_g^+ (A_g f - b_g) + (I - A_g^+ A_g) w``.
    """
    f = np.asarray(f, dtype=float)
    w = np.asarray(w, dtype=float)
    A_g = np.atleast_2d(np.asarray(A_g, dtype=float))
    b_g = np.atleast_1d(np.asarray(b_g, dtype=float))
    if A_g.shape[1] != f.shape[0] or w.shape != f.shape or A_g.shape[0] != b_g.shape[0]:
        raise ValueError("inconsistent dimensions")
    Ap = pinv(A_g, rtol)
    return f - Ap @ (A_g @ f - b_g) + w - Ap @ (A_g @ w)


# ------------------------------------------------------------- candidates


def _lex_rank(subsets) -> np.ndarray:
    order = sorted(range(len(subsets)), key=lambda i: subsets[i])
    rank = np.empty(len(subsets), dtype=np.intp)
    rank[order] = np.arange(len(subsets))
    return rank


class CandidateBank:
    """Index bookkeeping for one subset family, reused across states.

    Holds, per subset order, the row-index array used to gather ``A_gamma``
    stacks, plus the lexicographic rank of each subset for tie-breaking. The
    instance is read-only after construction.
    """

    def __init__(self, subsets):
        self.subsets = tuple(tuple(g) for g in subsets)
        if not self.subsets:
            raise ValueError("empty subset family")
        self.groups = []  # (positions, rows) per order
        orders = sorted({len(g) for g in self.subsets})
        for k in orders:
            pos = np.array([i for i, g in enumerate(self.subsets) if len(g) == k])
            rows = np.array([self.subsets[i] for i in pos], dtype=np.intp)
            self.groups.append((pos, rows))
        self.lex_rank = _lex_rank(self.subsets)

    def __len__(self):
        return len(self.subsets)

    @classmethod
    @lru_cache(maxsize=None)
    def lite(cls, n_c: int, m: int) -> "CandidateBank":
        return cls(enumerate_subsets_lite(n_c, m))

    @classmethod
    @lru_cache(maxsize=None)
    def full(cls, n_c: int, m: int) -> "CandidateBank":
        return cls(enumerate_subsets_full(n_c, m))

    def pinvs(self, A, rtol=1e-10):
        """Per-group pseudoinverse stacks of shape ``(..., G_k, m, k)``."""
        A = np.asarray(A, dtype=float)
        out = []
        for _, rows in self.groups:
            A_g = A[..., rows, :]
            out.append(pinv(A_g, rtol))
        return out

    def candidates(self, f, w, A, b, pinvs=None, rtol=1e-10):
        """All candidate projections, shape ``(..., G, m)``.

        ``f``, ``w`` are ``(..., m)``; ``A`` is ``(..., n_c, m)``; ``b`` is
        ``(..., n_c)``. Leading batch axes broadcast.
        """
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        f = np.asarray(f, dtype=float)
        w = np.asarray(w, dtype=float)
        if pinvs is None:
            pinvs = self.pinvs(A, rtol)
        batch = np.broadcast_shapes(f.shape[:-1], w.shape[:-1], A.shape[:-2], b.shape[:-1])
        m = A.shape[-1]
        Y = np.empty(batch + (len(self.subsets), m))
        v = f + w
        for (pos, rows), Ap in zip(self.groups, pinvs):
            A_g = A[..., rows, :]                       # (..., G, k, m)
            b_g = b[..., rows]                          # (..., G, k)
            resid = np.einsum("...gkm,...m->...gk", A_g, v) - b_g
            Y[..., pos, :] = v[..., None, :] - np.einsum("...gmk,...gk->...gm", Ap, resid)
        return Y


def _norm(d, p):
    if np.isinf(p):
        return np.max(np.abs(d), axis=-1)
    if p == 2:
        return np.sqrt(np.sum(d * d, axis=-1))
    return np.sum(np.abs(d) ** p, axis=-1) ** (1.0 / p)


def _bank_for(n_c, m, subsets):
    if subsets is None or subsets == "lite":
        return CandidateBank.lite(n_c, m)
    if subsets == "full":
        return CandidateBank.full(n_c, m)
    if isinstance(subsets, CandidateBank):
        return subsets
    return CandidateBank(subsets)


def feasible_candidates(f, w, cs: AffineConstraintSet, subsets=None,
                        cfg: SelectorConfig = SelectorConfig()) -> list:
    """Evaluate every candidate projection and flag the ones inside the polytope.

    ``subsets`` is ``"lite"`` (default), ``"full"``, a :class:`CandidateBank`,
    or an explicit list of index tuples.
    """
    bank = _bank_for(cs.n_c, cs.m, subsets)
    f = np.asarray(f, dtype=float)
    Y = bank.candidates(f, w, cs.A, cs.b, rtol=cfg.pinv_rtol)
    feas = np.all(Y @ cs.A.T <= cs.b + cfg.feas_tol, axis=-1)
    dist = _norm(Y - f, cfg.norm_p)
    return [
        ProjectionCandidate(g, Y[i], bool(feas[i]), float(dist[i]))
        for i, g in enumerate(bank.subsets)
    ]


def _pick(dist, feas, lex_rank, tie_tol):
    """Index of the nearest feasible candidate, lowest lexicographic subset on ties."""
    d = np.where(feas, dist, np.inf)
    dmin = d.min()
    if not np.isfinite(dmin):
        return -1
    tied = np.flatnonzero(d <= dmin + tie_tol)
    return int(tied[np.argmin(lex_rank[tied])])


def select_output(f, w, cs: AffineConstraintSet, subsets=None,
                  cfg: SelectorConfig = SelectorConfig()):
    """Return ``f`` if it is feasible, else the closest feasible candidate.

    Returns ``(y, trace)``. Raises :class:`NoFeasibleCandidate` when no
    candidate lies in the polytope, which only happens for an empty polytope.
    """
    f = np.asarray(f, dtype=float)
    w = np.asarray(w, dtype=float)
    if f.shape != (cs.m,) or w.shape != (cs.m,):
        raise ValueError(f"f and w must have shape ({cs.m},)")
    if np.all(cs.A @ f <= cs.b + cfg.feas_tol):
        return f.copy(), SelectionTrace("passthrough", None, 0.0, 0, cs.A, cs.b)
    bank = _bank_for(cs.n_c, cs.m, subsets)
    Y = bank.candidates(f, w, cs.A, cs.b, rtol=cfg.pinv_rtol)
    feas = np.all(Y @ cs.A.T <= cs.b + cfg.feas_tol, axis=-1)
    dist = _norm(Y - f, cfg.norm_p)
    i = _pick(dist, feas, bank.lex_rank, cfg.tie_tol)
    if i < 0:
        raise NoFeasibleCandidate(
            f"none of {len(bank)} candidates is feasible; max residual of f is "
            f"{np.max(cs.A @ f - cs.b):.3g}"
        )
    trace = SelectionTrace("projection", bank.subsets[i], float(dist[i]),
                           int(feas.sum()), cs.A, cs.b)
    return Y[i].copy(), trace


def recover_target(f, y_star, cs: AffineConstraintSet, tol: float = 1e-9,
                   check_tol: float = 1e-9):
    """Rebuild a feasible target through a single-row candidate.

    Finds the most tightly active row ``j`` at ``y_star``, sets the null-space input to
    ``y_star - f`` and projects onto row ``j``. Returns ``((j,), y)``; raises
    :class:`NotOnBoundary` when no row is active at ``y_star``.
    """
    f = np.asarray(f, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    r = cs.residual(y_star)
    if np.any(r > tol):
        raise ValueError("y_star is not feasible")
    active = np.flatnonzero(np.abs(r) <= tol)
    if active.size == 0:
        raise NotOnBoundary("no constraint is active at y_star")
    j = int(active[np.argmin(np.abs(r[active]))])
    y = project_subconstraint(f, y_star - f, cs.A[j:j + 1], cs.b[j:j + 1])
    err = np.max(np.abs(y - y_star))
    if err > check_tol * max(1.0, np.max(np.abs(y_star))):
        raise ArithmeticError(f"recovery through row {j} missed y_star by {err:.3g}")
    return (j,), y
