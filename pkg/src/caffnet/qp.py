"""Dense QP solver and the CBF-QP / optimal-decay QP safety filters.

Problems are ``min 1/2 z'Hz + c'z  s.t.  G z <= d`` with ``H`` positive
definite, solved by a dual active-set method (Goldfarb-Idnani): start from the
unconstrained minimiser and add violated constraints one at a time, dropping
constraints whose multipliers would turn negative. Everything is recomputed
from small dense solves at each step, which is fine for a handful of
variables and a few dozen rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cbf import FixedAlpha, InputPolytope, cbf_terms
from .dynamics import ControlAffine

__all__ = [
    "QpProblem",
    "QpResult",
    "QpInfeasible",
    "QpMaxIterations",
    "solve_qp",
    "kkt_residuals",
    "cbf_qp_filter",
    "od_qp_filter",
]


class QpInfeasible(RuntimeError):
    pass


class QpMaxIterations(RuntimeError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    G: np.ndarray | None = None
    d: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        n = self.c.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square and match c")
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise ValueError("H must be symmetric")
        if self.G is None:
            self.G = np.zeros((0, n))
            self.d = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if self.G.shape[0] != self.d.shape[0]:
            raise ValueError("G and d row counts differ")

    @property
    def n(self):
        return self.c.shape[0]

    def objective(self, z):
        return 0.5 * z @ self.H @ z + self.c @ z


@dataclass
class QpResult:
    z: np.ndarray
    active: tuple
    multipliers: np.ndarray   # one per row of G, zero off the active set
    status: str
    iterations: int


def solve_qp(p: QpProblem, tol: float = 1e-9, max_iter: int = 200) -> QpResult:
    """Solve a strictly convex QP; raise :class:`QpInfeasible` if the rows are inconsistent."""
    try:
        L = np.linalg.cholesky(p.H)
    except np.linalg.LinAlgError:
        raise ValueError("H must be positive definite") from None

    def hsolve(v):
        return np.linalg.solve(L.T, np.linalg.solve(L, v))

    G, d = p.G, p.d
    scale = np.maximum(np.linalg.norm(G, axis=1), 1e-300)
    z = -hsolve(p.c)
    active: list[int] = []
    u = np.zeros(0)

    for it in range(max_iter):
        viol = (G @ z - d) / scale
        viol[active] = -np.inf
        if viol.size == 0 or viol.max() <= tol:
            lam = np.zeros(G.shape[0])
            lam[active] = u
            return QpResult(z, tuple(sorted(active)), lam, "optimal", it)
        k = int(np.argmax(viol))
        u_plus = np.append(u, 0.0)
        # add row k, possibly after dropping blocking rows
        while True:
            n_k = G[k]
            Hn = hsolve(n_k)
            if active:
                N = G[active].T
                HN = hsolve(N)
                S = N.T @ HN
                r = np.linalg.solve(S, N.T @ Hn)
                step = Hn - HN @ r
            else:
                r = np.zeros(0)
                step = Hn
            curv = n_k @ step
            pos = r > tol * max(1.0, np.max(np.abs(r), initial=0.0))
            t_dual = np.inf
            drop = -1
            if np.any(pos):
                ratios = np.where(pos, u_plus[:-1] / np.where(pos, r, 1.0), np.inf)
                drop = int(np.argmin(ratios))
                t_dual = ratios[drop]
            if curv <= 1e-14 * max(1.0, n_k @ Hn):
                # row k is dependent on the active rows
                if not np.isfinite(t_dual):
                    raise QpInfeasible(f"constraint {k} cannot be satisfied with the active rows")
                u_plus[:-1] -= t_dual * r
                u_plus[-1] += t_dual
                del active[drop]
                u_plus = np.delete(u_plus, drop)
                continue
            t_primal = (n_k @ z - d[k]) / curv
            t = min(t_primal, t_dual)
            z = z - t * step
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            if t_primal <= t_dual:
                active.append(k)
                u = u_plus
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)
    raise QpMaxIterations(f"no convergence after {max_iter} iterations")


def kkt_residuals(p: QpProblem, z, lam):
    """Return ``(stationarity, primal, dual, complementarity)`` maxima."""
    stat = np.max(np.abs(p.H @ z + p.c + p.G.T @ lam), initial=0.0)
    slack = p.G @ z - p.d
    primal = np.max(slack, initial=0.0)
    dual = np.max(-lam, initial=0.0)
    comp = np.max(np.abs(lam * slack), initial=0.0)
    return stat, max(primal, 0.0), max(dual, 0.0), comp


def cbf_qp_filter(x, u_nom, cbfs, alpha, U: InputPolytope, dynamics: ControlAffine,
                  tol: float = 1e-9):
    """Minimise ``|u - u_nom|^2`` over the assembled constraint set at ``x``."""
    if isinstance(alpha, (int, float)):
        alpha = FixedAlpha(alpha)
    terms = cbf_terms(x, cbfs, U, dynamics)
    A = terms.A
    b = terms.b(alpha.gains(x, terms.n_cbf))
    u_nom = np.asarray(u_nom, dtype=float)
    m = u_nom.shape[0]
    res = solve_qp(QpProblem(2.0 * np.eye(m), -2.0 * u_nom, A, b), tol=tol)
    return res.z


def od_qp_filter(x, u_nom, cbfs, omega0, p_omega, U: InputPolytope,
                 dynamics: ControlAffine, shared: bool = True, penalty: str = "rate",
                 tol: float = 1e-9):
    """Optimal-decay CBF-QP.

    Decision variables are ``u`` and decay multipliers ``w >= 0`` (one shared,
    or one per CBF). Each CBF row becomes ``L_f h + L_g h u >= -w omega0 h``.
    The cost is ``|u - u_nom|^2 + p_omega * sum(s (w - 1))^2`` where
    ``s = omega0`` for ``penalty="rate"`` (the effective decay rate is pulled
    toward ``omega0``) and ``s = 1`` for ``penalty="multiplier"``.

    Returns ``(u, w)``; ``w`` is a scalar when shared.
    """
    terms = cbf_terms(x, cbfs, U, dynamics)
    u_nom = np.asarray(u_nom, dtype=float)
    m = u_nom.shape[0]
    J = terms.n_cbf
    k = 1 if shared else J
    s = omega0 if penalty == "rate" else 1.0
    if penalty not in ("rate", "multiplier"):
        raise ValueError(f"unknown penalty {penalty!r}")
    wt = 2.0 * p_omega * s * s
    H = np.diag(np.concatenate([np.full(m, 2.0), np.full(k, wt)]))
    c = np.concatenate([-2.0 * u_nom, np.full(k, -wt)])
    # CBF rows: -Lg u - omega0 h w <= Lf
    coup = np.zeros((J, k))
    if shared:
        coup[:, 0] = -omega0 * terms.h
    else:
        coup[np.arange(J), np.arange(J)] = -omega0 * terms.h
    G = np.block([
        [-terms.Lg, coup],
        [U.P, np.zeros((U.P.shape[0], k))],
        [np.zeros((k, m)), -np.eye(k)],
    ])
    d = np.concatenate([terms.Lf, U.q, np.zeros(k)])
    res = solve_qp(QpProblem(H, c, G, d), tol=tol)
    u, w = res.z[:m], res.z[m:]
    return u, (float(w[0]) if shared else w)
