"""Closed-loop controllers and the checkpoint format for trained ones.

Every controller maps a state to a control (``__call__``), evaluates a batch
of states (``evaluate``), and reports the constraint set its guarantee refers
to (``constraint_set``).

Checkpoint format (``.npz``, version 1): key ``meta`` holds a JSON document
with ``format_version``, ``method``, ``layer_sizes`` per head, the alpha
settings, the selector tolerances and free-form training metadata; parameter arrays are stored as
``<head>/<index>`` in the order ``W0, b0, W1, b1, ...``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .affine import AffineConstraintSet, SelectorConfig, select_output
from .cbf import FixedAlpha, LearnedAlpha
from .nn import MLP, ProjectionLayer
from .qp import cbf_qp_filter, od_qp_filter
from .sim import Scenario, nominal_control

__all__ = [
    "NominalController",
    "QPController",
    "ODQPController",
    "NetworkController",
    "NETWORK_METHODS",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

NETWORK_METHODS = ("nn_penalty", "caffnet", "caffnet_lite")
CHECKPOINT_VERSION = 1


class _Base:
    scenario: Scenario
    alpha = None

    def constraint_set(self, x) -> AffineConstraintSet:
        t = self.scenario.terms(x)
        return AffineConstraintSet(t.A, t.b(self.alpha.gains(x, t.n_cbf)))

    def constraint_batch(self, X):
        t = self.scenario.terms(X)
        return t.A, t.b(self.alpha.gains(X, t.n_cbf))

    def evaluate(self, X):
        return np.stack([self(x) for x in np.asarray(X, dtype=float)])


class NominalController(_Base):
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.alpha = FixedAlpha(0.0)

    def __call__(self, x):
        return nominal_control(self.scenario, x)

    def evaluate(self, X):
        return nominal_control(self.scenario, X)


class QPController(_Base):
    """CBF-QP filter around the nominal controller with ``alpha(h) = omega h``."""

    def __init__(self, scenario: Scenario, omega: float):
        self.scenario = scenario
        self.omega = float(omega)
        self.alpha = FixedAlpha(self.omega)

    def __call__(self, x):
        s = self.scenario
        return cbf_qp_filter(x, nominal_control(s, x), s.cbfs, self.alpha, s.U, s.dynamics)


class ODQPController(_Base):
    """Optimal-decay CBF-QP. ``constraint_set`` uses the decay chosen at ``x``."""

    def __init__(self, scenario: Scenario, omega0: float, p_omega: float = 1.0,
                 shared: bool = True, penalty: str = "rate"):
        self.scenario = scenario
        self.omega0 = float(omega0)
        self.p_omega = float(p_omega)
        self.shared = shared
        self.penalty = penalty

    def solve(self, x):
        s = self.scenario
        return od_qp_filter(x, nominal_control(s, x), s.cbfs, self.omega0, self.p_omega,
                            s.U, s.dynamics, shared=self.shared, penalty=self.penalty)

    def __call__(self, x):
        return self.solve(x)[0]

    def _gains(self, x, n_cbf):
        w = self.solve(x)[1]
        return np.broadcast_to(np.asarray(w, dtype=float) * self.omega0, (n_cbf,))

    def constraint_set(self, x):
        t = self.scenario.terms(x)
        return AffineConstraintSet(t.A, t.b(self._gains(x, t.n_cbf)))

    def constraint_batch(self, X):
        return self.evaluate_with_constraints(X)[1:]

    def evaluate_with_constraints(self, X):
        """Controls plus the constraint set each control was certified against."""
        X = np.asarray(X, dtype=float)
        t = self.scenario.terms(X)
        U = np.empty((len(X), self.scenario.m))
        G = np.empty((len(X), t.n_cbf))
        for i, x in enumerate(X):
            u, w = self.solve(x)
            U[i] = u
            G[i] = np.asarray(w, dtype=float) * self.omega0
        return U, t.A, t.b(G)


class NetworkController(_Base):
    """Controller network with optional null-space head and learned alpha.

    ``method`` is ``"caffnet_lite"`` or ``"caffnet"`` (projection onto the
    constraint set with the lite or full subset family) or ``"nn_penalty"``
    (raw network output).
    """

    def __init__(self, scenario: Scenario, method: str, f_net: MLP, w_net: MLP | None = None,
                 alpha_net: MLP | None = None, omega: float = 1.0, softplus: bool = False,
                 cfg: SelectorConfig = SelectorConfig()):
        if method not in NETWORK_METHODS:
            raise ValueError(f"unknown network method {method!r}")
        if method != "nn_penalty" and w_net is None:
            raise ValueError(f"{method} needs a null-space network")
        self.scenario = scenario
        self.method = method
        self.f_net, self.w_net, self.alpha_net = f_net, w_net, alpha_net
        self.omega = float(omega)
        self.softplus = softplus
        self.cfg = cfg
        if alpha_net is None:
            self.alpha = FixedAlpha(self.omega)
        else:
            self.alpha = LearnedAlpha(alpha_net, self.omega, softplus)

    @property
    def subsets(self):
        return "full" if self.method == "caffnet" else "lite"

    @property
    def nets(self):
        return {k: v for k, v in (("f", self.f_net), ("w", self.w_net), ("alpha", self.alpha_net))
                if v is not None}

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        f = self.f_net(x)
        if self.method == "nn_penalty":
            return f
        cs = self.constraint_set(x)
        y, _ = select_output(f, self.w_net(x), cs, self.subsets, self.cfg)
        return y

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        F = self.f_net(X)
        if self.method == "nn_penalty":
            return F
        A, B = self.constraint_batch(X)
        layer = ProjectionLayer(A, self.subsets, self.cfg)
        Y, _ = layer.forward(F, self.w_net(X), B)
        return Y


def save_checkpoint(path, ctrl: NetworkController, meta: dict | None = None):
    path = Path(path)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "method": ctrl.method,
        "omega": ctrl.omega,
        "softplus": ctrl.softplus,
        "norm_p": ctrl.cfg.norm_p,
        "feas_tol": ctrl.cfg.feas_tol,
        "pinv_rtol": ctrl.cfg.pinv_rtol,
        "tie_tol": ctrl.cfg.tie_tol,
        "layer_sizes": {k: net.layer_sizes for k, net in ctrl.nets.items()},
        "meta": meta or {},
    }
    arrays = {"meta": np.array(json.dumps(doc))}
    for k, net in ctrl.nets.items():
        for i, p in enumerate(net.params):
            arrays[f"{k}/{i}"] = p
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, scenario: Scenario) -> tuple[NetworkController, dict]:
    with np.load(path, allow_pickle=False) as z:
        doc = json.loads(str(z["meta"]))
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
        nets = {}
        for k, sizes in doc["layer_sizes"].items():
            params = [z[f"{k}/{i}"] for i in range(2 * (len(sizes) - 1))]
            nets[k] = MLP(sizes, params=params)
    cfg = SelectorConfig(norm_p=doc["norm_p"], feas_tol=doc["feas_tol"],
                         pinv_rtol=doc.get("pinv_rtol", 1e-10), tie_tol=doc.get("tie_tol", 1e-12))
    ctrl = NetworkController(scenario, doc["method"], nets["f"], nets.get("w"), nets.get("alpha"),
                             omega=doc["omega"], softplus=doc["softplus"], cfg=cfg)
    return ctrl, doc["meta"]
