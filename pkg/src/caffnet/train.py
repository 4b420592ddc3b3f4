"""Full-batch training of the controller heads on sampled safe states."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .affine import SelectorConfig
from .controller import NETWORK_METHODS, NetworkController
from .nn import MLP, Adam, ProjectionLayer, loss_mse, loss_penalty, loss_penalty_grad
from .sim import Scenario, nominal_control, sample_safe_states

__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "train", "training_set"]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = "caffnet_lite"
    epochs: int = 2000
    n_samples: int = 500
    data_seed: int = 0
    lr: float = 1e-4
    penalty_weight: float = 100.0
    alpha: str = "learned"          # "learned" or "fixed"
    omega: float = 1.0              # base gain; alpha(h) = omega h
    softplus: bool = True
    alpha_init_gain: float = 1.0    # learned gain at initialisation, before the random part
    controller_hidden: tuple = (200, 200, 200)
    null_hidden: tuple = (64, 64, 64)
    alpha_hidden: tuple = (64, 64, 64)
    norm_p: float = 2
    feas_tol: float = 1e-9
    pinv_rtol: float = 1e-10
    tie_tol: float = 1e-12

    def __post_init__(self):
        if self.method not in NETWORK_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")
        if self.alpha not in ("learned", "fixed"):
            raise ValueError(f"alpha must be 'learned' or 'fixed', not {self.alpha!r}")

    @property
    def selector(self):
        return SelectorConfig(norm_p=self.norm_p, feas_tol=self.feas_tol,
                              pinv_rtol=self.pinv_rtol, tie_tol=self.tie_tol)


@dataclass
class TrainResult:
    controller: NetworkController
    losses: list
    epoch_ms: list
    max_residual: list = field(default_factory=list)
    seed: int = 0

    @property
    def t_train_ms(self):
        return float(np.mean(self.epoch_ms)) if self.epoch_ms else 0.0


def training_set(scenario: Scenario, cfg: TrainConfig):
    X = sample_safe_states(scenario, cfg.n_samples, seed=cfg.data_seed)
    return X, nominal_control(scenario, X)


def _init_nets(scenario, cfg, seed):
    rng = np.random.default_rng(seed)
    n, m = scenario.n, scenario.m
    f_net = MLP([n, *cfg.controller_hidden, m], rng)
    w_net = None
    if cfg.method != "nn_penalty":
        w_net = MLP([n, *cfg.null_hidden, m], rng)
    alpha_net = None
    if cfg.alpha == "learned":
        alpha_net = MLP([n, *cfg.alpha_hidden, scenario.n_cbf], rng)
        g0 = cfg.alpha_init_gain
        alpha_net.params[-1] += np.log(np.expm1(g0)) if cfg.softplus else g0
    return f_net, w_net, alpha_net


def train(scenario: Scenario, cfg: TrainConfig, seed: int = 0, data=None) -> TrainResult:
    """Train one controller. ``data`` may supply a precomputed ``(X, U_nom)``."""
    X, U_nom = training_set(scenario, cfg) if data is None else data
    f_net, w_net, alpha_net = _init_nets(scenario, cfg, seed)
    ctrl = NetworkController(scenario, cfg.method, f_net, w_net, alpha_net,
                             omega=cfg.omega, softplus=cfg.softplus, cfg=cfg.selector)
    terms = scenario.terms(X)
    A = terms.A
    J = terms.n_cbf
    layer = None if cfg.method == "nn_penalty" else ProjectionLayer(A, ctrl.subsets, cfg.selector)

    nets = list(ctrl.nets.values())
    params = [p for net in nets for p in net.params]
    opt = Adam(params, lr=cfg.lr)
    losses, epoch_ms, max_res = [], [], []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        F, f_cache = f_net.forward_cached(X)
        if alpha_net is not None:
            raw, a_cache = alpha_net.forward_cached(X)
            gains = np.logaddexp(0.0, raw) if cfg.softplus else raw
            gains = gains * cfg.omega
        else:
            gains = np.full((len(X), J), cfg.omega)
        Bv = terms.b(gains)

        if layer is None:
            Y = F
            loss = loss_mse(Y, U_nom) + loss_penalty(Y, A, Bv, cfg.penalty_weight)
            g_pen_u, g_b = loss_penalty_grad(Y, A, Bv, cfg.penalty_weight)
            g_f = 2.0 * (Y - U_nom) / Y.size + g_pen_u
        else:
            W, w_cache = w_net.forward_cached(X)
            Y, state = layer.forward(F, W, Bv)
            loss = loss_mse(Y, U_nom)
            g_f, g_w, g_b = layer.backward(state, 2.0 * (Y - U_nom) / Y.size)

        if not np.isfinite(loss):
            raise TrainingDiverged(f"seed {seed}: non-finite loss at epoch {epoch}")

        grads = list(f_net.backward_cached(f_cache, g_f)[0])
        if w_net is not None:
            grads += w_net.backward_cached(w_cache, g_w)[0]
        if alpha_net is not None:
            g_gain = g_b[:, :J] * terms.h * cfg.omega
            if cfg.softplus:
                g_gain = g_gain / (1.0 + np.exp(-raw))
            grads += alpha_net.backward_cached(a_cache, g_gain)[0]
        opt.step(grads)

        epoch_ms.append(1e3 * (time.perf_counter() - t0))
        losses.append(float(loss))
        max_res.append(float(np.max(np.einsum("nij,nj->ni", A, Y) - Bv)))
        if epoch % 500 == 0:
            log.debug("seed %d epoch %d loss %.6g", seed, epoch, loss)

    return TrainResult(ctrl, losses, epoch_ms, max_res, seed)
