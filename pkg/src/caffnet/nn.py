"""Small ReLU networks with hand-written backprop, Adam, losses, and the
batched projection layer used during training.

Gradients through the projection layer treat the branch (passthrough or
which subset was selected) as fixed for the forward pass; inside a branch the
layer is affine in ``(f, w, b)`` and the gradients are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import (
    AffineConstraintSet,
    CandidateBank,
    NoFeasibleCandidate,
    SelectionTrace,
    SelectorConfig,
    pinv,
)

__all__ = [
    "MLP",
    "Adam",
    "forward",
    "backward",
    "loss_mse",
    "loss_mse_grad",
    "loss_penalty",
    "loss_penalty_grad",
    "StaleTrace",
    "projection_backward",
    "ProjectionLayer",
    "LayerState",
]


class MLP:
    """Fully connected net: ReLU on hidden layers, identity on the output.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` of shape
    ``(N, d_in)`` maps through ``X @ W + b``.
    """

    def __init__(self, layer_sizes, rng=None, params=None):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if params is None:
            rng = np.random.default_rng(rng)
            params = []
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, fan_out))
        self.params = [np.array(p, dtype=float) for p in params]
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out) or self.params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"parameter shapes of layer {i} do not match {layer_sizes}")

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input of size {self.n_in}, got {x.shape[-1]}")
        acts = [x]
        a = x
        for i in range(self.n_layers):
            z = a @ self.params[2 * i] + self.params[2 * i + 1]
            a = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
            acts.append(a)
        return a, acts

    def backward_cached(self, acts, upstream):
        """Reverse pass from cached activations.

        ReLU's derivative at exactly zero is taken as zero; since cached
        post-activations are ``max(z, 0)``, the mask ``a > 0`` encodes that.
        """
        g = np.asarray(upstream, dtype=float)
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            a_in = acts[i]
            if a_in.ndim == 1:
                grads[2 * i] = np.outer(a_in, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = a_in.reshape(-1, a_in.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * (a_in > 0)
        return grads, g

    def copy(self):
        return MLP(self.layer_sizes, params=[p.copy() for p in self.params])


def forward(net: MLP, x):
    return net.forward(x)


def backward(net: MLP, x, upstream):
    """Return ``(param_grads, input_grad)`` for the scalar ``sum(upstream * net(x))``."""
    _, acts = net.forward_cached(x)
    return net.backward_cached(acts, upstream)


class Adam:
    """Adam with bias correction; updates the parameter arrays in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ losses


def loss_mse(u, u_nom):
    d = np.asarray(u, dtype=float) - np.asarray(u_nom, dtype=float)
    return float(np.mean(d * d))


def loss_mse_grad(u, u_nom):
    d = np.asarray(u, dtype=float) - np.asarray(u_nom, dtype=float)
    return 2.0 * d / d.size


def loss_penalty(u, A, b, weight=100.0):
    """``weight * sum ReLU(A u - b)``, averaged over a leading batch axis if present."""
    r = np.maximum(np.einsum("...ij,...j->...i", A, u) - b, 0.0)
    total = weight * r.sum(axis=-1)
    return float(np.mean(total))


def loss_penalty_grad(u, A, b, weight=100.0):
    """Gradients of :func:`loss_penalty` with respect to ``u`` and ``b``."""
    u = np.asarray(u, dtype=float)
    active = (np.einsum("...ij,...j->...i", A, u) - b > 0).astype(float)
    scale = weight / (u.shape[0] if u.ndim > 1 else 1)
    g_u = scale * np.einsum("...ij,...i->...j", A, active)
    return g_u, -scale * active


# -------------------------------------------------- projection layer grads


class StaleTrace(ValueError):
    """The selection trace was recorded for a different constraint set."""


def projection_backward(trace: SelectionTrace, cs: AffineConstraintSet, upstream,
                        A_pinv=None, rtol=1e-10):
    """Route ``upstream = dL/dy`` back to ``(dL/df, dL/dw, dL/db)``.

    The selected branch is held fixed. ``A_pinv`` may be passed to reuse the
    pseudoinverse of the selected rows.
    """
    if not trace.matches(cs):
        raise StaleTrace("trace does not belong to this constraint set")
    g = np.asarray(upstream, dtype=float)
    g_b = np.zeros(cs.n_c)
    if trace.branch == "passthrough":
        return g.copy(), np.zeros_like(g), g_b
    rows = list(trace.gamma)
    A_g = cs.A[rows]
    Ap = pinv(A_g, rtol) if A_pinv is None else np.asarray(A_pinv, dtype=float)
    g_v = g - A_g.T @ (Ap.T @ g)
    g_b[rows] = Ap.T @ g
    return g_v, g_v.copy(), g_b


@dataclass
class LayerState:
    """Per-sample record of one batched forward pass."""

    passthrough: np.ndarray     # (N,) bool
    choice: np.ndarray          # (N,) candidate index, -1 on passthrough
    n_feasible: np.ndarray      # (N,)


class ProjectionLayer:
    """Batched output rule over states with a fixed constraint matrix stack.

    ``A`` has shape ``(N, n_c, m)`` and does not depend on trainable
    parameters, so the pseudoinverses of every ``A_gamma`` are computed once
    here; only ``b`` changes between epochs.
    """

    def __init__(self, A, subsets="lite", cfg: SelectorConfig = SelectorConfig()):
        self.A = np.asarray(A, dtype=float)
        if self.A.ndim != 3:
            raise ValueError("A must have shape (N, n_c, m)")
        N, n_c, m = self.A.shape
        if subsets == "lite":
            self.bank = CandidateBank.lite(n_c, m)
        elif subsets == "full":
            self.bank = CandidateBank.full(n_c, m)
        else:
            self.bank = CandidateBank(subsets)
        self.cfg = cfg
        self.pinvs = self.bank.pinvs(self.A, cfg.pinv_rtol)
        self._group_of = np.empty(len(self.bank), dtype=np.intp)
        self._slot_of = np.empty(len(self.bank), dtype=np.intp)
        for gi, (pos, _) in enumerate(self.bank.groups):
            self._group_of[pos] = gi
            self._slot_of[pos] = np.arange(len(pos))

    def forward(self, F, W, B):
        cfg = self.cfg
        A = self.A
        N = A.shape[0]
        passthrough = np.all(np.einsum("nij,nj->ni", A, F) <= B + cfg.feas_tol, axis=1)
        Y = F.copy()
        choice = np.full(N, -1, dtype=np.intp)
        n_feas = np.zeros(N, dtype=np.intp)
        idx = np.flatnonzero(~passthrough)
        if idx.size:
            pinvs = [Ap[idx] for Ap in self.pinvs]
            C = self.bank.candidates(F[idx], W[idx], A[idx], B[idx], pinvs=pinvs)
            feas = np.all(np.einsum("ngm,nim->ngi", C, A[idx]) <= B[idx, None, :] + cfg.feas_tol, axis=2)
            d = C - F[idx, None, :]
            if cfg.norm_p == 2:
                dist = np.sqrt(np.sum(d * d, axis=2))
            elif np.isinf(cfg.norm_p):
                dist = np.max(np.abs(d), axis=2)
            else:
                dist = np.sum(np.abs(d) ** cfg.norm_p, axis=2) ** (1.0 / cfg.norm_p)
            dist = np.where(feas, dist, np.inf)
            dmin = dist.min(axis=1)
            bad = ~np.isfinite(dmin)
            if np.any(bad):
                raise NoFeasibleCandidate(
                    f"{bad.sum()} samples have no feasible candidate (first: sample {idx[bad][0]})"
                )
            tied = dist <= dmin[:, None] + cfg.tie_tol
            ranks = np.where(tied, self.bank.lex_rank[None, :], np.iinfo(np.intp).max)
            pick = ranks.argmin(axis=1)
            Y[idx] = C[np.arange(idx.size), pick]
            choice[idx] = pick
            n_feas[idx] = feas.sum(axis=1)
        return Y, LayerState(passthrough, choice, n_feas)

    def backward(self, state: LayerState, G):
        """Return ``(dL/dF, dL/dW, dL/dB)`` for upstream ``G = dL/dY``."""
        N, n_c, m = self.A.shape
        g_f = G.copy()
        g_w = np.zeros_like(G)
        g_b = np.zeros((N, n_c))
        proj = np.flatnonzero(~state.passthrough)
        if proj.size == 0:
            return g_f, g_w, g_b
        ch = state.choice[proj]
        groups = self._group_of[ch]
        for gi, (pos, rows) in enumerate(self.bank.groups):
            sel = groups == gi
            if not np.any(sel):
                continue
            n_idx = proj[sel]
            slot = self._slot_of[ch[sel]]
            Ap = self.pinvs[gi][n_idx, slot]                 # (n, m, k)
            r = rows[slot]                                    # (n, k)
            A_g = self.A[n_idx[:, None], r]                   # (n, k, m)
            g = G[n_idx]
            gb = np.einsum("nmk,nm->nk", Ap, g)
            g_v = g - np.einsum("nkm,nk->nm", A_g, gb)
            g_f[n_idx] = g_v
            g_w[n_idx] = g_v
            np.add.at(g_b, (n_idx[:, None], r), gb)
        return g_f, g_w, g_b
