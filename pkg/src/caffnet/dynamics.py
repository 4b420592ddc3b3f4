"""Control-affine dynamics ``x' = f(x) + g(x) u``.

All ``f``/``g`` evaluations accept a single state ``(n,)`` or a batch ``(N, n)``.
"""

from __future__ import annotations

import numpy as np


class ControlAffine:
    n: int
    m: int

    def f(self, x):
        raise NotImplementedError

    def g(self, x):
        raise NotImplementedError

    def xdot(self, x, u):
        return self.f(x) + np.einsum("...nm,...m->...n", self.g(x), u)


class SingleIntegrator(ControlAffine):
    kind = "single_integrator"

    def __init__(self, n: int = 2):
        self.n = self.m = n

    def f(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape[:-1] + (self.n, self.n))


class LinearDynamics(ControlAffine):
    """``x' = B x + C u``."""

    kind = "linear"

    def __init__(self, B, C):
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.n, self.m = self.C.shape
        if self.B.shape != (self.n, self.n):
            raise ValueError("B must be n x n with n = C.shape[0]")

    def f(self, x):
        return np.asarray(x, dtype=float) @ self.B.T

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.C, x.shape[:-1] + self.C.shape)


class CustomDynamics(ControlAffine):
    """Wraps user callables ``f(x)`` and ``g(x)``."""

    kind = "custom"

    def __init__(self, f, g, n: int, m: int):
        self._f, self._g = f, g
        self.n, self.m = n, m

    def f(self, x):
        return np.asarray(self._f(x), dtype=float)

    def g(self, x):
        return np.asarray(self._g(x), dtype=float)
