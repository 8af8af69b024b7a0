"""Scalar Riccati equation for the transversal phase Hessian (transversal
dimension one) with the amplitude exponent carried along."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ..errors import RiccatiBreakdownError, ValidationError

Coef = Union[float, Callable[[np.ndarray], np.ndarray]]


def _as_fun(c: Coef):
    if callable(c):
        return c
    v = float(c)
    return lambda t: v + 0.0 * np.asarray(t, dtype=float)


@dataclass
class RiccatiSolution:
    """Samples along ``t`` (monotone in the direction of integration).

    ``growth`` is ``int (B + C Re H) dt`` and ``eta`` is ``int eta0 dt`` with
    ``eta0 = B + C H`` (the trace in transversal dimension one), both measured
    from the initial time.
    """

    t: np.ndarray
    H: np.ndarray
    Hdot: np.ndarray
    growth: np.ndarray
    eta: np.ndarray

    def det_identity_deviation(self) -> float:
        """Max relative gap between ``Im H`` and ``Im H0 exp(-2 growth)``."""
        pred = self.H[0].imag * np.exp(-2.0 * self.growth)
        return float(np.max(np.abs(self.H.imag - pred) / self.H.imag))


def riccati_solve(B: Coef, C: Coef, F: Coef, H0: complex, t_span, step: float,
                  eta_extra: Coef = 0.0) -> RiccatiSolution:
    """RK4 for ``H' + 2 B H + C H^2 = F`` from ``H(t_span[0]) = H0``.

    Coefficients may be constants or callables of ``t``. ``t_span[1]`` may be
    smaller than ``t_span[0]`` (backward integration); the last step is
    shortened to land on ``t_span[1]``. ``eta_extra`` is added to the
    amplitude exponent rate (the ``1/2 d/dt log|g|`` term).
    """
    H0 = complex(H0)
    if not H0.imag > 0:
        raise ValidationError("Im H0 must be positive")
    Bf, Cf, Ff, Ef = _as_fun(B), _as_fun(C), _as_fun(F), _as_fun(eta_extra)
    t0, t1 = float(t_span[0]), float(t_span[1])
    span = t1 - t0
    n = max(1, int(np.ceil(abs(span) / step - 1e-9)))
    hs = np.full(n, np.sign(span) * step) if span != 0 else np.zeros(1)
    if span != 0:
        hs[-1] = span - np.sign(span) * step * (n - 1)
    t = t0 + np.concatenate([[0.0], np.cumsum(hs)])

    def rhs(tt, H):
        b, c = Bf(tt), Cf(tt)
        return Ff(tt) - 2.0 * b * H - c * H * H, b + c * H.real, b + c * H + Ef(tt)

    H = np.empty(n + 1, dtype=complex)
    G = np.zeros(n + 1)
    E = np.zeros(n + 1, dtype=complex)
    H[0] = H0
    for k in range(n):
        h = hs[k]
        tk = t[k]
        k1 = rhs(tk, H[k])
        k2 = rhs(tk + 0.5 * h, H[k] + 0.5 * h * k1[0])
        k3 = rhs(tk + 0.5 * h, H[k] + 0.5 * h * k2[0])
        k4 = rhs(tk + h, H[k] + h * k3[0])
        H[k + 1] = H[k] + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        G[k + 1] = G[k] + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        E[k + 1] = E[k] + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not (np.isfinite(H[k + 1]) and H[k + 1].imag > 0):
            raise RiccatiBreakdownError(f"Im H lost positivity at t = {t[k + 1]:.6g}")
    Hdot = Ff(t) - 2.0 * Bf(t) * H - Cf(t) * H * H
    return RiccatiSolution(t, H, Hdot, G, E)
