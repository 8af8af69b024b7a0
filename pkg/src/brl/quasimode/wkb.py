"""WKB quasimodes ``e^{is r} |g0|^{-1/4} b(theta)`` in polar normal coordinates."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from ..errors import PolarCoordinatesError, ValidationError
from ..geometry import Domain, Metric
from ..raytrace import exp_and_polar, polar_inverse

WKB_FD_H = 1e-3


@dataclass(frozen=True)
class BumpProfile:
    """Smooth bump in ``theta`` centred at ``theta0`` with half-width ``width``, unit ``L^2`` norm."""

    theta0: float
    width: float

    def _raw(self, theta):
        z = (np.asarray(theta, dtype=float) - self.theta0) / self.width
        inside = np.abs(z) < 1.0
        zz = np.where(inside, z, 0.0)
        return np.where(inside, np.exp(-1.0 / (1.0 - zz * zz)), 0.0)

    @cached_property
    def scale(self) -> float:
        m, _ = quad(lambda th: float(self._raw(th)) ** 2, self.theta0 - self.width, self.theta0 + self.width,
                    epsabs=0, epsrel=1e-12, limit=200)
        return 1.0 / np.sqrt(m)

    def __call__(self, theta):
        return self.scale * self._raw(theta)


@dataclass
class WkbMode:
    metric: Metric
    domain: Domain
    omega: tuple
    b: Callable
    s: complex

    def _s(self, s):
        return complex(self.s if s is None else s)

    def polar(self, x1, x2):
        """``(r, theta, J)`` with ``J = |g0|^{1/2}`` in polar normal coordinates."""
        return polar_inverse(self.metric, self.omega, np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))

    def amplitude(self, x1, x2):
        r, th, J = self.polar(x1, x2)
        return self.b(th) / np.sqrt(J)

    def evaluate(self, x1, x2, s=None):
        s = self._s(s)
        r, th, J = self.polar(x1, x2)
        return np.exp(1j * s * r) * self.b(th) / np.sqrt(J)

    def laplacian_amplitude(self, x1, x2, h: float = WKB_FD_H):
        """``Delta a`` by fourth-order chart differences of the (non-oscillatory) amplitude."""
        x1 = np.asarray(x1, dtype=float).ravel()
        x2 = np.asarray(x2, dtype=float).ravel()
        k = np.array([-2, -1, 1, 2])
        w1 = np.array([1, -8, 8, -1]) / 12.0
        w2 = np.array([-1, 16, 16, -1]) / 12.0
        n = len(x1)
        X1 = np.concatenate([x1] + [x1 + h * d for d in k] + [x1] * 4
                            + [x1 + c * h * a for c in (1, 2) for a in (1, 1, -1, -1)])
        X2 = np.concatenate([x2] + [x2] * 4 + [x2 + h * d for d in k]
                            + [x2 + c * h * b for c in (1, 2) for b in (1, -1, 1, -1)])
        f = self.amplitude(X1, X2).reshape(17, n)
        fx = np.tensordot(w1, f[1:5], 1) / h
        fy = np.tensordot(w1, f[5:9], 1) / h
        fxx = (np.tensordot(w2, f[1:5], 1) - 2.5 * f[0]) / h**2
        fyy = (np.tensordot(w2, f[5:9], 1) - 2.5 * f[0]) / h**2
        m1 = (f[9] - f[10] - f[11] + f[12]) / (4 * h * h)
        m2 = (f[13] - f[14] - f[15] + f[16]) / (16 * h * h)
        fxy = (4 * m1 - m2) / 3.0
        gi11, gi12, gi22, _ = self.metric.inverse_components(x1, x2)
        G = self.metric.christoffel(x1, x2)
        gam = [gi11 * G[..., c, 0, 0] + 2 * gi12 * G[..., c, 0, 1] + gi22 * G[..., c, 1, 1] for c in range(2)]
        return gi11 * fxx + 2 * gi12 * fxy + gi22 * fyy - gam[0] * fx - gam[1] * fy

    def residual(self, x1, x2, s=None):
        """``(-Delta - s^2) v = -e^{is r} Delta a``."""
        s = self._s(s)
        r, _, _ = self.polar(x1, x2)
        return -np.exp(1j * s * np.ravel(r)) * self.laplacian_amplitude(x1, x2)

    def boundary_trace(self, u, s=None):
        x1, x2 = self.domain.boundary_point(np.asarray(u, dtype=float))
        return self.evaluate(x1, x2, s)


def wkb_mode(metric: Metric, domain: Domain, omega, b_profile: Callable, s: complex = 64.0,
             n_check: int = 256) -> WkbMode:
    """WKB mode about ``omega`` (outside the domain).

    Simplicity from ``omega`` is checked on ``n_check`` boundary samples; a
    conjugate point raises :class:`PolarCoordinatesError`.
    """
    omega = (float(omega[0]), float(omega[1]))
    if domain.rho(*omega) > 0:
        raise ValidationError("centre must lie outside the domain")
    _, (b1, b2) = domain.boundary_samples(n_check)
    res = exp_and_polar(metric, omega, target=(np.asarray(b1), np.asarray(b2)), domain=domain)
    if np.any(np.asarray(res.sqrt_det_g0) <= 0):
        raise PolarCoordinatesError("domain is not simple from the centre")
    return WkbMode(metric, domain, omega, b_profile, complex(s))
