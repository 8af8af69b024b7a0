"""Two-dimensional Riemannian metrics on a single chart, domains with boundary,
sampled scalar fields and the three built-in transversal geometries.

Points are passed as separate coordinate arrays ``(x1, x2)`` so every metric
routine broadcasts over arbitrary shapes and also runs on plain floats, which
keeps single-ray integration cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DegenerateBoundaryError,
    DegenerateMetricError,
    InvalidGeometryError,
    OutOfChartError,
    ValidationError,
)

FD_H = 1e-5
CURVATURE_FD_H = 1e-4


def _fd_first(fun, x1, x2, h):
    """Central differences of a tuple-valued function in both coordinates."""
    p1, m1 = fun(x1 + h, x2), fun(x1 - h, x2)
    p2, m2 = fun(x1, x2 + h), fun(x1, x2 - h)
    d1 = tuple((a - b) / (2 * h) for a, b in zip(p1, m1))
    d2 = tuple((a - b) / (2 * h) for a, b in zip(p2, m2))
    return d1, d2


class Metric:
    """Symmetric positive-definite tensor field ``g_jk`` on a chart.

    Parameters
    ----------
    components : callable
        ``components(x1, x2) -> (g11, g12, g22)``.
    derivatives : callable, optional
        ``derivatives(x1, x2) -> ((d1 g11, d1 g12, d1 g22), (d2 g11, d2 g12, d2 g22))``.
        When omitted, central differences with step ``fd_h`` are used.
    in_chart : callable, optional
        Boolean predicate of chart membership, default everywhere.
    fd_h : float
        Finite-difference step in chart units.
    """

    dim = 2
    flat = False

    def __init__(self, components, derivatives=None, in_chart=None, fd_h=FD_H, name="custom"):
        self._components = components
        self._derivatives = derivatives
        self._in_chart = in_chart
        self.fd_h = float(fd_h)
        self.name = name

    @property
    def analytic(self) -> bool:
        return self._derivatives is not None

    # pointwise data ---------------------------------------------------
    def in_chart(self, x1, x2):
        if self._in_chart is None:
            return np.ones(np.broadcast(x1, x2).shape, dtype=bool)
        return self._in_chart(x1, x2)

    def components(self, x1, x2):
        return self._components(x1, x2)

    def inverse_components(self, x1, x2):
        g11, g12, g22 = self.components(x1, x2)
        det = g11 * g22 - g12 * g12
        return g22 / det, -g12 / det, g11 / det, det

    def derivatives(self, x1, x2, method=None):
        """First derivatives of the components, analytic or by central differences."""
        if method is None:
            method = "analytic" if self.analytic else "fd"
        if method == "analytic":
            if not self.analytic:
                raise ValidationError("metric has no closed-form derivatives")
            return self._derivatives(x1, x2)
        h = self.fd_h
        self._check_stencil(x1, x2, h)
        return _fd_first(self.components, x1, x2, h)

    def _check_stencil(self, x1, x2, h):
        for a, b in ((x1 + h, x2), (x1 - h, x2), (x1, x2 + h), (x1, x2 - h)):
            if not np.all(self.in_chart(a, b)):
                raise OutOfChartError("finite-difference stencil leaves the chart")

    def hamilton_rhs(self, x1, x2, p1, p2):
        """Right-hand side of the cogeodesic flow for h = g^{jk} p_j p_k / 2."""
        gi11, gi12, gi22, _ = self.inverse_components(x1, x2)
        v1 = gi11 * p1 + gi12 * p2
        v2 = gi12 * p1 + gi22 * p2
        d1, d2 = self.derivatives(x1, x2)
        f1 = 0.5 * (d1[0] * v1 * v1 + 2.0 * d1[1] * v1 * v2 + d1[2] * v2 * v2)
        f2 = 0.5 * (d2[0] * v1 * v1 + 2.0 * d2[1] * v1 * v2 + d2[2] * v2 * v2)
        return v1, v2, f1, f2

    def christoffel(self, x1, x2, method=None):
        """Christoffel symbols, array of shape ``(..., 2, 2, 2)`` indexed ``[i, j, k]``."""
        d1, d2 = self.derivatives(x1, x2, method=method)
        gi11, gi12, gi22, _ = self.inverse_components(x1, x2)
        shape = np.broadcast(x1, x2).shape
        dg = np.empty(shape + (2, 2, 2))  # dg[..., l, j, k] = d_l g_jk
        for l, d in enumerate((d1, d2)):
            dg[..., l, 0, 0] = d[0]
            dg[..., l, 0, 1] = d[1]
            dg[..., l, 1, 0] = d[1]
            dg[..., l, 1, 1] = d[2]
        ginv = np.empty(shape + (2, 2))
        ginv[..., 0, 0] = gi11
        ginv[..., 0, 1] = gi12
        ginv[..., 1, 0] = gi12
        ginv[..., 1, 1] = gi22
        # lowered symbols Γ_ljk = (d_j g_lk + d_k g_lj - d_l g_jk) / 2
        low = 0.5 * (
            np.einsum("...jlk->...ljk", dg) + np.einsum("...klj->...ljk", dg) - dg
        )
        return np.einsum("...il,...ljk->...ijk", ginv, low)

    def gaussian_curvature(self, x1, x2):
        """Gaussian curvature from the Brioschi formula with finite differences."""
        h = CURVATURE_FD_H
        E, F, G = self.components(x1, x2)
        pp = self.components(x1 + h, x2 + h)
        pm = self.components(x1 + h, x2 - h)
        mp = self.components(x1 - h, x2 + h)
        mm = self.components(x1 - h, x2 - h)
        p1, m1 = self.components(x1 + h, x2), self.components(x1 - h, x2)
        p2, m2 = self.components(x1, x2 + h), self.components(x1, x2 - h)
        c = (E, F, G)
        du = [(a - b) / (2 * h) for a, b in zip(p1, m1)]
        dv = [(a - b) / (2 * h) for a, b in zip(p2, m2)]
        duu = [(a - 2 * m + b) / h**2 for a, m, b in zip(p1, c, m1)]
        dvv = [(a - 2 * m + b) / h**2 for a, m, b in zip(p2, c, m2)]
        duv = [(a - b - cc + d) / (4 * h * h) for a, b, cc, d in zip(pp, pm, mp, mm)]
        Eu, Fu, Gu = du
        Ev, Fv, Gv = dv
        Evv, Guu, Fuv = dvv[0], duu[2], duv[1]
        a11 = -0.5 * Evv + Fuv - 0.5 * Guu
        det1 = (
            a11 * (E * G - F * F)
            - 0.5 * Eu * ((Fv - 0.5 * Gu) * G - F * 0.5 * Gv)
            + (Fu - 0.5 * Ev) * ((Fv - 0.5 * Gu) * F - E * 0.5 * Gv)
        )
        det2 = (
            -0.5 * Ev * (0.5 * Ev * G - F * 0.5 * Gu)
            + 0.5 * Gu * (0.5 * Ev * F - E * 0.5 * Gu)
        )
        return (det1 - det2) / (E * G - F * F) ** 2


class ConformalMetric(Metric):
    """Metric ``e^{2 phi} delta`` with closed-form ``phi`` and its derivatives.

    Parameters
    ----------
    phi : callable
        ``phi(x1, x2) -> (phi, d1 phi, d2 phi)``.
    laplacian_phi : callable
        Flat Laplacian of ``phi``.
    """

    def __init__(self, phi, laplacian_phi, in_chart=None, fd_h=FD_H, name="conformal"):
        self._phi = phi
        self._lap_phi = laplacian_phi

        def comps(x1, x2):
            f = np.exp(2.0 * phi(x1, x2)[0])
            return f, 0.0 * f, f

        def derivs(x1, x2):
            p, p1, p2 = phi(x1, x2)
            f = np.exp(2.0 * p)
            z = 0.0 * f
            return (2 * p1 * f, z, 2 * p1 * f), (2 * p2 * f, z, 2 * p2 * f)

        super().__init__(comps, derivs, in_chart=in_chart, fd_h=fd_h, name=name)

    def phi(self, x1, x2):
        return self._phi(x1, x2)

    def hamilton_rhs(self, x1, x2, p1, p2):
        p, d1, d2 = self._phi(x1, x2)
        w = np.exp(-2.0 * p)
        k = w * (p1 * p1 + p2 * p2)
        return w * p1, w * p2, k * d1, k * d2

    def gaussian_curvature(self, x1, x2):
        return -np.exp(-2.0 * self._phi(x1, x2)[0]) * self._lap_phi(x1, x2)

    def brioschi_curvature(self, x1, x2):
        return Metric.gaussian_curvature(self, x1, x2)


class MetricData(NamedTuple):
    g: np.ndarray
    ginv: np.ndarray
    sqrt_det: float


def metric_at(metric: Metric, x) -> MetricData:
    """Metric matrix, its inverse and volume density at one chart point."""
    x1, x2 = float(x[0]), float(x[1])
    if not metric.in_chart(x1, x2):
        raise OutOfChartError(f"point {x1, x2} is outside the chart")
    g11, g12, g22 = (float(c) for c in metric.components(x1, x2))
    det = g11 * g22 - g12 * g12
    if not (np.isfinite(det) and g11 > 0 and det > 0):
        raise DegenerateMetricError(f"metric not positive definite at {x1, x2}")
    g = np.array([[g11, g12], [g12, g22]])
    ginv = np.array([[g22, -g12], [-g12, g11]]) / det
    return MetricData(g, ginv, float(np.sqrt(det)))


def christoffel_at(metric: Metric, x, method=None) -> np.ndarray:
    """Christoffel symbols ``G[i, j, k]`` at one chart point."""
    return metric.christoffel(float(x[0]), float(x[1]), method=method)


def inner(metric: Metric, x1, x2, u, v):
    """g-inner product of vectors ``u = (u1, u2)`` and ``v`` at ``(x1, x2)``."""
    g11, g12, g22 = metric.components(x1, x2)
    return g11 * u[0] * v[0] + g12 * (u[0] * v[1] + u[1] * v[0]) + g22 * u[1] * v[1]


def lower(metric: Metric, x1, x2, v):
    g11, g12, g22 = metric.components(x1, x2)
    return g11 * v[0] + g12 * v[1], g12 * v[0] + g22 * v[1]


def raise_index(metric: Metric, x1, x2, p):
    gi11, gi12, gi22, _ = metric.inverse_components(x1, x2)
    return gi11 * p[0] + gi12 * p[1], gi12 * p[0] + gi22 * p[1]


def rotate_quarter(metric: Metric, x1, x2, v):
    """Rotate a vector by +90 degrees with respect to ``g`` (chart orientation)."""
    g11, g12, g22 = metric.components(x1, x2)
    sq = np.sqrt(g11 * g22 - g12 * g12)
    # (J v)^i = eps^{ij} g_jk v^k / sqrt(det g)
    p1 = g11 * v[0] + g12 * v[1]
    p2 = g12 * v[0] + g22 * v[1]
    return -p2 / sq, p1 / sq


# ----------------------------------------------------------------------------
# domains
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class Domain:
    """Compact region ``{rho > 0}`` bounded by a closed chart curve.

    The boundary parameter ``u`` runs over ``[0, boundary_length)``.
    ``E`` is a tuple of ``(a, b)`` parameter intervals with ``a < b``; an
    interval may extend past ``boundary_length`` to wrap around.
    """

    rho: Callable
    grad_rho: Callable
    boundary_point: Callable
    boundary_param: Callable
    boundary_length: float
    E: tuple = ()
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    bbox: tuple = (-1.0, 1.0, -1.0, 1.0)

    def with_E(self, intervals: Sequence[Sequence[float]]) -> "Domain":
        L = self.boundary_length
        out = []
        for a, b in intervals:
            a, b = float(a), float(b)
            if not b > a:
                raise ValidationError(f"E interval ({a}, {b}) must have b > a")
            if b - a >= L:
                out = [(0.0, L)]
                break
            a0 = a % L
            out.append((a0, a0 + (b - a)))
        return Domain(self.rho, self.grad_rho, self.boundary_point, self.boundary_param,
                      self.boundary_length, tuple(out), self.kind, dict(self.params), self.bbox)

    def in_E(self, u):
        u = np.asarray(u, dtype=float)
        L = self.boundary_length
        hit = np.zeros(u.shape, dtype=bool)
        for a, b in self.E:
            hit |= np.mod(u - a, L) <= (b - a)
        return hit

    @property
    def E_full(self) -> bool:
        return any(b - a >= self.boundary_length * (1 - 1e-15) for a, b in self.E)

    @property
    def E_measure(self) -> float:
        return float(min(sum(b - a for a, b in self.E), self.boundary_length))

    def contains(self, x1, x2):
        return self.rho(x1, x2) > 0

    def boundary_samples(self, n: int):
        u = np.linspace(0.0, self.boundary_length, n, endpoint=False)
        return u, self.boundary_point(u)

    @property
    def diameter(self) -> float:
        x0, x1, y0, y1 = self.bbox
        return float(np.hypot(x1 - x0, y1 - y0))


def circular_domain(center, radius, kind, params=None) -> Domain:
    """Chart disc ``|x - center| < radius`` parametrized by chart arclength."""
    c1, c2 = float(center[0]), float(center[1])
    R = float(radius)

    def rho(x1, x2):
        return R - np.hypot(x1 - c1, x2 - c2)

    def grad_rho(x1, x2):
        r = np.hypot(x1 - c1, x2 - c2)
        return -(x1 - c1) / r, -(x2 - c2) / r

    def bpoint(u):
        a = np.asarray(u, dtype=float) / R
        return c1 + R * np.cos(a), c2 + R * np.sin(a)

    def bparam(x1, x2):
        return np.mod(np.arctan2(x2 - c2, x1 - c1), 2 * np.pi) * R

    L = 2 * np.pi * R
    p = {"center": (c1, c2), "chart_radius": R}
    p.update(params or {})
    return Domain(rho, grad_rho, bpoint, bparam, L, ((0.0, L),), kind, p,
                  (c1 - R, c1 + R, c2 - R, c2 + R))


class BoundaryFrame(NamedTuple):
    point: tuple
    nu: tuple
    tangent: tuple


def boundary_geometry(domain: Domain, metric: Metric, u) -> BoundaryFrame:
    """Point, outward g-unit normal and counterclockwise g-unit tangent at ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u > domain.boundary_length):
        raise ValidationError("boundary parameter out of range")
    x1, x2 = domain.boundary_point(u)
    r1, r2 = domain.grad_rho(x1, x2)
    if np.any(np.hypot(r1, r2) == 0):
        raise DegenerateBoundaryError("grad rho vanishes on the boundary")
    # outward normal: -grad_g rho normalised
    n1, n2 = raise_index(metric, x1, x2, (-r1, -r2))
    nn = np.sqrt(inner(metric, x1, x2, (n1, n2), (n1, n2)))
    n1, n2 = n1 / nn, n2 / nn
    t1, t2 = rotate_quarter(metric, x1, x2, (n1, n2))
    return BoundaryFrame((x1, x2), (n1, n2), (t1, t2))


# ----------------------------------------------------------------------------
# built-in geometries
# ----------------------------------------------------------------------------
def euclidean_metric() -> ConformalMetric:
    def phi(x1, x2):
        z = 0.0 * (x1 + x2)
        return z, z, z

    m = ConformalMetric(phi, lambda x1, x2: 0.0 * (x1 + x2), name="euclidean")
    m.flat = True
    return m


def stereographic_sphere_metric() -> ConformalMetric:
    """Round unit sphere in the stereographic chart from the south pole."""

    def phi(x1, x2):
        q = 1.0 + x1 * x1 + x2 * x2
        return np.log(2.0 / q), -2.0 * x1 / q, -2.0 * x2 / q

    def lap(x1, x2):
        q = 1.0 + x1 * x1 + x2 * x2
        return -4.0 / (q * q)

    return ConformalMetric(phi, lap, name="sphere_stereographic")


def halfplane_metric() -> ConformalMetric:
    """Hyperbolic metric ``y2^{-2} (dy2^2 + dy3^2)`` on the chart ``(y2, y3)``."""

    def phi(x1, x2):
        z = 0.0 * x2
        return -np.log(x1) + z, -1.0 / x1 + z, z + 0.0 * x1

    def lap(x1, x2):
        return 1.0 / (x1 * x1) + 0.0 * x2

    return ConformalMetric(phi, lap, in_chart=lambda x1, x2: np.asarray(x1) > 0,
                           name="hyperbolic_halfplane")


def sphere_polar_metric() -> Metric:
    """Round sphere in colatitude/azimuth coordinates ``(theta, phi)`` with closed-form derivatives."""

    def comps(t, p):
        s = np.sin(t)
        return 1.0 + 0.0 * (t + p), 0.0 * (t + p), s * s + 0.0 * p

    def derivs(t, p):
        z = 0.0 * (t + p)
        return (z, z, 2 * np.sin(t) * np.cos(t) + z), (z, z, z)

    return Metric(comps, derivs, in_chart=lambda t, p: (np.asarray(t) > 0) & (np.asarray(t) < np.pi),
                  name="sphere_polar")


def chart_to_sphere(x1, x2):
    """Inverse stereographic projection (chart origin at the north pole)."""
    q = 1.0 + x1 * x1 + x2 * x2
    return 2 * x1 / q, 2 * x2 / q, (2.0 - q) / q


def sphere_to_chart(P):
    P = np.asarray(P, dtype=float)
    return P[..., 0] / (1 + P[..., 2]), P[..., 1] / (1 + P[..., 2])


def builtin_geometry(name: str, **params):
    """Return ``(metric, domain)`` for a built-in transversal geometry.

    ``disc_euclidean(radius=1)``, ``sphere_cap(theta_max=1)`` and
    ``hyperbolic_halfplane_patch(center=(2, 0), r=0.8)``. The domain has the
    full boundary as observation set.
    """
    if name == "disc_euclidean":
        R = float(params.pop("radius", 1.0))
        _no_extra(params)
        if not R > 0:
            raise InvalidGeometryError("disc radius must be positive")
        return euclidean_metric(), circular_domain((0.0, 0.0), R, name, {"radius": R})
    if name == "sphere_cap":
        th = float(params.pop("theta_max", 1.0))
        _no_extra(params)
        if not 0 < th < np.pi / 2:
            raise InvalidGeometryError("sphere cap must satisfy 0 < theta_max < pi/2")
        return stereographic_sphere_metric(), circular_domain(
            (0.0, 0.0), np.tan(th / 2), name, {"theta_max": th})
    if name == "hyperbolic_halfplane_patch":
        c = tuple(float(v) for v in params.pop("center", (2.0, 0.0)))
        r = float(params.pop("r", 0.8))
        _no_extra(params)
        if len(c) != 2 or not r > 0 or not c[0] - r > 0:
            raise InvalidGeometryError("hyperbolic patch must lie strictly inside y2 > 0")
        return halfplane_metric(), circular_domain(c, r, name, {"r": r})
    raise InvalidGeometryError(f"unknown geometry {name!r}")


def _no_extra(params):
    if params:
        raise InvalidGeometryError(f"unexpected geometry parameters: {sorted(params)}")


# ----------------------------------------------------------------------------
# scalar fields and differential operators
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class ScalarField:
    """Samples on the lattice ``(ox + i hx, oy + j hy)``; ``values[i, j]``."""

    values: np.ndarray
    hx: float
    hy: float
    ox: float
    oy: float

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError("field values must be a 2D array")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    def axes(self):
        return (self.ox + self.hx * np.arange(self.nx), self.oy + self.hy * np.arange(self.ny))

    def mesh(self):
        a, b = self.axes()
        return np.meshgrid(a, b, indexing="ij")

    @classmethod
    def from_function(cls, f, nx, ny, hx, hy, ox, oy):
        X1, X2 = np.meshgrid(ox + hx * np.arange(nx), oy + hy * np.arange(ny), indexing="ij")
        return cls(np.asarray(f(X1, X2)) + 0 * X1, hx, hy, ox, oy)

    @classmethod
    def covering(cls, domain: Domain, n: int, f=None, margin: float = 0.0):
        """``n x n`` lattice on the domain bounding box (padded by ``margin``)."""
        x0, x1, y0, y1 = domain.bbox
        x0, x1, y0, y1 = x0 - margin, x1 + margin, y0 - margin, y1 + margin
        hx, hy = (x1 - x0) / (n - 1), (y1 - y0) / (n - 1)
        if f is None:
            f = lambda a, b: 0.0 * a  # noqa: E731
        return cls.from_function(f, n, n, hx, hy, x0, y0)

    def with_values(self, values):
        return ScalarField(np.asarray(values), self.hx, self.hy, self.ox, self.oy)

    def covers(self, x1, x2, tol=1e-12):
        a = (np.asarray(x1) - self.ox) / self.hx
        b = (np.asarray(x2) - self.oy) / self.hy
        return (a >= -tol) & (a <= self.nx - 1 + tol) & (b >= -tol) & (b <= self.ny - 1 + tol)

    def interp(self, x1, x2):
        """Bilinear interpolation; raises ``CoverageError`` outside the lattice."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        a = (x1 - self.ox) / self.hx
        b = (x2 - self.oy) / self.hy
        tol = 1e-9
        if np.any(a < -tol) or np.any(a > self.nx - 1 + tol) or np.any(b < -tol) or np.any(b > self.ny - 1 + tol):
            raise CoverageError("evaluation point outside field lattice")
        i = np.clip(np.floor(a).astype(int), 0, self.nx - 2)
        j = np.clip(np.floor(b).astype(int), 0, self.ny - 2)
        fa = np.clip(a - i, 0.0, 1.0)
        fb = np.clip(b - j, 0.0, 1.0)
        v = self.values
        return ((1 - fa) * (1 - fb) * v[i, j] + fa * (1 - fb) * v[i + 1, j]
                + (1 - fa) * fb * v[i, j + 1] + fa * fb * v[i + 1, j + 1])

    __call__ = interp


def laplace_beltrami_grid(field: ScalarField, metric: Metric) -> ScalarField:
    """Divergence-form Laplace-Beltrami on lattice nodes; the outer ring is NaN."""
    f = field.values
    hx, hy = field.hx, field.hy
    X1, X2 = field.mesh()
    out = np.full(f.shape, np.nan, dtype=np.result_type(f.dtype, float))

    def coeffs(a, b):
        g11, g12, g22 = metric.components(a, b)
        det = g11 * g22 - g12 * g12
        sq = np.sqrt(det)
        return sq * g22 / det, -sq * g12 / det, sq * g11 / det, sq

    # fluxes at half nodes
    A11e, _, _, _ = coeffs(X1[1:-1, 1:-1] + hx / 2, X2[1:-1, 1:-1])
    A11w, _, _, _ = coeffs(X1[1:-1, 1:-1] - hx / 2, X2[1:-1, 1:-1])
    _, _, A22n, _ = coeffs(X1[1:-1, 1:-1], X2[1:-1, 1:-1] + hy / 2)
    _, _, A22s, _ = coeffs(X1[1:-1, 1:-1], X2[1:-1, 1:-1] - hy / 2)
    _, A12, _, sq = coeffs(X1, X2)
    c = f[1:-1, 1:-1]
    lap = (A11e * (f[2:, 1:-1] - c) - A11w * (c - f[:-2, 1:-1])) / hx**2
    lap = lap + (A22n * (f[1:-1, 2:] - c) - A22s * (c - f[1:-1, :-2])) / hy**2
    if np.any(A12 != 0):
        # cross terms d1(A12 d2 f) + d2(A12 d1 f) with centred differences
        d2f = np.zeros_like(out)
        d1f = np.zeros_like(out)
        d2f[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / (2 * hy)
        d1f[1:-1, :] = (f[2:, :] - f[:-2, :]) / (2 * hx)
        q1 = A12 * d2f
        q2 = A12 * d1f
        lap = lap + (q1[2:, 1:-1] - q1[:-2, 1:-1]) / (2 * hx) + (q2[1:-1, 2:] - q2[1:-1, :-2]) / (2 * hy)
    out[1:-1, 1:-1] = lap / sq[1:-1, 1:-1]
    return field.with_values(out)


def laplace_beltrami(field: ScalarField, metric: Metric, x):
    """Laplace-Beltrami of a sampled field at chart point ``x``.

    Node values come from :func:`laplace_beltrami_grid` and are bilinearly
    interpolated, so ``x`` must lie at least two cells inside the lattice.
    """
    a = (float(x[0]) - field.ox) / field.hx
    b = (float(x[1]) - field.oy) / field.hy
    if a < 2 or b < 2 or a > field.nx - 3 or b > field.ny - 3:
        raise OutOfChartError("Laplacian stencil leaves the lattice")
    i, j = int(np.floor(a)), int(np.floor(b))
    sub = ScalarField(field.values[i - 1:i + 3, j - 1:j + 3], field.hx, field.hy,
                      field.ox + (i - 1) * field.hx, field.oy + (j - 1) * field.hy)
    lap = laplace_beltrami_grid(sub, metric)
    inner_field = ScalarField(lap.values[1:3, 1:3], field.hx, field.hy,
                              sub.ox + field.hx, sub.oy + field.hy)
    return inner_field.interp(float(x[0]), float(x[1]))[()]


# ----------------------------------------------------------------------------
# parallel transport
# ----------------------------------------------------------------------------
def _transport_rhs(metric, x1, x2, d1, d2, v1, v2):
    G = metric.christoffel(x1, x2)
    w1 = -(G[..., 0, 0, 0] * d1 * v1 + G[..., 0, 0, 1] * d1 * v2 + G[..., 0, 1, 0] * d2 * v1 + G[..., 0, 1, 1] * d2 * v2)
    w2 = -(G[..., 1, 0, 0] * d1 * v1 + G[..., 1, 0, 1] * d1 * v2 + G[..., 1, 1, 0] * d2 * v1 + G[..., 1, 1, 1] * d2 * v2)
    return w1, w2


def parallel_transport(metric: Metric, t, x, xdot, v0) -> np.ndarray:
    """Transport ``v0`` along a sampled curve.

    Parameters
    ----------
    t : (n,) array
        Curve parameter samples (any monotone spacing).
    x, xdot : (n, 2) arrays
        Positions and velocities at the samples. Midpoint data for the RK4
        stages come from cubic Hermite interpolation.
    v0 : (2,) array

    Returns
    -------
    (n, 2) array of transported vectors.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if not np.all(metric.in_chart(x[:, 0], x[:, 1])):
        raise OutOfChartError("curve leaves the chart")
    h = np.diff(t)
    xm = 0.5 * (x[:-1] + x[1:]) + (h[:, None] / 8.0) * (xdot[:-1] - xdot[1:])
    dm = 1.5 * (x[1:] - x[:-1]) / h[:, None] - 0.25 * (xdot[:-1] + xdot[1:])
    # vectorised Christoffel evaluation at all stage points
    G0 = metric.christoffel(x[:, 0], x[:, 1])
    Gm = metric.christoffel(xm[:, 0], xm[:, 1])

    def rhs(G, d, v):
        return -np.einsum("ijk,j,k->i", G, d, v)

    out = np.empty_like(x)
    v = np.asarray(v0, dtype=float).copy()
    out[0] = v
    for n in range(len(t) - 1):
        hn = h[n]
        k1 = rhs(G0[n], xdot[n], v)
        k2 = rhs(Gm[n], dm[n], v + 0.5 * hn * k1)
        k3 = rhs(Gm[n], dm[n], v + 0.5 * hn * k2)
        k4 = rhs(G0[n + 1], xdot[n + 1], v + hn * k3)
        v = v + (hn / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = v
    return out
