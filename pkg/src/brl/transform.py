"""Attenuated (broken) ray transforms, Fourier slices in x1 and the
conductivity-to-Schrodinger reduction.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import CoverageError, NoDataError, PositivityError, ValidationError
from .geometry import Domain, Metric, ScalarField, laplace_beltrami_grid
from .raytrace import TANGENCY_TOL, BrokenRay, trace_broken_rays

FAMILY_STEP = 5e-3


# ----------------------------------------------------------------------------
# sampling helpers
# ----------------------------------------------------------------------------
def hermite_eval(t, x, v, tq):
    """Cubic Hermite interpolation of samples ``(t, x, v)`` at times ``tq``."""
    k = np.clip(np.searchsorted(t, tq, side="right") - 1, 0, len(t) - 2)
    h = t[k + 1] - t[k]
    s = ((tq - t[k]) / h)[:, None]
    h = h[:, None]
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * x[k] + h10 * h * v[k] + h01 * x[k + 1] + h11 * h * v[k + 1]


def simpson_weights(n: int) -> np.ndarray:
    """Composite Simpson weights on ``n + 1`` nodes (``n`` even), unit spacing."""
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


@dataclass
class QuadraturePlan:
    """Flattened Simpson nodes for a list of rays."""

    points: np.ndarray  # (M, 2)
    t: np.ndarray  # (M,) global arclength
    w: np.ndarray  # (M,) quadrature weights
    ray: np.ndarray  # (M,) ray index
    n_rays: int


def quadrature_plan(rays: Sequence[BrokenRay], step: Optional[float] = None) -> QuadraturePlan:
    pts, ts, ws, idx = [], [], [], []
    for i, ray in enumerate(rays):
        st = ray.step if step is None else step
        for seg in ray.segments:
            n = max(2, int(np.ceil(seg.length / st - 1e-9)))
            n += n % 2
            tt = np.linspace(seg.t[0], seg.t[-1], n + 1)
            pts.append(hermite_eval(seg.t, seg.x, seg.v, tt))
            ts.append(tt)
            ws.append(simpson_weights(n) * (seg.length / n))
            idx.append(np.full(n + 1, i))
    return QuadraturePlan(np.concatenate(pts), np.concatenate(ts), np.concatenate(ws),
                          np.concatenate(idx), len(rays))


def _evaluate(h, x1, x2):
    if isinstance(h, ScalarField):
        return h.interp(x1, x2)
    return np.asarray(h(x1, x2))


def _apply_plan(plan: QuadraturePlan, h, lam: float):
    if isinstance(h, ScalarField):
        bad = ~h.covers(plan.points[:, 0], plan.points[:, 1], tol=1e-9)
        if np.any(bad):
            first = int(plan.ray[np.argmax(bad)])
            raise CoverageError(f"ray {first} leaves the field lattice")
    vals = _evaluate(h, plan.points[:, 0], plan.points[:, 1])
    integrand = np.exp(-2.0 * lam * plan.t) * plan.w * vals
    if np.iscomplexobj(integrand):
        re = np.bincount(plan.ray, integrand.real, minlength=plan.n_rays)
        im = np.bincount(plan.ray, integrand.imag, minlength=plan.n_rays)
        return re + 1j * im
    return np.bincount(plan.ray, integrand, minlength=plan.n_rays)


def ray_integral_attenuated(h: Union[ScalarField, Callable], ray: BrokenRay, lam: float,
                            step: Optional[float] = None):
    """Composite Simpson value of ``int_0^L e^{-2 lam t} h(gamma(t)) dt``.

    Each segment is resampled at a uniform arclength spacing of at most
    ``step`` (default: the tracing step) with an even number of intervals.
    ``h`` is a :class:`ScalarField` (bilinear interpolation) or a callable.
    """
    plan = quadrature_plan([ray], step)
    return _apply_plan(plan, h, float(lam))[0]


# ----------------------------------------------------------------------------
# ray families
# ----------------------------------------------------------------------------
@dataclass
class RayFamily:
    rays: List[BrokenRay]
    entries: np.ndarray
    angles: np.ndarray
    n_u: int
    n_a: int
    max_reflections: int
    dropped: Dict[str, int] = field(default_factory=dict)
    _plans: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.rays)

    def plan(self, step=None) -> QuadraturePlan:
        key = step
        if key not in self._plans:
            self._plans[key] = quadrature_plan(self.rays, step)
        return self._plans[key]


def entry_parameters(domain: Domain, n_u: int) -> np.ndarray:
    """``n_u`` parameters spread uniformly (midpoint rule) over the union of E's intervals."""
    lens = np.array([b - a for a, b in domain.E])
    total = lens.sum()
    s = (np.arange(n_u) + 0.5) * total / n_u
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
    u = np.array([domain.E[i][0] for i in k]) + (s - cum[k])
    return np.mod(u, domain.boundary_length)


def ray_family_from_E(metric: Metric, domain: Domain, n_u: int, n_a: int, max_reflections: int = 0,
                      step: float = FAMILY_STEP, tangency_tol: float = TANGENCY_TOL) -> RayFamily:
    """Broken rays entering through E on an ``n_u x n_a`` (entry, angle) lattice.

    Angles are uniform over the open interval ``(tangency_tol, pi - tangency_tol)``.
    Rays that are tangential, trapped or do not leave through E are dropped and
    counted in ``dropped``.
    """
    if not domain.E or domain.E_measure <= 0:
        raise NoDataError("observation set E is empty")
    u = entry_parameters(domain, n_u)
    a = np.linspace(tangency_tol, np.pi - tangency_tol, n_a + 2)[1:-1]
    U, A = np.meshgrid(u, a, indexing="ij")
    U, A = U.ravel(), A.ravel()
    order = np.lexsort((A, U))
    U, A = U[order], A[order]
    rays, errs = trace_broken_rays(metric, domain, U, A, max_reflections, step=step, tangency_tol=tangency_tol)
    keep_r, keep_u, keep_a = [], [], []
    dropped = {"tangential": 0, "trapped": 0, "not_exiting_E": 0, "nontangential_check": 0, "other": 0}
    for ray, err, uu, aa in zip(rays, errs, U, A):
        if ray is None:
            dropped[err if err in dropped else "other"] += 1
            continue
        if not ray.exits_through_E:
            dropped["not_exiting_E"] += 1
            continue
        if not ray.nontangential_flag:
            dropped["nontangential_check"] += 1
            continue
        keep_r.append(ray)
        keep_u.append(uu)
        keep_a.append(aa)
    if not keep_r:
        raise NoDataError("no admissible rays survive filtering")
    return RayFamily(keep_r, np.array(keep_u), np.array(keep_a), n_u, n_a, int(max_reflections), dropped)


# ----------------------------------------------------------------------------
# cylinder potentials and the Fourier slice
# ----------------------------------------------------------------------------
@dataclass
class CylinderPotential:
    """``q(x1, x')`` stored as transversal slices on ``x1_grid`` plus the conformal factor ``c``."""

    x1_grid: np.ndarray
    slices: List[ScalarField]
    c: ScalarField
    support: tuple

    def __post_init__(self):
        self.x1_grid = np.asarray(self.x1_grid, dtype=float)
        if len(self.slices) != len(self.x1_grid):
            raise ValidationError("one transversal slice per x1 node required")
        if not np.all(self.c.values > 0):
            raise PositivityError("conformal factor must be positive")
        a, b = self.support
        if a < self.x1_grid[0] - 1e-12 or b > self.x1_grid[-1] + 1e-12:
            raise ValidationError("support bounds must lie inside the x1 grid")

    @classmethod
    def separable(cls, w: Callable, p: ScalarField, x1_grid, c: Optional[ScalarField] = None, support=None):
        x1_grid = np.asarray(x1_grid, dtype=float)
        c = c if c is not None else p.with_values(np.ones(p.shape))
        slices = [p.with_values(w(x) * p.values) for x in x1_grid]
        support = support if support is not None else (float(x1_grid[0]), float(x1_grid[-1]))
        return cls(x1_grid, slices, c, support)

    @property
    def stack(self) -> np.ndarray:
        return np.stack([s.values for s in self.slices])

    def masked_x1_weights(self) -> np.ndarray:
        """Trapezoid weights on ``x1_grid`` restricted to the support (zero extension outside)."""
        x = self.x1_grid
        a, b = self.support
        w = np.zeros_like(x)
        d = np.diff(x)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        w[(x < a - 1e-12) | (x > b + 1e-12)] = 0.0
        return w


def fourier_slice_field(pot: CylinderPotential, lam: float) -> ScalarField:
    """``c(x') * int q(x1, x') e^{-i 2 lam x1} dx1`` on the transversal lattice (trapezoid rule)."""
    w = pot.masked_x1_weights() * np.exp(-1j * 2.0 * lam * pot.x1_grid)
    vals = np.tensordot(w, pot.stack, axes=(0, 0))
    return pot.c.with_values(pot.c.values * vals)


def fourier_slice(pot: CylinderPotential, lam: float, xprime) -> complex:
    """Fourier slice at transversal chart point(s) ``xprime``."""
    f = fourier_slice_field(pot, lam)
    out = f.interp(np.asarray(xprime[0]), np.asarray(xprime[1]))
    return out[()] if np.ndim(out) == 0 else out


def forward_transform(pot_or_field, family: RayFamily, lam: float, step: Optional[float] = None,
                      threads: int = 1) -> np.ndarray:
    """One attenuated (broken) ray integral per ray of ``family``, ordered by (entry, angle)."""
    if isinstance(pot_or_field, CylinderPotential):
        h = fourier_slice_field(pot_or_field, lam)
    else:
        h = pot_or_field
    plan = family.plan(step)
    if threads <= 1 or plan.n_rays < 2 * threads:
        return _apply_plan(plan, h, float(lam))
    # split by ray blocks; output ordering is fixed by the ray index
    bounds = np.linspace(0, plan.n_rays, threads + 1).astype(int)
    cuts = np.searchsorted(plan.ray, bounds)

    def work(k):
        sl = slice(cuts[k], cuts[k + 1])
        sub = QuadraturePlan(plan.points[sl], plan.t[sl], plan.w[sl], plan.ray[sl] - bounds[k],
                             int(bounds[k + 1] - bounds[k]))
        return _apply_plan(sub, h, float(lam))

    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(work, range(threads)))
    return np.concatenate(parts)


# ----------------------------------------------------------------------------
# conductivity reduction
# ----------------------------------------------------------------------------
def schrodinger_potential_from_conductivity(gamma: ScalarField, metric: Metric) -> ScalarField:
    """``q = Delta_g(gamma^{1/2}) / gamma^{1/2}``; the outer lattice ring is NaN (invalid).

    ``gamma`` is first divided by its maximum, so exactly proportional inputs
    give bit-identical output.
    """
    g = np.asarray(gamma.values)
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise PositivityError("conductivity must be positive everywhere")
    s = gamma.with_values(np.sqrt(g / g.max()))
    lap = laplace_beltrami_grid(s, metric)
    return s.with_values(lap.values / s.values)
