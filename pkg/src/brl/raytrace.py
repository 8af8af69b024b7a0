"""Cogeodesic flow, boundary hits, reflection and broken-ray classification.

All tracing goes through one batch integrator (fixed-step RK4 on the state
``(x, xi)`` for many rays at once) followed by bisection on ``rho`` for the
boundary crossing. Single-ray entry points are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial import cKDTree

from .errors import (
    ImmediateExitError,
    NonUnitCovectorError,
    OutOfChartError,
    PolarCoordinatesError,
    TangentialRayError,
    TrappedRayError,
    ValidationError,
)
from .geometry import Domain, Metric, boundary_geometry, inner, lower, raise_index, rotate_quarter

TANGENCY_TOL = 1e-3
DEFAULT_STEP = 1e-3
MAX_LENGTH = 100.0
UNIT_TOL = 1e-6


# ----------------------------------------------------------------------------
# data types
# ----------------------------------------------------------------------------
class BoundaryEvent(NamedTuple):
    t: float
    point: np.ndarray
    u: float
    xi: np.ndarray
    velocity: np.ndarray
    nu: np.ndarray
    margin: float  # |<velocity, nu>_g|


@dataclass
class GeodesicSegment:
    """Samples of one unit-speed geodesic piece, ``t`` in global arclength."""

    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    v: np.ndarray
    entry: Optional[BoundaryEvent] = None
    exit: Optional[BoundaryEvent] = None

    @property
    def t_span(self):
        return float(self.t[0]), float(self.t[-1])

    @property
    def length(self) -> float:
        return float(self.t[-1] - self.t[0])

    def hamiltonian(self, metric: Metric) -> np.ndarray:
        p1, p2 = self.xi[:, 0], self.xi[:, 1]
        gi11, gi12, gi22, _ = metric.inverse_components(self.x[:, 0], self.x[:, 1])
        return 0.5 * (gi11 * p1 * p1 + 2 * gi12 * p1 * p2 + gi22 * p2 * p2)

    def spline(self):
        return CubicHermiteSpline(self.t, self.x, self.v, axis=0)

    def uniform(self, step: float, even: bool = True):
        """Resample at uniform arclength (at most ``step``) with cubic Hermite interpolation."""
        n = max(2, int(np.ceil(self.length / step - 1e-9)))
        if even and n % 2:
            n += 1
        tt = np.linspace(self.t[0], self.t[-1], n + 1)
        return tt, self.spline()(tt)


class Reflection(NamedTuple):
    t: float
    point: np.ndarray
    u: float
    incoming: np.ndarray
    outgoing: np.ndarray
    nu: np.ndarray
    margin: float


@dataclass
class BrokenRay:
    segments: List[GeodesicSegment]
    reflections: List[Reflection]
    entry: BoundaryEvent
    exit: BoundaryEvent
    exits_through_E: bool
    tangency_tol: float = TANGENCY_TOL
    step: float = DEFAULT_STEP
    entry_u: float = float("nan")
    entry_angle: float = float("nan")

    @property
    def total_length(self) -> float:
        return float(self.segments[-1].t[-1] - self.segments[0].t[0])

    @property
    def tangency_margin(self) -> float:
        m = [self.entry.margin, self.exit.margin] + [r.margin for r in self.reflections]
        return float(min(m))

    @property
    def reflection_points_distinct(self) -> bool:
        pts = [r.point for r in self.reflections]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.hypot(*(pts[i] - pts[j])) <= 1e-6:
                    return False
        return True

    @property
    def nontangential_flag(self) -> bool:
        return self.tangency_margin > self.tangency_tol and self.reflection_points_distinct

    def points(self) -> np.ndarray:
        return np.concatenate([s.x for s in self.segments])

    def segment_bounds(self) -> np.ndarray:
        """Global times ``T_0 < T_1 < ... < T_N`` of entry, reflections and exit."""
        return np.array([s.t[0] for s in self.segments] + [self.segments[-1].t[-1]])


# ----------------------------------------------------------------------------
# integrator core
# ----------------------------------------------------------------------------
def _rk4(metric, s, h):
    f = metric.hamilton_rhs
    k1 = f(*s)
    s2 = [a + 0.5 * h * b for a, b in zip(s, k1)]
    k2 = f(*s2)
    s3 = [a + 0.5 * h * b for a, b in zip(s, k2)]
    k3 = f(*s3)
    s4 = [a + h * b for a, b in zip(s, k3)]
    k4 = f(*s4)
    return [a + (h / 6.0) * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(s, k1, k2, k3, k4)]


def _normalize_covector(metric, x1, x2, p1, p2, tol=UNIT_TOL):
    gi11, gi12, gi22, _ = metric.inverse_components(x1, x2)
    h = 0.5 * (gi11 * p1 * p1 + 2 * gi12 * p1 * p2 + gi22 * p2 * p2)
    if np.any(np.abs(h - 0.5) > tol):
        raise NonUnitCovectorError(f"initial covector has h = {np.max(np.abs(h)):.3g}, expected 1/2")
    c = 1.0 / np.sqrt(2.0 * h)
    return p1 * c, p2 * c


def integrate_cogeodesic(metric: Metric, x0, xi0, t_max: float, step: float = DEFAULT_STEP,
                         t0: float = 0.0) -> GeodesicSegment:
    """Fixed-step RK4 for the cogeodesic flow from ``(x0, xi0)`` over ``[t0, t0 + t_max]``.

    Negative ``t_max`` integrates backwards. The last step is shortened to
    land exactly on ``t_max``.
    """
    x1, x2 = float(x0[0]), float(x0[1])
    p1, p2 = _normalize_covector(metric, x1, x2, float(xi0[0]), float(xi0[1]))
    sgn = 1.0 if t_max >= 0 else -1.0
    n = int(np.ceil(abs(t_max) / step - 1e-9))
    hs = np.full(n, step * sgn)
    if n:
        hs[-1] = t_max - sgn * step * (n - 1)
    out = np.empty((n + 1, 4))
    s = [x1, x2, p1, p2]
    out[0] = s
    for k in range(n):
        s = _rk4(metric, s, hs[k])
        if not metric.in_chart(s[0], s[1]):
            raise OutOfChartError(f"geodesic left the chart at t = {t0 + np.sum(hs[:k + 1]):.6g}")
        out[k + 1] = s
    t = t0 + np.concatenate([[0.0], np.cumsum(hs)])
    v1, v2 = raise_index(metric, out[:, 0], out[:, 1], (out[:, 2], out[:, 3]))
    return GeodesicSegment(t, out[:, :2].copy(), out[:, 2:].copy(), np.column_stack([v1, v2]))


def _trace_batch(metric, domain, x1, x2, p1, p2, step, max_length, t0=None):
    """March many rays until ``rho`` changes sign.

    Returns per-ray ``(t, states)`` arrays, with ``states`` of shape ``(n_i, 4)``,
    and a status array: 0 = hit the boundary, 1 = trapped, 2 = left the chart.
    """
    n = len(x1)
    t0 = np.zeros(n) if t0 is None else np.asarray(t0, dtype=float)
    cap = int(np.ceil(max_length / step)) + 2
    grow = min(cap, 256)
    buf = np.full((grow, 4, n), np.nan)
    buf[0] = [x1, x2, p1, p2]
    count = np.ones(n, dtype=int)
    tend = np.zeros(n)
    status = np.zeros(n, dtype=int)
    active = np.arange(n)
    S = np.array([x1, x2, p1, p2], dtype=float)
    k = 0
    while active.size:
        k += 1
        if k >= buf.shape[0]:
            buf = np.concatenate([buf, np.full((min(buf.shape[0], cap), 4, n), np.nan)])
        cur = [S[i, active] for i in range(4)]
        new = _rk4(metric, cur, step)
        ok_chart = metric.in_chart(new[0], new[1])
        rho_new = np.where(ok_chart, domain.rho(new[0], new[1]), -1.0)
        crossed = rho_new <= 0
        stay = ~crossed
        idx = active[stay]
        for i in range(4):
            S[i, idx] = new[i][stay]
            buf[k, i, idx] = new[i][stay]
        count[idx] += 1
        if np.any(crossed):
            ci = active[crossed]
            base = [c[crossed] for c in cur]
            lo = np.zeros(ci.size)
            hi = np.full(ci.size, step)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                st = _rk4(metric, base, mid)
                inside = metric.in_chart(st[0], st[1])
                r = np.where(inside, domain.rho(st[0], st[1]), -1.0)
                pos = r > 0
                lo = np.where(pos, mid, lo)
                hi = np.where(pos, hi, mid)
                if np.all(hi - lo < 1e-16 * step):
                    break
            sfin = 0.5 * (lo + hi)
            st = _rk4(metric, base, sfin)
            for i in range(4):
                buf[k, i, ci] = st[i]
            count[ci] += 1
            tend[ci] = (k - 1) * step + sfin
        done = crossed.copy()
        if k * step > max_length:
            status[active[~crossed]] = 1
            done[:] = True
        active = active[~done]
    results = []
    for j in range(n):
        m = count[j]
        states = buf[:m, :, j]
        t = t0[j] + step * np.arange(m, dtype=float)
        if status[j] == 0:
            t[-1] = t0[j] + tend[j]
        results.append((t, states))
    return results, status


def _event(metric, domain, t, state, kind="exit") -> BoundaryEvent:
    x1, x2, p1, p2 = (float(v) for v in state)
    u = float(domain.boundary_param(x1, x2))
    bf = boundary_geometry(domain, metric, u)
    nu = np.array([float(bf.nu[0]), float(bf.nu[1])])
    # normal evaluated at the actual crossing point, not the re-projected one
    r1, r2 = domain.grad_rho(x1, x2)
    n1, n2 = raise_index(metric, x1, x2, (-r1, -r2))
    nn = np.sqrt(inner(metric, x1, x2, (n1, n2), (n1, n2)))
    nu = np.array([n1 / nn, n2 / nn])
    v = np.array(raise_index(metric, x1, x2, (p1, p2)), dtype=float)
    margin = abs(float(inner(metric, x1, x2, v, nu)))
    return BoundaryEvent(float(t), np.array([x1, x2]), u, np.array([p1, p2]), v, nu, margin)


def _segment_from(metric, t, states):
    x = states[:, :2].copy()
    xi = states[:, 2:].copy()
    v1, v2 = raise_index(metric, x[:, 0], x[:, 1], (xi[:, 0], xi[:, 1]))
    return GeodesicSegment(np.asarray(t, dtype=float), x, xi, np.column_stack([v1, v2]))


def _start_checks(metric, domain, x1, x2, p1, p2):
    r = domain.rho(x1, x2)
    if np.any(r < -1e-10):
        raise ValidationError("start point lies outside the domain")
    on_b = np.abs(r) <= 1e-10
    if np.any(on_b):
        g1, g2 = domain.grad_rho(x1, x2)
        v1, v2 = raise_index(metric, x1, x2, (p1, p2))
        inward = g1 * v1 + g2 * v2
        if np.any(on_b & (inward <= 0)):
            raise ImmediateExitError("ray starts on the boundary pointing outward")


def trace_to_boundary(metric: Metric, domain: Domain, x0, xi0, step: float = DEFAULT_STEP,
                      max_length: float = MAX_LENGTH, t0: float = 0.0) -> GeodesicSegment:
    """Integrate from ``(x0, xi0)`` until ``rho`` changes sign; the last sample has ``|rho| < 1e-12``."""
    x1, x2 = float(x0[0]), float(x0[1])
    p1, p2 = _normalize_covector(metric, x1, x2, float(xi0[0]), float(xi0[1]))
    _start_checks(metric, domain, x1, x2, p1, p2)
    res, status = _trace_batch(metric, domain, np.array([x1]), np.array([x2]), np.array([p1]),
                               np.array([p2]), step, max_length, np.array([t0]))
    if status[0] == 1:
        raise TrappedRayError(f"no boundary hit within length {max_length}")
    t, states = res[0]
    seg = _segment_from(metric, t, states)
    seg.exit = _event(metric, domain, t[-1], states[-1])
    return seg


def reflect_direction(metric: Metric, x, incoming, nu, covector: bool = False) -> np.ndarray:
    """Mirror ``incoming`` in the g-unit normal ``nu`` at chart point ``x``.

    Vectors: ``v - 2 <v, nu> nu``. Covectors: ``xi - 2 xi(nu) nu_flat``.
    """
    x1, x2 = x[0], x[1]
    v = np.asarray(incoming, dtype=float)
    n = np.asarray(nu, dtype=float)
    if covector:
        c = v[0] * n[0] + v[1] * n[1]
        nf = np.array(lower(metric, x1, x2, n))
        return v - 2.0 * c * nf
    c = inner(metric, x1, x2, v, n)
    return v - 2.0 * c * n


def inward_direction(metric: Metric, domain: Domain, u: float, angle: float) -> np.ndarray:
    """Unit vector at boundary parameter ``u`` making ``angle`` with the tangent, pointing inward."""
    bf = boundary_geometry(domain, metric, u)
    T = np.array([float(c) for c in bf.tangent])
    N = np.array([float(c) for c in bf.nu])
    return np.cos(angle) * T - np.sin(angle) * N


# ----------------------------------------------------------------------------
# broken rays
# ----------------------------------------------------------------------------
class _RayOutcome(NamedTuple):
    ray: Optional[BrokenRay]
    error: Optional[str]


def _trace_broken_batch(metric, domain, u0, vel0, max_reflections, step, tangency_tol, max_length):
    """Trace broken rays from boundary parameters ``u0`` with initial vectors ``vel0`` (n, 2)."""
    n = len(u0)
    bx1, bx2 = domain.boundary_point(np.asarray(u0, dtype=float))
    bx1 = np.atleast_1d(np.asarray(bx1, dtype=float))
    bx2 = np.atleast_1d(np.asarray(bx2, dtype=float))
    p1, p2 = lower(metric, bx1, bx2, (vel0[:, 0], vel0[:, 1]))
    p1, p2 = _normalize_covector(metric, bx1, bx2, p1, p2)
    segs = [[] for _ in range(n)]
    refl = [[] for _ in range(n)]
    entries = []
    errors: List[Optional[str]] = [None] * n
    exits: List[Optional[BoundaryEvent]] = [None] * n
    through_E = np.zeros(n, dtype=bool)
    for j in range(n):
        ev = _event(metric, domain, 0.0, (bx1[j], bx2[j], p1[j], p2[j]))
        ev = ev._replace(u=float(u0[j]))
        entries.append(ev)
        if ev.margin <= tangency_tol:
            errors[j] = "tangential"
    g1, g2 = domain.grad_rho(bx1, bx2)
    v1, v2 = raise_index(metric, bx1, bx2, (p1, p2))
    for j in np.nonzero(g1 * v1 + g2 * v2 <= 0)[0]:
        errors[j] = errors[j] or "immediate_exit"
    alive = np.array([e is None for e in errors])
    state = np.array([bx1, bx2, p1, p2])
    tstart = np.zeros(n)
    for bounce in range(max_reflections + 1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        res, status = _trace_batch(metric, domain, *state[:, idx], step,
                                   max_length - tstart[idx].min(), tstart[idx])
        for loc, j in enumerate(idx):
            if status[loc] != 0:
                errors[j] = "trapped"
                alive[j] = False
                continue
            t, states = res[loc]
            seg = _segment_from(metric, t, states)
            ev = _event(metric, domain, t[-1], states[-1])
            seg.entry = entries[j] if bounce == 0 else None
            seg.exit = ev
            segs[j].append(seg)
            if ev.margin <= tangency_tol:
                errors[j] = "tangential"
                alive[j] = False
                continue
            if t[-1] > max_length:
                errors[j] = "trapped"
                alive[j] = False
                continue
            if domain.in_E(ev.u):
                through_E[j] = True
                exits[j] = ev
                alive[j] = False
                continue
            if bounce == max_reflections:
                exits[j] = ev
                alive[j] = False
                continue
            vout = reflect_direction(metric, ev.point, ev.velocity, ev.nu)
            xo = np.array(lower(metric, ev.point[0], ev.point[1], vout), dtype=float)
            refl[j].append(Reflection(ev.t, ev.point, ev.u, ev.velocity, vout, ev.nu, ev.margin))
            state[:, j] = [ev.point[0], ev.point[1], xo[0], xo[1]]
            tstart[j] = ev.t
    out = []
    for j in range(n):
        if errors[j] is not None:
            out.append(_RayOutcome(None, errors[j]))
            continue
        ray = BrokenRay(segs[j], refl[j], entries[j], exits[j], bool(through_E[j]),
                        tangency_tol=tangency_tol, step=step)
        out.append(_RayOutcome(ray, None))
    return out


def trace_broken_ray(metric: Metric, domain: Domain, entry: float, direction, max_reflections: int = 0,
                     step: float = DEFAULT_STEP, tangency_tol: float = TANGENCY_TOL,
                     max_length: float = MAX_LENGTH) -> BrokenRay:
    """Trace a broken ray entering at boundary parameter ``entry``.

    ``direction`` is either an inward angle in ``(0, pi)`` measured from the
    counterclockwise boundary tangent, or a chart vector. The ray stops when it
    leaves through ``E`` or after ``max_reflections`` reflections.
    """
    entry = float(entry)
    if not domain.in_E(entry):
        raise ValidationError(f"entry parameter {entry} is not in E")
    if np.ndim(direction) == 0:
        angle = float(direction)
        vel = inward_direction(metric, domain, entry, angle)
    else:
        vel = np.asarray(direction, dtype=float)
        bx = domain.boundary_point(entry)
        nv = np.sqrt(inner(metric, bx[0], bx[1], vel, vel))
        vel = vel / nv
        bf = boundary_geometry(domain, metric, entry)
        angle = float(np.arctan2(-inner(metric, bx[0], bx[1], vel, bf.nu),
                                 inner(metric, bx[0], bx[1], vel, bf.tangent)))
    bx = domain.boundary_point(entry)
    bf = boundary_geometry(domain, metric, entry)
    c = float(inner(metric, bx[0], bx[1], vel, bf.nu))
    if c >= 0:
        raise ImmediateExitError("initial direction is not inward")
    if -c <= tangency_tol:
        raise TangentialRayError(f"entry margin {-c:.3g} below tangency tolerance {tangency_tol}")
    res = _trace_broken_batch(metric, domain, np.array([entry]), vel[None, :], int(max_reflections),
                              step, tangency_tol, max_length)[0]
    if res.error == "tangential":
        raise TangentialRayError("boundary event below tangency tolerance")
    if res.error == "trapped":
        raise TrappedRayError(f"ray exceeded length {max_length}")
    if res.error is not None:
        raise ImmediateExitError(res.error)
    res.ray.entry_u = entry
    res.ray.entry_angle = angle
    return res.ray


def trace_broken_rays(metric: Metric, domain: Domain, entries, angles, max_reflections: int = 0,
                      step: float = DEFAULT_STEP, tangency_tol: float = TANGENCY_TOL,
                      max_length: float = MAX_LENGTH):
    """Batch version of :func:`trace_broken_ray`; returns ``(rays, errors)`` lists (``None`` where absent)."""
    entries = np.asarray(entries, dtype=float)
    angles = np.asarray(angles, dtype=float)
    bx1, bx2 = domain.boundary_point(entries)
    bf = boundary_geometry(domain, metric, entries)
    T = np.column_stack([bf.tangent[0], bf.tangent[1]])
    N = np.column_stack([bf.nu[0], bf.nu[1]])
    vel = np.cos(angles)[:, None] * T - np.sin(angles)[:, None] * N
    outs = _trace_broken_batch(metric, domain, entries, vel, int(max_reflections), step,
                               tangency_tol, max_length)
    rays, errs = [], []
    for o, u, a in zip(outs, entries, angles):
        if o.ray is not None:
            o.ray.entry_u = float(u)
            o.ray.entry_angle = float(a)
        rays.append(o.ray)
        errs.append(o.error)
    return rays, errs


# ----------------------------------------------------------------------------
# classification
# ----------------------------------------------------------------------------
class Classification(NamedTuple):
    nontangential: bool
    self_intersections: list


def _seg_intersect(P, Q, R, S):
    """Intersection parameters of segments PQ and RS (arrays of shape (k, 2)); NaN if none."""
    d1 = Q - P
    d2 = S - R
    den = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    w = R - P
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (w[:, 0] * d2[:, 1] - w[:, 1] * d2[:, 0]) / den
        b = (w[:, 0] * d1[:, 1] - w[:, 1] * d1[:, 0]) / den
    ok = (den != 0) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return np.where(ok, a, np.nan), np.where(ok, b, np.nan)


def classify_ray(ray: BrokenRay, tol: Optional[float] = None, domain: Optional[Domain] = None,
                 tangency_tol: Optional[float] = None) -> Classification:
    """Nontangentiality and interior self-intersections of a broken ray.

    Crossings are searched among chart polyline pieces lying within ``tol``
    (default twice the trace step) of each other; each crossing is reported
    once as a pair ``(t, t')`` with ``t < t'``. Contacts at boundary points
    (reflection points and coinciding endpoints) are not interior crossings
    and are skipped when ``domain`` is given.
    """
    tol = 2.0 * ray.step if tol is None else float(tol)
    ttol = ray.tangency_tol if tangency_tol is None else tangency_tol
    nontan = ray.tangency_margin > ttol and ray.reflection_points_distinct
    t = np.concatenate([s.t for s in ray.segments])
    x = np.concatenate([s.x for s in ray.segments])
    sid = np.concatenate([np.full(len(s.t), k) for k, s in enumerate(ray.segments)])
    tree = cKDTree(x)
    pairs = tree.query_pairs(r=max(tol, 1.5 * ray.step), output_type="ndarray")
    if pairs.size == 0:
        return Classification(bool(nontan), [])
    i, k = pairs[:, 0], pairs[:, 1]
    swap = t[i] > t[k]
    i, k = np.where(swap, k, i), np.where(swap, i, k)
    gap = t[k] - t[i]
    keep = gap > 4 * max(tol, ray.step)
    i, k = i[keep], k[keep]
    if i.size == 0:
        return Classification(bool(nontan), [])
    # cluster candidate pairs in (t, t') space
    order = np.lexsort((t[k], t[i]))
    i, k = i[order], k[order]
    clusters = []
    for a, b in zip(i, k):
        for c in clusters:
            if abs(t[a] - c[0]) < 10 * tol + 4 * ray.step and abs(t[b] - c[1]) < 10 * tol + 4 * ray.step:
                c[2].append((a, b))
                break
        else:
            clusters.append([t[a], t[b], [(a, b)]])
    found = []
    n = len(t)
    for _, _, members in clusters:
        best = None
        for a, b in members:
            for da in (-1, 0):
                for db in (-1, 0):
                    p, q = a + da, b + db
                    if p < 0 or q < 0 or p + 1 >= n or q + 1 >= n:
                        continue
                    if sid[p] != sid[p + 1] or sid[q] != sid[q + 1]:
                        continue
                    al, be = _seg_intersect(x[p:p + 1], x[p + 1:p + 2], x[q:q + 1], x[q + 1:q + 2])
                    if np.isfinite(al[0]):
                        tt = t[p] + al[0] * (t[p + 1] - t[p])
                        ts = t[q] + be[0] * (t[q + 1] - t[q])
                        pt = x[p] + al[0] * (x[p + 1] - x[p])
                        best = (0.0, tt, ts, pt)
        # proximity without a polyline crossing is a touch, not an intersection
        if best is None:
            continue
        _, tt, ts, pt = best
        if domain is not None and domain.rho(pt[0], pt[1]) < max(tol, 1e-9):
            continue
        if not any(abs(tt - f[0]) < 10 * tol and abs(ts - f[1]) < 10 * tol for f in found):
            found.append((float(tt), float(ts)))
    return Classification(bool(nontan), sorted(found))


# ----------------------------------------------------------------------------
# exponential map, Jacobi fields and polar normal coordinates
# ----------------------------------------------------------------------------
class PolarResult(NamedTuple):
    r: np.ndarray
    theta: np.ndarray
    sqrt_det_g0: np.ndarray
    point: tuple


def _frame_at(metric, omega):
    w1, w2 = float(omega[0]), float(omega[1])
    g11 = float(metric.components(w1, w2)[0])
    e1 = np.array([1.0 / np.sqrt(g11), 0.0])
    e2 = np.array([float(c) for c in rotate_quarter(metric, w1, w2, e1)])
    return e1, e2


def _jacobi_rhs(metric):
    ham = metric.hamilton_rhs

    def f(x1, x2, p1, p2, b, db):
        a1, a2, f1, f2 = ham(x1, x2, p1, p2)
        K = metric.gaussian_curvature(x1, x2)
        return a1, a2, f1, f2, db, -K * b

    return f


def shoot(metric: Metric, x1, x2, v1, v2, length, nsteps, b0=0.0, db0=1.0):
    """Geodesics from ``x`` with unit initial vectors ``v``, integrated for ``length`` together with
    the Jacobi equation ``b'' + K b = 0``.

    Returns the endpoint state ``(x1, x2, v1, v2, b, b')`` (velocity raised).
    """
    p1, p2 = lower(metric, x1, x2, (v1, v2))
    f = _jacobi_rhs(metric)
    h = np.asarray(length, dtype=float) / nsteps
    s = [x1 + 0 * h, x2 + 0 * h, p1 + 0 * h, p2 + 0 * h, b0 + 0 * h, db0 + 0 * h]
    for _ in range(nsteps):
        k1 = f(*s)
        k2 = f(*[a + 0.5 * h * b for a, b in zip(s, k1)])
        k3 = f(*[a + 0.5 * h * b for a, b in zip(s, k2)])
        k4 = f(*[a + h * b for a, b in zip(s, k3)])
        s = [a + (h / 6.0) * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(s, k1, k2, k3, k4)]
    w1, w2 = raise_index(metric, s[0], s[1], (s[2], s[3]))
    return s[0], s[1], w1, w2, s[4], s[5]


def polar_forward(metric: Metric, omega, r, theta, step: float = 1e-2):
    """Chart point ``exp_omega(r u(theta))`` and the Jacobi factor ``b(r, theta)``."""
    e1, e2 = _frame_at(metric, omega)
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if getattr(metric, "flat", False):
        u1 = np.cos(theta) * e1[0] + np.sin(theta) * e2[0]
        u2 = np.cos(theta) * e1[1] + np.sin(theta) * e2[1]
        return omega[0] + r * u1, omega[1] + r * u2, r + 0 * theta
    u1 = np.cos(theta) * e1[0] + np.sin(theta) * e2[0]
    u2 = np.cos(theta) * e1[1] + np.sin(theta) * e2[1]
    nsteps = max(4, int(np.ceil(np.max(np.abs(r)) / step)))
    x1, x2, _, _, b, _ = shoot(metric, omega[0] + 0 * u1, omega[1] + 0 * u2, u1, u2, r, nsteps)
    return x1, x2, b


def polar_inverse(metric: Metric, omega, x1, x2, step: float = 1e-2, tol: float = 1e-13, max_iter: int = 40):
    """Polar normal coordinates ``(r, theta, b)`` of chart points about ``omega`` by Newton shooting."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    e1, e2 = _frame_at(metric, omega)
    w1, w2 = float(omega[0]), float(omega[1])
    if getattr(metric, "flat", False):
        d1, d2 = x1 - w1, x2 - w2
        a = d1 * e1[0] + d2 * e1[1]
        c = d1 * e2[0] + d2 * e2[1]
        r = np.hypot(a, c)
        return r, np.arctan2(c, a), r.copy()
    g11, g12, g22 = (float(v) for v in metric.components(w1, w2))
    d1, d2 = x1 - w1, x2 - w2
    a = g11 * d1 * e1[0] + g12 * (d1 * e1[1] + d2 * e1[0]) + g22 * d2 * e1[1]
    c = g11 * d1 * e2[0] + g12 * (d1 * e2[1] + d2 * e2[0]) + g22 * d2 * e2[1]
    r = np.hypot(a, c)
    th = np.arctan2(c, a)
    for _ in range(max_iter):
        u1 = np.cos(th) * e1[0] + np.sin(th) * e2[0]
        u2 = np.cos(th) * e1[1] + np.sin(th) * e2[1]
        nsteps = max(4, int(np.ceil(np.max(r) / step)))
        y1, y2, v1, v2, b, _ = shoot(metric, w1 + 0 * u1, w2 + 0 * u2, u1, u2, r, nsteps)
        if np.any(b <= 0):
            raise PolarCoordinatesError("conjugate point encountered: Jacobi field b <= 0")
        n1, n2 = rotate_quarter(metric, y1, y2, (v1, v2))
        # Jacobian columns: dF/dr = v, dF/dtheta = b N
        j11, j21 = v1, v2
        j12, j22 = b * n1, b * n2
        det = j11 * j22 - j12 * j21
        r1, r2 = x1 - y1, x2 - y2
        dr = (j22 * r1 - j12 * r2) / det
        dth = (-j21 * r1 + j11 * r2) / det
        r = r + dr
        th = th + dth
        if np.max(np.abs(dr)) < tol and np.max(np.abs(dth)) < tol:
            break
    else:
        raise PolarCoordinatesError("polar-coordinate Newton iteration did not converge")
    u1 = np.cos(th) * e1[0] + np.sin(th) * e2[0]
    u2 = np.cos(th) * e1[1] + np.sin(th) * e2[1]
    nsteps = max(4, int(np.ceil(np.max(r) / step)))
    *_, b, _ = shoot(metric, w1 + 0 * u1, w2 + 0 * u2, u1, u2, r, nsteps)
    return r, th, b


def exp_and_polar(metric: Metric, omega, target=None, r=None, theta=None, domain: Optional[Domain] = None,
                  step: float = 1e-3) -> PolarResult:
    """Polar normal coordinates about ``omega``.

    Give either a chart ``target`` (inverse problem) or ``(r, theta)``
    (forward problem). ``sqrt_det_g0`` is the Jacobi factor ``b`` with
    ``b(0) = 0, b'(0) = 1``.
    """
    w = (float(omega[0]), float(omega[1]))
    if not metric.in_chart(*w):
        raise ValidationError("centre must lie inside the chart")
    if domain is not None and domain.rho(*w) > 0:
        raise ValidationError("centre must lie outside the domain")
    if target is not None:
        rr, th, b = polar_inverse(metric, w, np.asarray(target[0]), np.asarray(target[1]), step=step)
        pt = (np.asarray(target[0], dtype=float), np.asarray(target[1], dtype=float))
    else:
        if r is None or theta is None:
            raise ValidationError("give either target or (r, theta)")
        rr, th = np.asarray(r, dtype=float), np.asarray(theta, dtype=float)
        y1, y2, b = polar_forward(metric, w, rr, th, step=step)
        pt = (y1, y2)
    if np.any(np.asarray(b) <= 0) and np.any(np.asarray(rr) > 0):
        raise PolarCoordinatesError("conjugate point encountered: Jacobi field b <= 0")
    return PolarResult(rr, th, b, pt)
