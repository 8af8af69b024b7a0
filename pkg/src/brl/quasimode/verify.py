"""Numerical checks of quasimode properties: residual rates, concentration on
the ray and smallness on the reflecting part of the boundary."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ResolutionError, ValidationError
from ..geometry import Domain, Metric, inner
from ..raytrace import classify_ray, integrate_cogeodesic
from ..transform import ray_integral_attenuated
from .beam import GaussianBeam
from .wkb import WkbMode

CHUNK = 200_000
PATCH_WIDTHS = 6.0


def _one(x1, x2):
    return np.ones(np.shape(x1))


# ----------------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------------
@dataclass
class Quadrature:
    """Nodes and weights (volume form included) for integrals over the domain."""

    x1: np.ndarray
    x2: np.ndarray
    w: np.ndarray
    h: float

    def __len__(self):
        return len(self.w)

    def chunks(self, size: int = CHUNK):
        for a in range(0, len(self.w), size):
            yield slice(a, a + size)


@dataclass(frozen=True)
class Patch:
    """Square of half-side ``radius`` about ``center`` refined ``level`` times per cell side."""

    center: Tuple[float, float]
    radius: float
    level: int


def domain_quadrature(metric: Metric, domain: Domain, h: float, boundary_refine: int = 4,
                      patches: Sequence[Patch] = ()) -> Quadrature:
    """Midpoint rule on a square lattice of spacing at most ``h`` over the domain box.

    Cells near the boundary are split ``boundary_refine`` times per side and
    cells inside a patch ``patch.level`` times; sub-cell centres outside the
    domain are discarded.
    """
    x0, x1, y0, y1 = domain.bbox
    nx = int(np.ceil((x1 - x0) / h - 1e-9))
    ny = int(np.ceil((y1 - y0) / h - 1e-9))
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    cx = x0 + (np.arange(nx) + 0.5) * hx
    cy = y0 + (np.arange(ny) + 0.5) * hy
    C1, C2 = (a.ravel() for a in np.meshgrid(cx, cy, indexing="ij"))
    rho = domain.rho(C1, C2)
    level = np.ones(len(C1), dtype=int)
    near = np.abs(rho) < 1.5 * max(hx, hy)
    level[near] = max(1, int(boundary_refine))
    for p in patches:
        m = (np.abs(C1 - p.center[0]) <= p.radius) & (np.abs(C2 - p.center[1]) <= p.radius)
        level[m] = np.maximum(level[m], int(p.level))
    keep = (level > 1) | (rho > 0)
    C1, C2, level = C1[keep], C2[keep], level[keep]
    X1, X2, W = [], [], []
    for L in np.unique(level):
        sel = level == L
        off = (np.arange(L) + 0.5) / L - 0.5
        o1, o2 = (a.ravel() for a in np.meshgrid(off * hx, off * hy, indexing="ij"))
        p1 = (C1[sel][:, None] + o1[None, :]).ravel()
        p2 = (C2[sel][:, None] + o2[None, :]).ravel()
        inside = domain.rho(p1, p2) > 0
        X1.append(p1[inside])
        X2.append(p2[inside])
        W.append(np.full(int(inside.sum()), hx * hy / (L * L)))
    X1, X2, W = np.concatenate(X1), np.concatenate(X2), np.concatenate(W)
    g11, g12, g22 = metric.components(X1, X2)
    W = W * np.sqrt(g11 * g22 - g12 * g12)
    return Quadrature(X1, X2, W, max(hx, hy))


def _complement(domain: Domain) -> List[Tuple[float, float]]:
    L = domain.boundary_length
    if domain.E_full:
        return []
    iv = sorted((a % L, a % L + (b - a)) for a, b in domain.E)
    gaps = []
    for k, (a, b) in enumerate(iv):
        nxt = iv[(k + 1) % len(iv)][0] + (L if k + 1 == len(iv) else 0.0)
        if nxt > b:
            gaps.append((b, nxt))
    return gaps


def boundary_norm(mode, domain: Domain, metric: Metric, intervals, s: complex, du: float) -> float:
    """``L^2`` norm of the mode on boundary parameter ``intervals`` (midpoint rule, g-arclength)."""
    tot = 0.0
    L = domain.boundary_length
    for a, b in intervals:
        n = max(8, int(np.ceil((b - a) / du)))
        u = a + (np.arange(n) + 0.5) * (b - a) / n
        x1, x2 = (np.asarray(c, dtype=float) for c in domain.boundary_point(np.mod(u, L)))
        e = 1e-6
        d1, d2 = (np.asarray(c, dtype=float) for c in domain.boundary_point(np.mod(u + e, L)))
        m1, m2 = (np.asarray(c, dtype=float) for c in domain.boundary_point(np.mod(u - e, L)))
        tang = ((d1 - m1) / (2 * e), (d2 - m2) / (2 * e))
        speed = np.sqrt(inner(metric, x1, x2, tang, tang))
        v = mode.evaluate(x1, x2, s=s)
        tot += float(np.sum(np.abs(v) ** 2 * speed) * (b - a) / n)
    return float(np.sqrt(tot))


def _slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _max_scale(metric: Metric, domain: Domain) -> float:
    x0, x1, y0, y1 = domain.bbox
    g1, g2 = np.meshgrid(np.linspace(x0, x1, 33), np.linspace(y0, y1, 33), indexing="ij")
    g11, g12, g22 = metric.components(g1.ravel(), g2.ravel())
    lam = 0.5 * (g11 + g22) + np.sqrt(0.25 * (g11 - g22) ** 2 + g12 ** 2)
    return float(np.sqrt(np.max(lam)))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------
@dataclass
class VerificationReport:
    kind: str
    taus: np.ndarray
    lams: List[float]
    h: float
    residual: Optional[np.ndarray] = None
    residual_slope: float = float("nan")
    residual_lam: float = 0.0
    residual_variation: float = float("nan")
    masses: Dict[str, Dict[float, np.ndarray]] = field(default_factory=dict)
    targets: Dict[str, Dict[float, float]] = field(default_factory=dict)
    normalization: Dict[float, float] = field(default_factory=dict)
    analytic_normalization: float = float("nan")
    concentration_error: Dict[str, Dict[float, np.ndarray]] = field(default_factory=dict)
    analytic_concentration_error: Dict[str, Dict[float, np.ndarray]] = field(default_factory=dict)
    norms: Optional[np.ndarray] = None
    boundary: Optional[np.ndarray] = None
    boundary_ratio: Optional[np.ndarray] = None
    boundary_slope: float = float("nan")
    nodes: List[int] = field(default_factory=list)

    def monotone_from(self, tau_min: float = 128.0) -> bool:
        """Concentration errors decrease in ``tau`` for ``tau >= tau_min`` (every psi and lambda)."""
        sel = self.taus >= tau_min
        for d in self.concentration_error.values():
            for e in d.values():
                if np.any(np.diff(e[sel]) > 0):
                    return False
        return True

    def as_text(self) -> str:
        lines = [f"kind={self.kind}", f"h={self.h:.6g}", "taus=" + ",".join(f"{t:g}" for t in self.taus)]
        if self.residual is not None:
            lines.append("residual=" + ",".join(f"{r:.6e}" for r in self.residual))
            lines.append(f"residual_slope={self.residual_slope:.4f}")
            if np.isfinite(self.residual_variation):
                lines.append(f"residual_variation={self.residual_variation:.3e}")
        for lam, c in self.normalization.items():
            lines.append(f"normalization lambda={lam:g} empirical={c:.8g} analytic={self.analytic_normalization:.8g}")
        for name, d in self.concentration_error.items():
            for lam, e in d.items():
                lines.append(f"concentration psi={name} lambda={lam:g} target={self.targets[name][lam]:.8g} "
                             "errors=" + ",".join(f"{x:.3e}" for x in e))
                an = self.analytic_concentration_error.get(name, {}).get(lam)
                if an is not None:
                    lines.append(f"concentration_analytic psi={name} lambda={lam:g} "
                                 "errors=" + ",".join(f"{x:.3e}" for x in an))
        if self.boundary_ratio is not None:
            lines.append("boundary_ratio=" + ",".join(f"{x:.3e}" for x in self.boundary_ratio))
            lines.append(f"boundary_slope={self.boundary_slope:.4f}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Gaussian beams
# ----------------------------------------------------------------------------
def _beam_patches(beam: GaussianBeam, tau: float, h: float) -> List[Patch]:
    """Refined squares where two summands overlap with different phase gradients."""
    ray = beam.ray
    diam = beam.domain.diameter
    out = []

    def make(point, imh, sin_b, dxi):
        w = 1.0 / np.sqrt(tau * imh)
        rad = min(PATCH_WIDTHS * w / max(sin_b, 0.05), diam)
        wave = 2.0 * np.pi / (tau * max(dxi, 1e-12))
        level = max(1, int(np.ceil(h / (wave / 8.0))))
        out.append(Patch((float(point[0]), float(point[1])), float(rad), level))

    for j, (r, rd) in enumerate(zip(ray.reflections, beam.reflections)):
        sg = beam.segments[j]
        imh = float(sg.H(np.array([r.t]))[0].imag)
        a = rd.incidence
        make(r.point, imh, abs(np.sin(2 * a)), 2 * np.cos(a))
    bounds = ray.segment_bounds()
    for t1, t2 in classify_ray(ray, domain=beam.domain).self_intersections:
        i = int(np.clip(np.searchsorted(bounds, t1, side="right") - 1, 0, len(beam.segments) - 1))
        k = int(np.clip(np.searchsorted(bounds, t2, side="right") - 1, 0, len(beam.segments) - 1))
        si, sk = beam.segments[i], beam.segments[k]
        p, v1, _ = si.axis(np.array([t1]))
        _, v2, _ = sk.axis(np.array([t2]))
        p, v1, v2 = p[0], v1[0], v2[0]
        c = float(np.clip(inner(beam.metric, p[0], p[1], v1, v2), -1, 1))
        sin_b = np.sqrt(max(0.0, 1 - c * c))
        imh = min(float(si.H(np.array([t1]))[0].imag), float(sk.H(np.array([t2]))[0].imag))
        make(p, imh, sin_b, np.sqrt(2 - 2 * c))
    return out


def beam_resolution(beam: GaussianBeam, tau_max: float) -> float:
    """Largest admissible chart spacing ``(c tau)^{-1/2} / 4``, ``c`` the maximal ``Im H``."""
    return float((beam.max_im_H * tau_max) ** -0.5 / 4.0 / _max_scale(beam.metric, beam.domain))


def verify_quasimode(mode, taus: Sequence[float], lams: Sequence[float] = (0.0,),
                     psis: Optional[Dict[str, Callable]] = None, h: Optional[float] = None,
                     residual: bool = True, residual_lam: Optional[float] = None,
                     R: Optional[Sequence[Tuple[float, float]]] = None, boundary: bool = True,
                     boundary_refine: int = 4, residual_method: str = "fermi") -> VerificationReport:
    """Residual, concentration and boundary checks over a list of ``tau``.

    Parameters
    ----------
    mode : GaussianBeam or WkbMode
    taus : increasing frequencies ``tau``; ``s = tau + i lambda``.
    lams : damping values ``lambda`` for the concentration check.
    psis : named test functions; ``"one"`` (constant 1) is always included.
    h : chart spacing of the base lattice. Defaults to the resolution bound at
        the largest ``tau``; a coarser value raises :class:`ResolutionError`.
    R : boundary parameter intervals for the smallness check (default: the
        complement of E).
    """
    taus = np.asarray(sorted(float(t) for t in taus))
    if taus.size == 0 or taus[0] <= 0:
        raise ValidationError("taus must be positive")
    lams = [float(x) for x in lams]
    psis = dict(psis or {})
    psis.setdefault("one", _one)
    if isinstance(mode, WkbMode):
        return _verify_wkb(mode, taus, lams, psis, h, R, boundary_refine)
    if not isinstance(mode, GaussianBeam):
        raise ValidationError("mode must be a GaussianBeam or WkbMode")
    hmax = beam_resolution(mode, float(taus[-1]))
    if h is None:
        h = hmax
    elif h > hmax * (1 + 1e-12):
        raise ResolutionError(f"grid spacing {h:.4g} exceeds the beam resolution bound {hmax:.4g}")
    metric, domain = mode.metric, mode.domain
    all_lams = lams
    rlam = lams[0] if residual_lam is None else float(residual_lam)
    rep = VerificationReport("gaussian_beam", taus, lams, float(h), residual_lam=rlam)
    masses = {n: {l: np.zeros(len(taus)) for l in all_lams} for n in psis}
    res = np.zeros(len(taus))
    norms = np.zeros(len(taus))
    Rint = _complement(domain) if R is None else [tuple(map(float, r)) for r in R]
    bnd = np.zeros(len(taus))
    for k, tau in enumerate(taus):
        quad = domain_quadrature(metric, domain, h, boundary_refine, _beam_patches(mode, tau, h))
        rep.nodes.append(len(quad))
        rnum, rden = 0.0, 0.0
        for sl in quad.chunks():
            x1, x2, w = quad.x1[sl], quad.x2[sl], quad.w[sl]
            pvals = {n: f(x1, x2) for n, f in psis.items()}
            proj = mode.project(x1, x2)
            vr = None
            for l in all_lams:
                v = mode.evaluate(x1, x2, s=tau + 1j * l, proj=proj)
                a2 = np.abs(v) ** 2 * w
                for n in psis:
                    masses[n][l][k] += float(np.sum(a2 * pvals[n]))
                if l == rlam:
                    vr = v
            if vr is None:
                vr = mode.evaluate(x1, x2, s=tau + 1j * rlam, proj=proj)
            rden += float(np.sum(np.abs(vr) ** 2 * w))
            if residual:
                big = np.abs(vr) > 1e-13 * max(1.0, float(np.max(np.abs(vr), initial=0.0)))
                if np.any(big):
                    sub = [(t[big], y[big], ok[big]) for t, y, ok in proj]
                    f = mode.residual(x1[big], x2[big], s=tau + 1j * rlam, method=residual_method, proj=sub)
                    rnum += float(np.sum(np.abs(f) ** 2 * w[big]))
        norms[k] = np.sqrt(rden)
        if residual:
            res[k] = np.sqrt(rnum) / (abs(tau + 1j * rlam) ** 2 * norms[k])
        if boundary and Rint:
            du = min(2e-3, 0.25 / tau)
            bnd[k] = boundary_norm(mode, domain, metric, Rint, tau + 1j * rlam, du)
    # targets on the ray
    targets = {n: {l: float(np.real(ray_integral_attenuated(f, mode.ray, l, step=1e-3))) for l in all_lams}
               for n, f in psis.items()}
    # empirical constant: the psi = 1 ratio at the largest tau, for each lambda
    C = {l: float(masses["one"][l][-1] / targets["one"][l]) for l in lams}
    Ca = mode.analytic_mass()
    rep.masses = masses
    rep.targets = targets
    rep.normalization, rep.analytic_normalization = C, Ca
    rep.concentration_error = {n: {l: np.abs(masses[n][l] / C[l] - targets[n][l]) / abs(targets[n][l])
                                   for l in lams} for n in psis}
    rep.analytic_concentration_error = {n: {l: np.abs(masses[n][l] / Ca - targets[n][l]) / abs(targets[n][l])
                                            for l in lams} for n in psis}
    rep.norms = norms
    if residual:
        rep.residual = res
        rep.residual_slope = _slope(taus, res)
    if boundary and Rint:
        rep.boundary = bnd
        rep.boundary_ratio = bnd / norms
        rep.boundary_slope = _slope(taus, rep.boundary_ratio)
    return rep


# ----------------------------------------------------------------------------
# WKB modes
# ----------------------------------------------------------------------------
def ray_length_in_domain(metric: Metric, domain: Domain, omega, theta: float, step: float = 1e-3) -> float:
    """Length of the part of the geodesic from ``omega`` in direction ``theta`` lying inside the domain."""
    from ..raytrace import _frame_at
    from ..geometry import lower

    e1, e2 = _frame_at(metric, omega)
    v = np.cos(theta) * e1 + np.sin(theta) * e2
    xi = np.array([float(c) for c in lower(metric, omega[0], omega[1], v)])
    reach = 2.0 * domain.diameter + float(np.hypot(*(np.asarray(omega) - 0.5 * np.array(
        [domain.bbox[0] + domain.bbox[1], domain.bbox[2] + domain.bbox[3]]))))
    seg = integrate_cogeodesic(metric, omega, xi, reach, step)
    rho = domain.rho(seg.x[:, 0], seg.x[:, 1])
    tot = 0.0
    for k in range(len(rho) - 1):
        a, b = rho[k], rho[k + 1]
        dt = seg.t[k + 1] - seg.t[k]
        if a > 0 and b > 0:
            tot += dt
        elif a > 0 or b > 0:
            tot += dt * max(a, b) / abs(b - a)
    return float(tot)


def _verify_wkb(mode: WkbMode, taus, lams, psis, h, R, boundary_refine) -> VerificationReport:
    metric, domain = mode.metric, mode.domain
    h = 1e-2 if h is None else float(h)
    quad = domain_quadrature(metric, domain, h, boundary_refine)
    lam0 = lams[0]
    rep = VerificationReport("wkb", taus, lams, h, residual_lam=lam0)
    rep.nodes = [len(quad)] * len(taus)
    res = np.zeros(len(taus))
    masses = {n: {l: np.zeros(len(taus)) for l in lams} for n in psis}
    amp = np.concatenate([mode.amplitude(quad.x1[sl], quad.x2[sl]) for sl in quad.chunks()])
    live = np.abs(amp) > 0
    lapa = np.zeros(len(quad), dtype=complex)
    lapa[live] = mode.laplacian_amplitude(quad.x1[live], quad.x2[live])
    r, _, _ = mode.polar(quad.x1, quad.x2)
    norms = np.zeros(len(taus))
    for k, tau in enumerate(taus):
        s = tau + 1j * lam0
        f = -np.exp(1j * s * r) * lapa
        res[k] = np.sqrt(np.sum(np.abs(f) ** 2 * quad.w))
        for l in lams:
            v = np.exp(1j * (tau + 1j * l) * r) * amp
            for n, p in psis.items():
                masses[n][l][k] = float(np.sum(np.abs(v) ** 2 * p(quad.x1, quad.x2) * quad.w))
        norms[k] = np.sqrt(np.sum(np.abs(np.exp(1j * s * r) * amp) ** 2 * quad.w))
    rep.residual = res
    rep.residual_slope = _slope(taus, res)
    rep.residual_variation = float((res.max() - res.min()) / res.mean())
    rep.masses = masses
    rep.norms = norms
    theta0 = getattr(mode.b, "theta0", None)
    if theta0 is not None:
        length = ray_length_in_domain(metric, domain, mode.omega, float(theta0))
        rep.targets = {"one": {0.0: length}}
        if 0.0 in lams:
            rep.concentration_error = {"one": {0.0: np.abs(masses["one"][0.0] - length) / length}}
    Rint = _complement(domain) if R is None else [tuple(map(float, x)) for x in R]
    if Rint:
        bnd = np.array([boundary_norm(mode, domain, metric, Rint, t + 1j * lam0, min(2e-3, 0.25 / t))
                        for t in taus])
        rep.boundary = bnd
        rep.boundary_ratio = bnd / norms
    return rep
