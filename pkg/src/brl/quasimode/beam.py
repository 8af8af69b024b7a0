"""Gaussian beams along (broken) geodesics in two dimensions.

Each segment carries a parallel frame ``(E1, E2)``, the phase
``Theta = t + H(t) y^2 / 2`` in Fermi coordinates ``(t, y)`` and the
order-zero amplitude ``a00(t)``. Segments of a broken ray are glued by
matching the boundary restriction of the phase to second order and summed
with alternating signs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from ..errors import (OutOfChartError, ReflectionMatchingError, RiccatiBreakdownError, ValidationError,
                      ZeroAmplitudeError)
from ..geometry import Domain, Metric, inner, lower, parallel_transport, rotate_quarter
from ..raytrace import BrokenRay, GeodesicSegment, Reflection, integrate_cogeodesic, shoot
from .riccati import RiccatiSolution, riccati_solve

JET_H = 1e-4
BEAM_STEP = 2e-3
SHOOT_STEP = 1e-2


def cutoff(z):
    """Smooth even bump: 1 for ``|z| <= 1/4``, 0 for ``|z| >= 1/2``."""
    s = np.clip((np.abs(z) - 0.25) * 4.0, 0.0, 1.0)

    def f(x):
        return np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)

    a, b = f(1.0 - s), f(s)
    return a / (a + b)


# ----------------------------------------------------------------------------
# frames and Fermi data
# ----------------------------------------------------------------------------
@dataclass
class FermiFrame:
    t: np.ndarray
    x: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    orthonormality: float


def _orthonormality(metric, x, e1, e2):
    x1, x2 = x[:, 0], x[:, 1]
    a = inner(metric, x1, x2, e1.T, e1.T) - 1.0
    b = inner(metric, x1, x2, e2.T, e2.T) - 1.0
    c = inner(metric, x1, x2, e1.T, e2.T)
    return float(np.max(np.abs(np.concatenate([a, b, c]))))


def fermi_frame(metric: Metric, segment: GeodesicSegment, e2_0=None) -> FermiFrame:
    """Parallel frame along ``segment``; ``E2`` starts at the +90 degree rotation of ``E1``."""
    x, v = segment.x, segment.v
    if e2_0 is None:
        e2_0 = np.array([float(c) for c in rotate_quarter(metric, x[0, 0], x[0, 1], v[0])])
    n0 = np.sqrt(float(inner(metric, x[0, 0], x[0, 1], e2_0, e2_0)))
    e2_0 = np.asarray(e2_0, dtype=float) / n0
    if abs(float(inner(metric, x[0, 0], x[0, 1], e2_0, v[0]))) > 1e-10:
        raise ValidationError("initial transversal vector must be g-orthogonal to the velocity")
    e2 = parallel_transport(metric, segment.t, x, v, e2_0)
    return FermiFrame(segment.t.copy(), x.copy(), v.copy(), e2, _orthonormality(metric, x, v, e2))


@dataclass
class FermiJet:
    """Inverse Fermi metric ``g^{tt}`` and its transversal derivatives on the axis.

    By the Gauss lemma ``g^{ty} = 0`` and ``g^{yy} = 1`` identically, so only
    ``g^{tt} = J^{-2}`` carries information; ``J`` is the transversal Jacobi
    factor (``J = 1``, ``J_y = 0`` on the axis).
    """

    t: np.ndarray
    gtt_y: np.ndarray
    gtt_yy: np.ndarray
    h: float


def fermi_jet(metric: Metric, frame: FermiFrame, h: float = JET_H) -> FermiJet:
    """Central differences in ``y`` of ``g^{tt}(t, y)`` at ``y = +-h``."""
    x1, x2 = frame.x[:, 0], frame.x[:, 1]
    e1, e2 = frame.e2[:, 0], frame.e2[:, 1]
    try:
        *_, Jp, _ = shoot(metric, x1, x2, e1, e2, np.full(len(x1), h), 2, b0=1.0, db0=0.0)
        *_, Jm, _ = shoot(metric, x1, x2, e1, e2, np.full(len(x1), -h), 2, b0=1.0, db0=0.0)
    except (FloatingPointError, ValueError) as exc:  # pragma: no cover - defensive
        raise OutOfChartError(f"Fermi jet extraction failed: {exc}") from exc
    gp, gm = 1.0 / Jp**2, 1.0 / Jm**2
    return FermiJet(frame.t.copy(), (gp - gm) / (2 * h), (gp - 2.0 + gm) / (h * h), h)


# ----------------------------------------------------------------------------
# coefficients
# ----------------------------------------------------------------------------
@dataclass
class PhaseJet:
    """Order-two phase data along one segment.

    ``xi`` holds the transversal covector components of ``Theta_1`` (zero in
    Fermi coordinates); ``B``, ``C``, ``F`` are the Riccati coefficients and
    ``eta0 = B + C H`` is the amplitude transport rate.
    """

    t: np.ndarray
    xi: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    H: np.ndarray
    Hdot: np.ndarray
    eta0: np.ndarray
    det_identity_deviation: float


@dataclass
class BeamAmplitude:
    t: np.ndarray
    a: np.ndarray
    adot: np.ndarray
    constancy_deviation: float


def _riccati_both_ways(B, C, F, H0, t_init, t_lo, t_hi, step):
    parts = []
    if t_hi > t_init:
        parts.append(riccati_solve(B, C, F, H0, (t_init, t_hi), step))
    if t_lo < t_init:
        parts.append(riccati_solve(B, C, F, H0, (t_init, t_lo), step))
    if not parts:
        raise ValidationError("empty time span")
    if len(parts) == 1:
        s = parts[0]
        if s.t[-1] < s.t[0]:
            s = RiccatiSolution(*(a[::-1] for a in (s.t, s.H, s.Hdot, s.growth, s.eta)))
        return s, s.det_identity_deviation()
    f, b = parts
    dev = max(f.det_identity_deviation(), b.det_identity_deviation())
    cat = [np.concatenate([getattr(b, k)[::-1], getattr(f, k)[1:]]) for k in ("t", "H", "Hdot", "growth", "eta")]
    return RiccatiSolution(*cat), dev


def beam_coefficients(metric: Metric, segment: GeodesicSegment, frame: Optional[FermiFrame] = None,
                      H0: complex = 1j, c0: complex = 1.0, t_init: Optional[float] = None,
                      step: Optional[float] = None):
    """Riccati coefficients, phase Hessian and amplitude along ``segment``.

    ``H0`` and ``c0`` are prescribed at ``t_init`` (default: segment start);
    integration runs both ways from there.

    Returns
    -------
    (PhaseJet, BeamAmplitude)
    """
    if complex(c0) == 0:
        raise ZeroAmplitudeError("initial amplitude c0 must be nonzero")
    if not complex(H0).imag > 0:
        raise ValidationError("Im H0 must be positive")
    frame = frame if frame is not None else fermi_frame(metric, segment)
    jet = fermi_jet(metric, frame)
    t = frame.t
    n = len(t)
    xi = np.zeros(n)
    # B = d_y g^{yk} xi_k + g^{ty} xi_y' and C = g^{yy}; both trivial by the Gauss lemma
    B = np.zeros(n)
    C = np.ones(n)
    # order-two bracket of the eikonal expansion with xi = (1, 0)
    F = -0.5 * jet.gtt_yy
    Fs = CubicSpline(t, F)
    t_init = float(t[0]) if t_init is None else float(t_init)
    step = float(np.median(np.diff(t))) if step is None else float(step)
    sol, dev = _riccati_both_ways(0.0, 1.0, Fs, H0, t_init, float(t[0]), float(t[-1]), step)
    # log|g| is constant (zero) on the axis of Fermi coordinates
    eta0 = sol.H.copy()
    a = complex(c0) * np.exp(-0.5 * sol.eta)
    adot = -0.5 * eta0 * a
    ratio = np.abs(a) ** 2 / np.sqrt(sol.H.imag)
    cons = float(np.max(np.abs(ratio / ratio[np.argmin(np.abs(sol.t - t_init))] - 1.0)))
    pj = PhaseJet(sol.t, np.zeros(len(sol.t)), np.zeros(len(sol.t)), np.ones(len(sol.t)), Fs(sol.t),
                  sol.H, sol.Hdot, eta0, dev)
    return pj, BeamAmplitude(sol.t, a, adot, cons)


# ----------------------------------------------------------------------------
# reflection
# ----------------------------------------------------------------------------
@dataclass
class ReflectedData:
    H: complex
    a: complex
    xi: np.ndarray
    imH_boundary: float
    incidence: float  # angle from the normal


def boundary_curvature(metric: Metric, domain: Domain, u: float, nu, h: float = 1e-3):
    """Unit tangent ``c'`` and normal curvature ``<nabla_c' c', nu>`` of the boundary at ``u``."""
    k = np.array([-2, -1, 1, 2]) * h
    pts = np.array([np.asarray(domain.boundary_point(u + d), dtype=float) for d in k])
    c0 = np.asarray(domain.boundary_point(u), dtype=float)
    d1 = (pts[0] - 8 * pts[1] + 8 * pts[2] - pts[3]) / (12 * h)
    d2 = (-pts[0] + 16 * pts[1] - 30 * c0 + 16 * pts[2] - pts[3]) / (12 * h * h)
    G = metric.christoffel(float(c0[0]), float(c0[1]))
    acc = d2 + np.einsum("ijk,j,k->i", G, d1, d1)
    s2 = float(inner(metric, c0[0], c0[1], d1, d1))
    return d1 / np.sqrt(s2), float(inner(metric, c0[0], c0[1], acc, nu)) / s2


def reflect_beam(metric: Metric, domain: Domain, reflection: Reflection, H_minus: complex,
                 a_minus: complex) -> ReflectedData:
    """Outgoing phase Hessian and amplitude at a reflection.

    The boundary restrictions of incoming and outgoing phases agree to second
    order in boundary arclength: with ``c`` the unit-speed boundary curve,
    ``H+ <c', E2+>^2 = H- <c', E2->^2 + <gamma'- - gamma'+, nabla_c' c'>``.
    """
    p = np.asarray(reflection.point, dtype=float)
    x1, x2 = p
    vin = np.asarray(reflection.incoming, dtype=float)
    vout = np.asarray(reflection.outgoing, dtype=float)
    nu = np.asarray(reflection.nu, dtype=float)
    cdot, kappa = boundary_curvature(metric, domain, reflection.u, nu)
    e2m = np.array([float(c) for c in rotate_quarter(metric, x1, x2, vin)])
    e2p = np.array([float(c) for c in rotate_quarter(metric, x1, x2, vout)])
    cm = float(inner(metric, x1, x2, cdot, e2m))
    cp = float(inner(metric, x1, x2, cdot, e2p))
    jump = float(inner(metric, x1, x2, vin - vout, nu)) * kappa
    incidence = float(np.arccos(np.clip(abs(float(inner(metric, x1, x2, vin, nu))), 0.0, 1.0)))
    if cp * cp < 1e-14:
        raise ReflectionMatchingError(f"tangential reflection (incidence {np.degrees(incidence):.3f} deg)")
    Hp = (complex(H_minus) * cm * cm + jump) / (cp * cp)
    imb = complex(H_minus).imag * cm * cm
    if not (imb > 0 and Hp.imag > 0):
        raise ReflectionMatchingError(
            f"Im H lost positivity at reflection (incidence {np.degrees(incidence):.3f} deg)")
    xi = np.array([float(c) for c in lower(metric, x1, x2, vout)])
    return ReflectedData(Hp, complex(a_minus), xi, imb, incidence)


# ----------------------------------------------------------------------------
# beams
# ----------------------------------------------------------------------------
def _hermite(t, f, fd, tq):
    k = np.clip(np.searchsorted(t, tq, side="right") - 1, 0, len(t) - 2)
    h = t[k + 1] - t[k]
    s = (tq - t[k]) / h
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * f[k] + (s3 - 2 * s2 + s) * h * fd[k]
            + (-2 * s3 + 3 * s2) * f[k + 1] + (s3 - s2) * h * fd[k + 1])


@dataclass
class BeamSegment:
    """One summand ``sign * tau^{1/4} e^{is Theta} a00 chi(y / delta')`` of a beam.

    Geometry is sampled on the geodesic extended by ``ext`` past both ends
    of the ray segment so that points near the boundary project properly.
    """

    index: int
    sign: float
    t_lo: float
    t_hi: float
    geo: GeodesicSegment
    frame: FermiFrame
    jet: PhaseJet
    amp: BeamAmplitude
    delta: float
    metric: Metric = field(repr=False)
    flat: bool = False

    def __post_init__(self):
        self._e2 = CubicSpline(self.frame.t, self.frame.e2, axis=0)
        self._F = CubicSpline(self.jet.t, self.jet.F)
        self._tree = cKDTree(self.geo.x)

    # -- axis data
    def axis(self, t):
        t = np.asarray(t, dtype=float)
        x = np.stack([_hermite(self.geo.t, self.geo.x[:, i], self.geo.v[:, i], t) for i in range(2)], -1)
        v = np.stack([CubicSpline(self.geo.t, self.geo.v[:, i])(t) for i in range(2)], -1)
        return x, v, self._e2(t)

    def H(self, t):
        return _hermite(self.jet.t, self.jet.H, self.jet.Hdot, t)

    def a(self, t):
        return _hermite(self.amp.t, self.amp.a, self.amp.adot, t)

    def F(self, t, nu: int = 0):
        return self._F(t, nu)

    @property
    def t_range(self):
        return float(self.geo.t[0]), float(self.geo.t[-1])

    # -- Fermi coordinates
    def fermi_point(self, t, y):
        """Chart point ``exp_{gamma(t)}(y E2(t))``, transported ``E1``, velocity, ``J`` and ``J_y``."""
        x, _, e2 = self.axis(t)
        y = np.asarray(y, dtype=float)
        n = max(4, int(np.ceil(np.max(np.abs(y), initial=0.0) / SHOOT_STEP)))
        p1, p2, v1, v2, J, Jy = shoot(self.metric, x[:, 0], x[:, 1], e2[:, 0], e2[:, 1], y, n, b0=1.0, db0=0.0)
        r1, r2 = rotate_quarter(self.metric, p1, p2, (v1, v2))
        return np.stack([p1, p2], -1), np.stack([-r1, -r2], -1), np.stack([v1, v2], -1), J, Jy

    def project(self, x1, x2, guess=None, tol=1e-12, max_iter=30):
        """Fermi coordinates ``(t, y)`` of chart points and a validity mask.

        Points whose projection fails to converge, lands outside the sampled
        range, or has ``|y| >= delta'/2`` are masked out (the cutoff vanishes there).
        """
        x1 = np.asarray(x1, dtype=float).ravel()
        x2 = np.asarray(x2, dtype=float).ravel()
        lo, hi = self.t_range
        if self.flat:
            x0, e1, e2 = self.geo.x[0], self.frame.e1[0], self.frame.e2[0]
            d1, d2 = x1 - x0[0], x2 - x0[1]
            t = lo + d1 * e1[0] + d2 * e1[1]
            y = d1 * e2[0] + d2 * e2[1]
            ok = (t >= lo) & (t <= hi) & (np.abs(y) < 0.5 * self.delta)
            return t, y, ok
        if guess is None:
            _, k = self._tree.query(np.column_stack([x1, x2]))
            t = self.geo.t[k].copy()
            xa, _, e2 = self.axis(t)
            d = np.stack([x1 - xa[:, 0], x2 - xa[:, 1]])
            y = inner(self.metric, xa[:, 0], xa[:, 1], d, e2.T)
        else:
            t, y = (np.array(g, dtype=float).ravel() for g in guess)
        ok = np.abs(y) < 0.75 * self.delta
        act = np.flatnonzero(ok)
        conv = np.zeros(len(x1), dtype=bool)
        for _ in range(max_iter):
            if act.size == 0:
                break
            tt, yy = np.clip(t[act], lo, hi), y[act]
            try:
                P, E1, V, J, _ = self.fermi_point(tt, yy)
            except (OutOfChartError, FloatingPointError):
                ok[act] = False
                break
            r1, r2 = x1[act] - P[:, 0], x2[act] - P[:, 1]
            a11, a21 = J * E1[:, 0], J * E1[:, 1]
            a12, a22 = V[:, 0], V[:, 1]
            det = a11 * a22 - a12 * a21
            dt = (a22 * r1 - a12 * r2) / det
            dy = (-a21 * r1 + a11 * r2) / det
            t[act] = tt + dt
            y[act] = yy + dy
            done = (np.abs(dt) < tol) & (np.abs(dy) < tol)
            bad = ~np.isfinite(dt) | (np.abs(y[act]) > self.delta)
            conv[act[done]] = True
            ok[act[bad]] = False
            act = act[~done & ~bad]
        ok &= conv & (t >= lo) & (t <= hi) & (np.abs(y) < 0.5 * self.delta)
        return t, y, ok

    def phase_amplitude(self, x1, x2, proj=None):
        """``Theta`` and ``a00 chi`` at chart points (zero where masked)."""
        t, y, ok = self.project(x1, x2) if proj is None else proj
        th = np.zeros(len(t), dtype=complex)
        am = np.zeros(len(t), dtype=complex)
        th[ok] = t[ok] + 0.5 * self.H(t[ok]) * y[ok] ** 2
        am[ok] = self.a(t[ok]) * cutoff(y[ok] / self.delta)
        return th, am, ok

    def eikonal_residual(self, t, y):
        """``|g^{jk} d_j Theta d_k Theta - 1|`` at Fermi point ``(t, y)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float)) + 0 * t
        *_, J, _ = self.fermi_point(t, y)
        H, Hd = self.H(t), _hermite(self.jet.t, self.jet.Hdot, np.gradient(self.jet.Hdot, self.jet.t), t)
        th_t = 1.0 + 0.5 * Hd * y * y
        th_y = H * y
        return np.abs(th_t**2 / J**2 + th_y**2 - 1.0)


@dataclass
class GaussianBeam:
    """Alternating sum of Gaussian beams along the segments of a broken ray."""

    metric: Metric
    domain: Domain
    ray: BrokenRay
    s: complex
    H0: complex
    c0: complex
    delta: float
    segments: List[BeamSegment]
    reflections: List[ReflectedData]

    @property
    def tau(self) -> float:
        return float(np.real(self.s))

    @property
    def lam(self) -> float:
        return float(np.imag(self.s))

    @property
    def min_im_H(self) -> float:
        return float(min(np.min(sg.H(np.linspace(sg.t_lo, sg.t_hi, 201)).imag) for sg in self.segments))

    @property
    def max_im_H(self) -> float:
        return float(max(np.max(sg.H(np.linspace(sg.t_lo, sg.t_hi, 201)).imag) for sg in self.segments))

    @property
    def det_identity_deviation(self) -> float:
        return max(sg.jet.det_identity_deviation for sg in self.segments)

    @property
    def constancy_deviation(self) -> float:
        return max(sg.amp.constancy_deviation for sg in self.segments)

    def analytic_mass(self) -> float:
        """``sqrt(pi) |c0|^2 / sqrt(Im H0)``: limit of ``int |v|^2`` per unit length of ray."""
        return float(np.sqrt(np.pi) * abs(self.c0) ** 2 / np.sqrt(complex(self.H0).imag))

    def _s(self, s):
        return complex(self.s if s is None else s)

    def project(self, x1, x2):
        """Per-segment Fermi projections ``(t, y, ok)``; reusable across ``s``."""
        x1 = np.asarray(x1, dtype=float).ravel()
        x2 = np.asarray(x2, dtype=float).ravel()
        return [sg.project(x1, x2) for sg in self.segments]

    def evaluate(self, x1, x2, s=None, segments: Optional[Sequence[int]] = None, proj=None):
        """Beam values at chart points (same shape as ``x1``)."""
        s = self._s(s)
        shape = np.shape(x1)
        x1 = np.asarray(x1, dtype=float).ravel()
        x2 = np.asarray(x2, dtype=float).ravel()
        proj = self.project(x1, x2) if proj is None else proj
        out = np.zeros(len(x1), dtype=complex)
        scale = s.real ** 0.25
        for sg, pr in zip(self.segments, proj):
            if segments is not None and sg.index not in segments:
                continue
            th, am, ok = sg.phase_amplitude(x1, x2, proj=pr)
            out[ok] += sg.sign * scale * np.exp(1j * s * th[ok]) * am[ok]
        return out.reshape(shape)

    def on_axis(self, t, s=None):
        """Values on the ray at global times ``t`` (segment of each time)."""
        s = self._s(s)
        t = np.asarray(t, dtype=float)
        out = np.zeros(len(t), dtype=complex)
        for sg in self.segments:
            m = (t >= sg.t_lo) & (t <= sg.t_hi)
            out[m] = sg.sign * s.real ** 0.25 * np.exp(1j * s * t[m]) * sg.a(t[m])
        return out

    def residual(self, x1, x2, s=None, method: str = "fermi", h: float = 1e-3, proj=None):
        """``(-Delta - s^2) v`` at chart points.

        ``method="fermi"`` writes the Laplacian in Fermi coordinates
        (``g = J^2 dt^2 + dy^2``) with analytic derivatives of phase and
        amplitude; ``method="chart"`` differentiates phase and amplitude by
        fourth-order chart differences with step ``h``. Both treat the
        oscillatory factor exactly by conjugation.
        """
        s = self._s(s)
        x1 = np.asarray(x1, dtype=float).ravel()
        x2 = np.asarray(x2, dtype=float).ravel()
        out = np.zeros(len(x1), dtype=complex)
        if method == "fermi":
            proj = self.project(x1, x2) if proj is None else proj
            for sg, pr in zip(self.segments, proj):
                out += sg.sign * s.real ** 0.25 * _fermi_residual(sg, pr, s)
        elif method == "chart":
            for sg in self.segments:
                out += sg.sign * s.real ** 0.25 * _conjugated_residual(self.metric, sg, x1, x2, s, h)
        else:
            raise ValidationError(f"unknown residual method {method!r}")
        return out


def _fermi_residual(sg: BeamSegment, proj, s, et: float = 1e-4):
    t, y, ok = proj
    out = np.zeros(len(t), dtype=complex)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out
    t, y = t[idx], y[idx]
    if sg.flat:
        J, Jy, Jt = 1.0, 0.0, 0.0
    else:
        *_, J, Jy = sg.fermi_point(t, y)
        *_, Jp, _ = sg.fermi_point(t + et, y)
        *_, Jm, _ = sg.fermi_point(t - et, y)
        Jt = (Jp - Jm) / (2 * et)
    H = sg.H(t)
    F = sg.F(t)
    Hd = F - H * H
    Hdd = sg.F(t, 1) - 2.0 * H * Hd
    A = sg.a(t)
    Ad = -0.5 * H * A
    Add = -0.5 * (Hd * A + H * Ad)
    z = y / sg.delta
    e = 1e-4
    c0 = cutoff(z)
    c1 = (cutoff(z + e) - cutoff(z - e)) / (2 * e * sg.delta)
    c2 = (cutoff(z + 10 * e) - 2 * c0 + cutoff(z - 10 * e)) / (100 * e * e * sg.delta ** 2)
    T0 = t + 0.5 * H * y * y
    Tt, Ty = 1.0 + 0.5 * Hd * y * y, H * y
    Ttt, Tyy = 0.5 * Hdd * y * y, H
    a0 = A * c0
    at, ay = Ad * c0, A * c1
    att, ayy = Add * c0, A * c2

    def lap(ut, uy, utt, uyy):
        return utt / J ** 2 - Jt / J ** 3 * ut + uyy + Jy / J * uy

    grad2 = Tt * Tt / J ** 2 + Ty * Ty
    cross = Tt * at / J ** 2 + Ty * ay
    val = (s * s * (grad2 - 1.0) * a0 - 1j * s * (2.0 * cross + lap(Tt, Ty, Ttt, Tyy) * a0)
           - lap(at, ay, att, ayy))
    out[idx] = np.exp(1j * s * T0) * val
    return out


# fourth-order stencils: offsets and weights for d1, d11, d2, d22
_AX = np.array([-2, -1, 1, 2])
_W1 = np.array([1, -8, 8, -1]) / 12.0
_W2 = np.array([-1, 16, 16, -1]) / 12.0
_DIAG = np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)])


def _conjugated_residual(metric, sg: BeamSegment, x1, x2, s, h):
    t, y, ok = sg.project(x1, x2)
    out = np.zeros(len(x1), dtype=complex)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out
    px, py = x1[idx], x2[idx]
    offs = [(0, 0)] + [(k, 0) for k in _AX] + [(0, k) for k in _AX] + [tuple(d) for d in _DIAG] \
        + [tuple(2 * d) for d in _DIAG]
    n = len(idx)
    X1 = np.concatenate([px + h * o[0] for o in offs])
    X2 = np.concatenate([py + h * o[1] for o in offs])
    guess = None
    if not sg.flat:
        guess = (np.tile(t[idx], len(offs)), np.tile(y[idx], len(offs)))
    proj = sg.project(X1, X2, guess=guess)
    th, am, _ = sg.phase_amplitude(X1, X2, proj=proj)
    th = th.reshape(len(offs), n)
    am = am.reshape(len(offs), n)
    c0 = 0

    def derivs(f):
        f0 = f[c0]
        fx = np.tensordot(_W1, f[1:5], 1) / h
        fxx = (np.tensordot(_W2, f[1:5], 1) - 2.5 * f0) / (h * h)
        fy = np.tensordot(_W1, f[5:9], 1) / h
        fyy = (np.tensordot(_W2, f[5:9], 1) - 2.5 * f0) / (h * h)
        m1 = (f[9] - f[10] - f[11] + f[12]) / (4 * h * h)
        m2 = (f[13] - f[14] - f[15] + f[16]) / (16 * h * h)
        fxy = (4 * m1 - m2) / 3.0
        return f0, (fx, fy), (fxx, fxy, fyy)

    T0, dT, ddT = derivs(th)
    A0, dA, ddA = derivs(am)
    gi11, gi12, gi22, _ = metric.inverse_components(px, py)
    G = metric.christoffel(px, py)
    # contracted Christoffel symbols g^{ij} Gamma^k_ij
    gam = [gi11 * G[..., k, 0, 0] + 2 * gi12 * G[..., k, 0, 1] + gi22 * G[..., k, 1, 1] for k in range(2)]

    def lap(d, dd):
        return gi11 * dd[0] + 2 * gi12 * dd[1] + gi22 * dd[2] - gam[0] * d[0] - gam[1] * d[1]

    def ip(a, b):
        return gi11 * a[0] * b[0] + gi12 * (a[0] * b[1] + a[1] * b[0]) + gi22 * a[1] * b[1]

    val = (s * s * (ip(dT, dT) - 1.0) * A0
           - 1j * s * (2.0 * ip(dT, dA) + lap(dT, ddT) * A0)
           - lap(dA, ddA))
    out[idx] = np.exp(1j * s * T0) * val
    return out


def default_delta(metric: Metric, domain: Domain) -> float:
    """Cutoff width: four domain diameters, or half the focal distance if curvature is positive."""
    x0, x1, y0, y1 = domain.bbox
    g1, g2 = np.meshgrid(np.linspace(x0, x1, 41), np.linspace(y0, y1, 41), indexing="ij")
    K = np.asarray(metric.gaussian_curvature(g1.ravel(), g2.ravel()), dtype=float)
    kmax = float(np.nanmax(K)) if K.size else 0.0
    d = 4.0 * domain.diameter
    if kmax > 1e-12:
        d = min(d, 0.5 * np.pi / (2.0 * np.sqrt(kmax)))
    return d


def _extended(metric, seg: GeodesicSegment, ext: float, step: float) -> GeodesicSegment:
    """The geodesic of ``seg`` sampled on ``[T_a - ext, T_b + ext]`` with uniform ``step``."""
    ta = float(seg.t[0])
    x0, xi0 = seg.x[0], seg.xi[0]
    e = ext
    while True:
        try:
            fw = integrate_cogeodesic(metric, x0, xi0, seg.length + e, step, t0=ta)
            bw = integrate_cogeodesic(metric, x0, xi0, -e, step, t0=ta) if e > 0 else None
            break
        except OutOfChartError:
            if e < 1e-3:
                raise
            e *= 0.5
    if bw is None:
        return fw
    cat = [np.concatenate([getattr(bw, k)[::-1], getattr(fw, k)[1:]]) for k in ("t", "x", "xi", "v")]
    return GeodesicSegment(*cat)


def build_quasimode(metric: Metric, domain: Domain, ray: BrokenRay, s: complex = 64.0, H0: complex = 1j,
                    c0: complex = 1.0, delta_prime: Optional[float] = None, step: float = BEAM_STEP,
                    extension: Optional[float] = None) -> GaussianBeam:
    """Gaussian beam quasimode along ``ray``.

    ``H0`` and ``c0`` are imposed at the entry point. Each segment's data are
    continued across reflections by :func:`reflect_beam`; the global ray time
    is the phase on the axis, so phases agree at reflection points.
    """
    s = complex(s)
    if not s.real > 0:
        raise ValidationError("tau = Re s must be positive")
    if not complex(H0).imag > 0:
        raise ValidationError("Im H0 must be positive")
    if complex(c0) == 0:
        raise ZeroAmplitudeError("initial amplitude c0 must be nonzero")
    if not ray.nontangential_flag:
        raise ValidationError("beam construction needs a nontangential ray")
    delta = default_delta(metric, domain) if delta_prime is None else float(delta_prime)
    if not delta > 0:
        raise ValidationError("delta' must be positive")
    ext = domain.diameter if extension is None else float(extension)
    flat = bool(getattr(metric, "flat", False))
    segs, refl = [], []
    H, a = complex(H0), complex(c0)
    for j, seg in enumerate(ray.segments):
        if j > 0:
            r = reflect_beam(metric, domain, ray.reflections[j - 1], H, a)
            refl.append(r)
            H, a = r.H, r.a
        e = ext
        while True:
            geo = _extended(metric, seg, e, step)
            frame = fermi_frame(metric, geo)
            try:
                jet, amp = beam_coefficients(metric, geo, frame, H, a, t_init=float(seg.t[0]), step=step)
                break
            except RiccatiBreakdownError:
                # focusing outside the domain: shorten the extension, never the segment
                if e < 1e-3:
                    raise
                e = 0.5 * e if e > 2e-3 else 0.0
        sg = BeamSegment(j, (-1.0) ** j, float(seg.t[0]), float(seg.t[-1]), geo, frame, jet, amp, delta,
                         metric, flat)
        segs.append(sg)
        H, a = complex(sg.H(np.array([sg.t_hi]))[0]), complex(sg.a(np.array([sg.t_hi]))[0])
    return GaussianBeam(metric, domain, ray, s, complex(H0), complex(c0), delta, segs, refl)
