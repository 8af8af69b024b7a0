"""Discrete ray-transform operators, damped CGLS, visible sets, slice-wise
cylinder reconstruction and extreme singular values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import ConvexHull

from .errors import (
    ConvergenceError,
    CoverageError,
    EmptyMaskError,
    InputError,
    NoDataError,
    SymmetryError,
    ValidationError,
)
from .geometry import Domain, Metric, ScalarField, chart_to_sphere
from .transform import CylinderPotential, RayFamily, hermite_eval


# ----------------------------------------------------------------------------
# operator assembly
# ----------------------------------------------------------------------------
@dataclass
class DiscreteOperator:
    """Row-sparse matrix: rows are rays, columns are lattice pixels (``values.ravel()`` order)."""

    matrix: sp.csr_matrix
    grid: ScalarField
    lam: float

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, f):
        f = f.values if isinstance(f, ScalarField) else np.asarray(f)
        return self.matrix @ f.ravel()

    def rmatvec(self, g):
        return self.matrix.T @ g

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def touched_columns(self):
        return np.nonzero(np.asarray(self.matrix.sum(axis=0)).ravel() > 0)[0]


@dataclass
class _PixelPlan:
    rows: np.ndarray
    cols: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    shape: tuple


def _pixel_plan(grid: ScalarField, rays, step: Optional[float] = None, basis: str = "pixel") -> _PixelPlan:
    h = min(grid.hx, grid.hy)
    st = h / 2 if step is None else min(step, h / 2)
    rows, pts, ts, dts = [], [], [], []
    for i, ray in enumerate(rays):
        for seg in ray.segments:
            n = max(1, int(np.ceil(seg.length / st - 1e-12)))
            d = seg.length / n
            tm = seg.t[0] + d * (np.arange(n) + 0.5)  # midpoint rule, exact lengths
            pts.append(hermite_eval(seg.t, seg.x, seg.v, tm))
            ts.append(tm)
            dts.append(np.full(n, d))
            rows.append(np.full(n, i))
    pts = np.concatenate(pts)
    rows = np.concatenate(rows)
    t = np.concatenate(ts)
    dt = np.concatenate(dts)
    a = (pts[:, 0] - grid.ox) / grid.hx
    b = (pts[:, 1] - grid.oy) / grid.hy
    shape = (len(rays), grid.nx * grid.ny)
    if basis == "pixel":
        ii = np.rint(a).astype(int)
        jj = np.rint(b).astype(int)
        bad = (ii < 0) | (ii >= grid.nx) | (jj < 0) | (jj >= grid.ny)
        if np.any(bad):
            raise CoverageError(f"ray {int(rows[np.argmax(bad)])} leaves the pixel grid")
        return _PixelPlan(rows, ii * grid.ny + jj, t, dt, shape)
    if basis != "bilinear":
        raise ValidationError(f"unknown basis {basis!r}")
    bad = (a < 0) | (a > grid.nx - 1) | (b < 0) | (b > grid.ny - 1)
    if np.any(bad):
        raise CoverageError(f"ray {int(rows[np.argmax(bad)])} leaves the lattice")
    i0 = np.clip(np.floor(a).astype(int), 0, grid.nx - 2)
    j0 = np.clip(np.floor(b).astype(int), 0, grid.ny - 2)
    fa, fb = a - i0, b - j0
    R, C, W = [], [], []
    for di, dj, w in ((0, 0, (1 - fa) * (1 - fb)), (1, 0, fa * (1 - fb)), (0, 1, (1 - fa) * fb), (1, 1, fa * fb)):
        R.append(rows)
        C.append((i0 + di) * grid.ny + (j0 + dj))
        W.append(w * dt)
    return _PixelPlan(np.concatenate(R), np.concatenate(C), np.tile(t, 4), np.concatenate(W), shape)


def assemble_operator(grid: ScalarField, family, lam: float, step: Optional[float] = None,
                      basis: str = "pixel", _plan: Optional[_PixelPlan] = None) -> DiscreteOperator:
    """Discretised attenuated transform on the lattice of ``grid``.

    Each segment is cut into equal pieces of length at most ``h / 2`` and the
    piece midpoint carries ``e^{-2 lam t} dt``. With ``basis="pixel"`` the
    whole weight goes to the cell centred on the nearest node, so ``w_ij`` is
    the attenuated arclength of ray ``i`` in pixel ``j``. With
    ``basis="bilinear"`` it is split over the four surrounding nodes with
    bilinear weights, matching the interpolation used by the forward transform.
    Row sums equal the ray lengths at ``lam = 0`` in both cases.
    """
    rays = family.rays if isinstance(family, RayFamily) else list(family)
    if not rays:
        raise NoDataError("empty ray family")
    plan = _plan if _plan is not None else _pixel_plan(grid, rays, step, basis)
    w = np.exp(-2.0 * lam * plan.t) * plan.dt
    A = sp.csr_matrix((w, (plan.rows, plan.cols)), shape=plan.shape)
    A.sum_duplicates()
    return DiscreteOperator(A, grid, float(lam))


# ----------------------------------------------------------------------------
# CGLS
# ----------------------------------------------------------------------------
@dataclass
class ReconstructionReport:
    iterations: int
    residual_history: List[float]  # ||A f - g||^2 + alpha ||f||^2
    normal_residual_history: List[float]  # ||A^T(g - A f) - alpha f||
    final_relative_residual: float
    converged: bool

    def as_text(self) -> str:
        return "\n".join([
            f"iterations={self.iterations}",
            f"final_relative_residual={self.final_relative_residual:.17g}",
            f"converged={self.converged}",
        ])


def cgls_solve(A: DiscreteOperator, data, tikhonov_alpha: float = 0.0, max_iters: int = 300,
               tol: float = 1e-10):
    """Damped CGLS for ``(A^T A + alpha I) f = A^T g`` with minimal-residual smoothing.

    Plain CGLS does not decrease the normal-equation residual monotonically,
    so the returned iterate ``y_k`` is the point on the segment between
    ``y_{k-1}`` and the CGLS iterate ``x_k`` with the smallest normal
    residual. This makes ``normal_residual_history`` non-increasing.
    Stops when that residual falls below ``tol`` times its initial value or
    after ``max_iters`` iterations. Works for complex data (the operator is
    real).
    """
    g = np.asarray(data)
    if g.shape != (A.shape[0],):
        raise InputError(f"data length {g.shape} does not match {A.shape[0]} rows")
    if not np.all(np.isfinite(g)):
        raise InputError("data contains non-finite values")
    M = A.matrix
    MT = M.T.tocsr()
    alpha = float(tikhonov_alpha)
    dtype = np.result_type(g.dtype, float)
    x = np.zeros(M.shape[1], dtype=dtype)
    r = g.astype(dtype, copy=True)
    s = MT @ r
    p = s.copy()
    gamma = float(np.vdot(s, s).real)
    s0 = np.sqrt(gamma)
    gnorm = float(np.sqrt(np.vdot(g, g).real))
    # smoothed iterate and its (affine) residuals
    y, ry, sy = x.copy(), r.copy(), s.copy()
    hist = [float(np.vdot(r, r).real)]
    nhist = [s0]
    it = 0
    converged = s0 == 0.0
    while not converged and it < max_iters:
        q = M @ p
        delta = float(np.vdot(q, q).real) + alpha * float(np.vdot(p, p).real)
        if delta == 0.0:
            break
        a = gamma / delta
        x += a * p
        r -= a * q
        s = MT @ r - alpha * x
        gnew = float(np.vdot(s, s).real)
        it += 1
        ds = s - sy
        dd = float(np.vdot(ds, ds).real)
        eta = min(1.0, max(0.0, -float(np.vdot(sy, ds).real) / dd)) if dd > 0.0 else 0.0
        y += eta * (x - y)
        ry += eta * (r - ry)
        sy += eta * ds
        ny = float(np.sqrt(np.vdot(sy, sy).real))
        hist.append(float(np.vdot(ry, ry).real) + alpha * float(np.vdot(y, y).real))
        nhist.append(min(ny, nhist[-1]))
        if ny <= tol * s0:
            converged = True
            break
        p = s + (gnew / gamma) * p
        gamma = gnew
    rel = float(np.linalg.norm(M @ y - g) / gnorm) if gnorm > 0 else 0.0
    f = A.grid.with_values(y.reshape(A.grid.shape))
    return f, ReconstructionReport(it, hist, nhist, rel, converged)


# ----------------------------------------------------------------------------
# visible sets
# ----------------------------------------------------------------------------
@dataclass
class VisibleSet:
    mask: np.ndarray
    grid: ScalarField
    E: tuple
    kind: str

    def as_field(self) -> ScalarField:
        return self.grid.with_values(self.mask.astype(float))


def _excluded_arc(domain: Domain, E, n=4000):
    d = domain.with_E(E) if E else domain.with_E([(0.0, 1e-300)])
    u = np.linspace(0.0, domain.boundary_length, n, endpoint=False)
    keep = ~d.in_E(u) if E else np.ones(n, dtype=bool)
    x1, x2 = domain.boundary_point(u[keep])
    return np.column_stack([x1, x2])


def _side_values(kind, px, py, d1, d2, Q):
    """Signed side of boundary samples ``Q`` (m, 2) relative to the geodesic through
    ``(px, py)`` with chart direction ``(d1, d2)``; shapes broadcast over the first axis."""
    q1, q2 = Q[None, :, 0], Q[None, :, 1]
    px, py, d1, d2 = (np.asarray(a)[:, None] for a in (px, py, d1, d2))
    if kind == "disc_euclidean":
        return -d2 * (q1 - px) + d1 * (q2 - py)
    if kind == "sphere_cap":
        P = np.stack(chart_to_sphere(px, py), -1)
        e = 1e-6
        Pd = np.stack(chart_to_sphere(px + e * d1, py + e * d2), -1)
        n = np.cross(P, Pd - P)
        S = np.stack(chart_to_sphere(q1, q2), -1)
        return np.sum(n * S, axis=-1)
    if kind == "hyperbolic_halfplane_patch":
        vertical = np.abs(d2) < 1e-14 * np.maximum(1.0, np.abs(d1))
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = py + px * d1 / d2
            R2 = px * px + (py - alpha) ** 2
            circ = q1 * q1 + (q2 - alpha) ** 2 - R2
        line = q2 - py
        return np.where(vertical, line, circ)
    raise ValidationError(f"no side function for geometry {kind!r}")


def visible_set(geometry, E, grid: ScalarField, n_dirs: int = 360, method: Optional[str] = None) -> VisibleSet:
    """Union of geodesics that keep ``boundary minus E`` strictly on one side.

    ``geometry`` is a ``(metric, domain)`` pair. For the Euclidean disc the
    default is the convex-hull construction; ``method="scan"`` (default for
    the other geometries) scans ``n_dirs`` directions through every pixel
    centre using closed-form geodesic side functions.
    """
    _, domain = geometry
    X1, X2 = grid.mesh()
    inside = domain.rho(X1, X2) > 0
    E = tuple(tuple(e) for e in (E or ()))
    d = domain.with_E(E) if E else None
    if d is not None and d.E_full:
        return VisibleSet(inside.copy(), grid, E, domain.kind)
    if not E:
        return VisibleSet(np.zeros_like(inside), grid, E, domain.kind)
    Q = _excluded_arc(domain, E)
    method = method or ("hull" if domain.kind == "disc_euclidean" else "scan")
    if method == "hull":
        hull = ConvexHull(Q)
        eq = hull.equations  # a x + b y + c <= 0 inside
        pts = np.column_stack([X1.ravel(), X2.ravel()])
        in_hull = np.all(pts @ eq[:, :2].T + eq[:, 2] <= 1e-12, axis=1).reshape(X1.shape)
        return VisibleSet(inside & ~in_hull, grid, E, domain.kind)
    # direction scan
    Qs = Q[:: max(1, len(Q) // 600)]
    mask = np.zeros(X1.shape, dtype=bool)
    th = np.linspace(0.0, np.pi, n_dirs, endpoint=False)
    ii, jj = np.nonzero(inside)
    for a, b in zip(np.array_split(ii, max(1, len(ii) // 64)), np.array_split(jj, max(1, len(ii) // 64))):
        px = X1[a, b]
        py = X2[a, b]
        vis = np.zeros(len(a), dtype=bool)
        for t in th:
            s = _side_values(domain.kind, px, py, np.cos(t) + 0 * px, np.sin(t) + 0 * px, Qs)
            vis |= np.all(s > 0, axis=1) | np.all(s < 0, axis=1)
        mask[a, b] = vis
    return VisibleSet(mask, grid, E, domain.kind)


# ----------------------------------------------------------------------------
# error masks
# ----------------------------------------------------------------------------
def masked_error(recon, truth, mask, domain_mask=None, floor: float = 1e-3):
    """Relative L2 errors inside ``mask`` and inside its complement.

    Each region's error is normalised by the truth norm on that region; when
    that norm is below ``floor`` times the truth norm on the whole support
    (``domain_mask``, default all pixels) the whole-support norm is used
    instead, so a phantom vanishing on one region still gives a finite error.
    """
    r = recon.values if isinstance(recon, ScalarField) else np.asarray(recon)
    t = truth.values if isinstance(truth, ScalarField) else np.asarray(truth)
    m = mask.mask if isinstance(mask, VisibleSet) else np.asarray(mask, dtype=bool)
    dm = np.ones_like(m) if domain_mask is None else np.asarray(domain_mask, dtype=bool)
    inside = m & dm
    outside = ~m & dm
    if not inside.any():
        raise EmptyMaskError("mask selects no pixels")
    total = np.linalg.norm(t[dm])

    def rel(region):
        if not region.any():
            return 0.0
        num = np.linalg.norm((r - t)[region])
        den = np.linalg.norm(t[region])
        if den < floor * total or den == 0.0:
            den = total
        return float(num / den) if den > 0 else float(num)

    return {"rel_L2_inside": rel(inside), "rel_L2_outside": rel(outside)}


# ----------------------------------------------------------------------------
# cylinder reconstruction
# ----------------------------------------------------------------------------
@dataclass
class CylinderReport:
    lambdas: np.ndarray
    slice_reports: Dict[float, ReconstructionReport]
    method: str

    def as_text(self) -> str:
        its = [r.iterations for r in self.slice_reports.values()]
        res = [r.final_relative_residual for r in self.slice_reports.values()]
        return "\n".join([
            f"method={self.method}",
            f"n_lambda={len(self.lambdas)}",
            f"max_iterations={max(its)}",
            f"max_slice_relative_residual={max(res):.6g}",
        ])


def _check_lambdas(lams):
    lams = np.sort(np.asarray(list(lams), dtype=float))
    for l in lams:
        if not np.any(np.abs(lams + l) <= 1e-12 * max(1.0, abs(l))):
            raise SymmetryError(f"lambda = {l} has no conjugate partner {-l}")
    if len(lams) > 2:
        d = np.diff(lams)
        if np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, d[0]):
            raise SymmetryError("lambda values must be uniformly spaced")
    return lams


def x1_inversion_matrix(lams, x1_grid, support, method: str = "support_smooth", x1_rcond: float = 1e-2,
                        x1_smooth: float = 0.1):
    """Linear map from conjugate-symmetrised slices (one per lambda) to values on ``x1_grid``.

    The result ``P`` has shape ``(n_x1, n_lambda)`` and the reconstruction is
    ``Re(P @ slices)``.

    ``idft``
        Trapezoid-rule inverse Fourier integral over ``k = 2 lambda``.
    ``support_lstsq``
        Real least-squares fit of node values inside ``support`` (zero
        outside) with the trapezoid forward rule as model; singular values
        below ``x1_rcond`` times the largest are truncated.
    ``support_smooth``
        Same model with a second-difference penalty on the zero-extended
        node values. The weight is ``x1_smooth`` times the ratio of the norms
        of the two normal matrices, so it does not depend on the node count.

    The band ``|k| <= 2 max|lambda|`` determines only a few modes on a
    bounded support, hence the support and smoothness priors.
    """
    k = 2.0 * np.asarray(lams, dtype=float)
    x = np.asarray(x1_grid, dtype=float)
    if method == "idft":
        wk = np.zeros_like(k)
        dk = np.diff(k)
        wk[:-1] += 0.5 * dk
        wk[1:] += 0.5 * dk
        return (wk[None, :] * np.exp(1j * np.outer(x, k))) / (2 * np.pi)
    if method not in ("support_lstsq", "support_smooth"):
        raise ValidationError(f"unknown x1 inversion method {method!r}")
    a, b = support
    inside = (x >= a - 1e-12) & (x <= b + 1e-12)
    xs = x[inside]
    w = np.zeros_like(xs)
    d = np.diff(xs)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    F = w[None, :] * np.exp(-1j * np.outer(k, xs))  # (n_k, n_in)
    Fr = np.vstack([F.real, F.imag])
    if method == "support_lstsq":
        P = np.linalg.pinv(Fr, rcond=x1_rcond)  # (n_in, 2 n_k)
    else:
        n = len(xs)
        hx = np.diff(xs)
        # second differences of the zero-extended values (ghost nodes one spacing outside)
        pad = np.concatenate([[hx[0]], hx, [hx[-1]]]) if n > 1 else np.ones(2)
        D = np.zeros((n, n))
        for i in range(n):
            hl, hr = pad[i], pad[i + 1]
            D[i, i] = -2.0 / (hl * hr)
            if i > 0:
                D[i, i - 1] = 2.0 / (hl * (hl + hr))
            if i < n - 1:
                D[i, i + 1] = 2.0 / (hr * (hl + hr))
        N1 = Fr.T @ Fr
        N2 = D.T @ D
        beta = x1_smooth * np.linalg.norm(N1, 2) / np.linalg.norm(N2, 2)
        P = np.linalg.solve(N1 + beta * N2, Fr.T)
    out = np.zeros((len(x), len(k)), dtype=complex)
    # Re((P_re - i P_im) (Re Q + i Im Q)) = P_re Re Q + P_im Im Q
    out[inside] = P[:, : len(k)] - 1j * P[:, len(k):]
    return out


def cylinder_reconstruct(data: Mapping[float, np.ndarray], family: RayFamily, grid: ScalarField, x1_grid,
                         alpha: float = 1e-6, iters: int = 300, c: Optional[ScalarField] = None,
                         support=None, method: str = "support_smooth", x1_rcond: float = 1e-2,
                         x1_smooth: float = 0.1, tol: float = 1e-10, basis: str = "pixel"):
    """Slice-wise reconstruction of ``q`` from attenuated transform data.

    For each ``lambda_k`` CGLS recovers ``(c q)^(2 lambda_k, .)``; the slices
    are divided by ``c``, conjugate-symmetrised and inverted in ``x1`` (see
    :func:`x1_inversion_matrix`). Returns ``(CylinderPotential, CylinderReport)``.
    """
    lams = _check_lambdas(data.keys())
    lookup = {float(l): np.asarray(v) for l, v in data.items()}

    def get(l):
        for key, v in lookup.items():
            if abs(key - l) <= 1e-12 * max(1.0, abs(l)):
                return v
        raise SymmetryError(f"missing data for lambda = {l}")

    plan = _pixel_plan(grid, family.rays, None, basis)
    slices, reports = {}, {}
    cvals = np.ones(grid.shape) if c is None else c.values
    for l in lams:
        A = assemble_operator(grid, family, l, _plan=plan)
        f, rep = cgls_solve(A, get(l).astype(complex), alpha, iters, tol)
        slices[l] = f.values / cvals
        reports[float(l)] = rep
    sym = np.stack([0.5 * (slices[l] + np.conj(slices[_match(slices, -l)])) for l in lams])
    x1_grid = np.asarray(x1_grid, dtype=float)
    support = support if support is not None else (float(x1_grid[0]), float(x1_grid[-1]))
    P = x1_inversion_matrix(lams, x1_grid, support, method, x1_rcond, x1_smooth)
    q = np.real(np.tensordot(P, sym, axes=(1, 0)))
    out_slices = [grid.with_values(q[i]) for i in range(len(x1_grid))]
    cfield = c if c is not None else grid.with_values(np.ones(grid.shape))
    pot = CylinderPotential(x1_grid, out_slices, cfield, tuple(support))
    return pot, CylinderReport(lams, reports, method)


def _match(slices, l):
    for k in slices:
        if abs(k - l) <= 1e-12 * max(1.0, abs(l)):
            return k
    raise SymmetryError(f"missing conjugate slice for lambda = {l}")


# ----------------------------------------------------------------------------
# singular spectrum
# ----------------------------------------------------------------------------
@dataclass
class SpectrumReport:
    sigma_max: np.ndarray
    sigma_min: np.ndarray
    condition: float
    n_columns: int
    iterations: Dict[str, int]

    def as_text(self) -> str:
        return "\n".join([
            "sigma_max=" + ",".join(f"{s:.17g}" for s in self.sigma_max),
            "sigma_min=" + ",".join(f"{s:.17g}" for s in self.sigma_min),
            f"condition={self.condition:.17g}",
            f"n_columns={self.n_columns}",
        ])


def _subspace_iteration(apply, n, k, tol, max_iter, seed, guard: int = 4):
    """Top ``k`` eigenvalues (ascending) of a symmetric PSD map; ``guard`` extra
    vectors speed up convergence when the wanted eigenvalues are clustered."""
    rng = np.random.default_rng(seed)
    p = min(n, k + guard)
    Q, _ = np.linalg.qr(rng.standard_normal((n, p)))
    prev = None
    for it in range(1, max_iter + 1):
        Z = apply(Q)
        Q, R = np.linalg.qr(Z)
        # Rayleigh-Ritz on the current subspace
        Tm = Q.T @ apply(Q)
        vals, vecs = np.linalg.eigh(0.5 * (Tm + Tm.T))
        Q = Q @ vecs
        top = vals[p - k:]
        if prev is not None and np.max(np.abs(top - prev) / np.maximum(np.abs(top), 1e-300)) < tol:
            return top, it, True
        prev = top
    return prev, max_iter, False


def singular_spectrum(A: DiscreteOperator, k_smallest: int = 1, k_largest: int = 1, tol: float = 1e-8,
                      max_iter: int = 5000, columns: str = "touched", seed: int = 0) -> SpectrumReport:
    """Extreme singular values by subspace iteration on ``A^T A`` (power for the
    largest, inverse power with a sparse LU factorisation for the smallest).

    ``columns="touched"`` restricts to pixels met by at least one ray, so that
    pixels outside every ray do not produce trivial zero singular values;
    ``"all"`` keeps every pixel and an index array selects the columns
    explicitly (use the same set to compare operators on one unknown space).
    """
    M = A.matrix.tocsc()
    if isinstance(columns, str):
        if columns == "touched":
            M = M[:, A.touched_columns()]
        elif columns != "all":
            raise ValidationError(f"unknown column selection {columns!r}")
    else:
        M = M[:, np.asarray(columns)]
    n = M.shape[1]
    if max(k_smallest, k_largest) > min(M.shape):
        raise ValidationError("k exceeds min(rows, cols)")
    N = (M.T @ M).tocsc()
    vals_max, it_max, ok1 = _subspace_iteration(lambda X: N @ X, n, k_largest, tol, max_iter, seed)
    smax = np.sqrt(np.maximum(vals_max[::-1], 0.0))
    shift = 1e-14 * float(smax[0]) ** 2
    lu = splu((N + shift * sp.identity(n, format="csc")).tocsc())
    vals_inv, it_min, ok2 = _subspace_iteration(lambda X: lu.solve(X), n, k_smallest, tol, max_iter, seed + 1)
    lam_min = 1.0 / vals_inv[::-1] - shift
    smin = np.sqrt(np.maximum(lam_min, 0.0))
    smin = np.sort(smin)
    rep = SpectrumReport(smax, smin, float(smax[0] / smin[0]) if smin[0] > 0 else float("inf"), n,
                         {"largest": it_max, "smallest": it_min})
    if not (ok1 and ok2):
        raise ConvergenceError("singular value iteration did not converge", best=rep)
    return rep
