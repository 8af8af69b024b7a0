"""Phantoms and end-to-end experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import Domain, Metric, ScalarField, builtin_geometry
from .inversion import (assemble_operator, cgls_solve, cylinder_reconstruct, masked_error, singular_spectrum,
                        visible_set)
from .quasimode import build_quasimode, verify_quasimode
from .raytrace import trace_broken_ray
from .transform import CylinderPotential, forward_transform, ray_family_from_E


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------
def make_geometry(kind: str = "disc_euclidean", radius=None, theta_max=None, center=None, r=None,
                  E=None, E_fraction=None):
    """``(metric, domain)`` for a built-in geometry with E given as parameter or fraction intervals."""
    params = {}
    if radius is not None:
        params["radius"] = radius
    if theta_max is not None:
        params["theta_max"] = theta_max
    if center is not None:
        params["center"] = tuple(center)
    if r is not None:
        params["r"] = r
    metric, domain = builtin_geometry(kind, **params)
    if E is not None and E_fraction is not None:
        raise ValidationError("give E or E_fraction, not both")
    L = domain.boundary_length
    if E_fraction is not None:
        E = [(a * L, b * L) for a, b in E_fraction]
    if E is not None:
        domain = domain.with_E(E)
    return metric, domain


# ----------------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------------
def cosine_bump(center=(0.2, -0.1), radius: float = 0.5) -> Callable:
    """``cos^2(pi r / (2 radius))`` inside the chart disc of ``radius`` about ``center``."""
    c1, c2 = float(center[0]), float(center[1])
    R = float(radius)

    def f(x1, x2):
        r = np.hypot(np.asarray(x1) - c1, np.asarray(x2) - c2)
        return np.where(r < R, np.cos(0.5 * np.pi * np.minimum(r, R) / R) ** 2, 0.0)

    return f


def raised_cosine(x):
    """``(1 - cos 2 pi x) / 2`` on ``[0, 1]``, zero outside."""
    x = np.asarray(x, dtype=float)
    return np.where((x >= 0) & (x <= 1), 0.5 * (1.0 - np.cos(2 * np.pi * x)), 0.0)


def transversal_profile(x1, x2):
    """Off-centre Gaussian tapered to vanish on the unit circle."""
    x1, x2 = np.asarray(x1), np.asarray(x2)
    g = np.exp(-((x1 - 0.15) ** 2 + (x2 + 0.1) ** 2) / (2 * 0.25 ** 2))
    return g * np.clip(1.0 - (x1 * x1 + x2 * x2), 0.0, None) ** 2


def gaussian_psi(center=(0.0, 0.0), sigma: float = 0.5) -> Callable:
    c1, c2 = float(center[0]), float(center[1])
    return lambda x1, x2: np.exp(-((np.asarray(x1) - c1) ** 2 + (np.asarray(x2) - c2) ** 2) / (2 * sigma * sigma))


def psi_functions(names: Sequence[str], domain: Domain, sigma: float = 0.5) -> Dict[str, Callable]:
    c = domain.params.get("center", (0.0, 0.0))
    out = {}
    for n in names:
        if n == "one":
            continue
        if n == "gauss":
            out[n] = gaussian_psi(c, sigma)
        else:
            raise ValidationError(f"unknown test function {n!r} (use one, gauss)")
    return out


# ----------------------------------------------------------------------------
# inversion experiments
# ----------------------------------------------------------------------------
@dataclass
class InversionResult:
    recon: ScalarField
    truth: ScalarField
    inside: np.ndarray
    rel_l2: float
    iterations: int
    residual_history: np.ndarray
    n_rays: int
    mask: Optional[np.ndarray] = None
    masked: Dict[str, float] = field(default_factory=dict)


def inversion_experiment(metric: Metric, domain: Domain, phantom: Callable, n_grid: int = 48, n_u: int = 120,
                         n_a: int = 120, max_reflections: int = 0, alpha: float = 1e-6, iters: int = 300,
                         basis: str = "pixel", lam: float = 0.0, with_visible_set: bool = False,
                         threads: int = 1, tol: float = 1e-10) -> InversionResult:
    """Forward data by ray quadrature of ``phantom`` followed by CGLS on the lattice."""
    fam = ray_family_from_E(metric, domain, n_u, n_a, max_reflections)
    grid = ScalarField.covering(domain, n_grid)
    X = grid.mesh()
    truth = grid.with_values(phantom(*X))
    A = assemble_operator(grid, fam, lam, basis=basis)
    data = forward_transform(phantom, fam, lam, threads=threads)
    recon, rep = cgls_solve(A, data, alpha, iters, tol)
    inside = domain.rho(*X) > 0
    diff = (recon.values - truth.values)[inside]
    rel = float(np.linalg.norm(diff) / np.linalg.norm(truth.values[inside]))
    out = InversionResult(recon, truth, inside, rel, rep.iterations, np.asarray(rep.residual_history), len(fam))
    if with_visible_set:
        vs = visible_set((metric, domain), domain.E, grid)
        out.mask = vs.mask
        out.masked = masked_error(recon, truth, vs.mask, inside)
    return out


@dataclass
class CylinderResult:
    x1_grid: np.ndarray
    recon: np.ndarray
    truth: np.ndarray
    grid: ScalarField
    inside: np.ndarray
    rel_l2: float
    lambdas: np.ndarray


def cylinder_experiment(domain: Domain, metric: Metric, c_value: float = 1.0, n_lambda: int = 17,
                        lambda_max: float = 2.0, n_u: int = 60, n_a: int = 60, n_grid: int = 32,
                        fine_n: int = 97, x1_data_nodes: int = 65, x1_nodes: int = 17, alpha: float = 1e-6,
                        iters: int = 300, basis: str = "bilinear", x1_method: str = "support_smooth",
                        x1_smooth: float = 0.1, threads: int = 1, family=None) -> CylinderResult:
    """Separable ``q = w(x1) p(x')`` on ``[0, 1] x M0`` with constant conformal factor ``c_value``."""
    fam = family if family is not None else ray_family_from_E(metric, domain, n_u, n_a, 0)
    fine = ScalarField.covering(domain, fine_n, transversal_profile, margin=0.05)
    c = fine.with_values(np.full(fine.shape, float(c_value)))
    pot = CylinderPotential.separable(raised_cosine, fine, np.linspace(0.0, 1.0, x1_data_nodes), c=c)
    lams = np.linspace(-lambda_max, lambda_max, n_lambda)
    data = {float(l): forward_transform(pot, fam, float(l), threads=threads) for l in lams}
    grid = ScalarField.covering(domain, n_grid)
    x1g = np.linspace(0.0, 1.0, x1_nodes)
    est, _ = cylinder_reconstruct(data, fam, grid, x1g, alpha=alpha, iters=iters,
                                  c=grid.with_values(np.full(grid.shape, float(c_value))), method=x1_method,
                                  x1_smooth=x1_smooth, basis=basis)
    X = grid.mesh()
    inside = domain.rho(*X) > 0
    truth = np.stack([raised_cosine(x) * transversal_profile(*X) for x in x1g])
    q = est.stack
    rel = float(np.linalg.norm((q - truth)[:, inside]) / np.linalg.norm(truth[:, inside]))
    return CylinderResult(x1g, q, truth, grid, inside, rel, lams)


@dataclass
class SpectrumStudy:
    names: list
    reports: dict
    n_rays: dict


def spectrum_study(metric: Metric, domain: Domain, E_fractions: Dict[str, Sequence], n_grid: int = 17,
                   n_u: int = 40, n_a: int = 40, max_reflections: int = 3, seed: int = 0,
                   k_smallest: int = 1, k_largest: int = 1) -> SpectrumStudy:
    """Extreme singular values of the broken-ray operator for several observation sets.

    All operators act on the same unknowns: the pixels met by the first
    (largest) family, so untouched pixels show up as zero singular values for
    smaller observation sets.
    """
    grid = ScalarField.covering(domain, n_grid)
    L = domain.boundary_length
    reports, counts, cols = {}, {}, None
    for name, frac in E_fractions.items():
        d = domain.with_E([(a * L, b * L) for a, b in frac])
        fam = ray_family_from_E(metric, d, n_u, n_a, max_reflections)
        A = assemble_operator(grid, fam, 0.0)
        if cols is None:
            cols = A.touched_columns()
        reports[name] = singular_spectrum(A, k_smallest, k_largest, columns=cols, seed=seed)
        counts[name] = len(fam)
    return SpectrumStudy(list(E_fractions), reports, counts)


# ----------------------------------------------------------------------------
# beams
# ----------------------------------------------------------------------------
def beam_experiment(metric: Metric, domain: Domain, entry: float, angle, reflections: int = 0,
                    taus=(32.0, 64.0, 128.0, 256.0), lams=(0.0,), psis=("one",), psi_sigma: float = 0.5,
                    delta_prime: Optional[float] = None, residual_method: str = "fermi",
                    boundary: bool = True, h: Optional[float] = None):
    """Trace, build and verify a Gaussian beam; returns ``(beam, report)``."""
    ray = trace_broken_ray(metric, domain, entry, angle, reflections)
    beam = build_quasimode(metric, domain, ray, float(taus[0]), delta_prime=delta_prime)
    rep = verify_quasimode(beam, taus, lams=lams, psis=psi_functions(psis, domain, psi_sigma), h=h,
                           boundary=boundary and not domain.E_full, residual_method=residual_method)
    return beam, rep
