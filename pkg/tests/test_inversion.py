import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import quad

from brl.errors import ConvergenceError, EmptyMaskError, InputError, SymmetryError, ValidationError
from brl.experiments import cosine_bump, cylinder_experiment, raised_cosine
from brl.geometry import ScalarField, builtin_geometry
from brl.inversion import (
    DiscreteOperator,
    assemble_operator,
    cgls_solve,
    cylinder_reconstruct,
    masked_error,
    singular_spectrum,
    visible_set,
    x1_inversion_matrix,
)
from brl.raytrace import trace_broken_ray
from brl.transform import CylinderPotential, forward_transform, ray_family_from_E


@pytest.fixture(scope="module")
def disc_family():
    m, d = builtin_geometry("disc_euclidean")
    return m, d, ray_family_from_E(m, d, 24, 24, 0)


def smooth_field(rng, c0):
    c = rng.standard_normal((3, 3))

    def f(x, y):
        return sum(c[i, j] * np.cos(i * (x - c0[0]) + 0.3) * np.cos(j * (y - c0[1]) - 0.2)
                   for i in range(3) for j in range(3))

    return f


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------
@pytest.mark.parametrize("basis", ["pixel", "bilinear"])
def test_diameter_row_sum_is_length(disc, basis):
    m, d = disc
    ray = trace_broken_ray(m, d, 0.0, np.pi / 2)
    grid = ScalarField.covering(d, 33)
    A = assemble_operator(grid, [ray], 0.0, basis=basis)
    assert A.shape == (1, 33 * 33)
    assert A.row_sums()[0] == pytest.approx(2.0, abs=1e-3)


def test_attenuated_row_sum(disc):
    m, d = disc
    ray = trace_broken_ray(m, d, 0.0, np.pi / 2)
    grid = ScalarField.covering(d, 33)
    A = assemble_operator(grid, [ray], 1.0)
    assert A.row_sums()[0] == pytest.approx((1 - np.exp(-4.0)) / 2, abs=1e-3)


def test_operator_on_ones_matches_transform(disc_family):
    m, d, fam = disc_family
    grid = ScalarField.covering(d, 33, lambda x, y: np.ones_like(x), margin=0.1)
    A = assemble_operator(grid, fam, 0.0)
    data = forward_transform(grid, fam, 0.0)
    assert np.max(np.abs(A @ grid - data)) < 1e-3 * np.max(np.abs(data))


def test_operator_consistency_random_fields(geometry):
    name, m, d = geometry
    rng = np.random.default_rng(7)
    fam = ray_family_from_E(m, d, 16, 16, 0)
    grid = ScalarField.covering(d, 48)
    A = assemble_operator(grid, fam, 0.0, basis="bilinear")
    c0 = np.asarray(d.params.get("center", (0.0, 0.0)), dtype=float)
    for _ in range(10):
        F = grid.with_values(smooth_field(rng, c0)(*grid.mesh()))
        data = forward_transform(F, fam, 0.0)
        assert np.max(np.abs(A @ F - data)) / np.max(np.abs(data)) < 1e-3


def test_adjoint_identity(disc_family, rng):
    m, d, fam = disc_family
    grid = ScalarField.covering(d, 20)
    A = assemble_operator(grid, fam, 0.5)
    f = rng.standard_normal(grid.shape)
    g = rng.standard_normal(A.shape[0])
    assert np.dot(A @ f, g) == pytest.approx(np.dot(f.ravel(), A.rmatvec(g)), rel=1e-12)


def test_touched_columns_inside_domain(disc_family):
    m, d, fam = disc_family
    grid = ScalarField.covering(d, 20)
    A = assemble_operator(grid, fam, 0.0)
    cols = A.touched_columns()
    X1, X2 = grid.mesh()
    r = np.hypot(X1.ravel()[cols], X2.ravel()[cols])
    assert np.all(r < 1.0 + grid.hx)


def test_unknown_basis(disc_family):
    m, d, fam = disc_family
    with pytest.raises(ValidationError):
        assemble_operator(ScalarField.covering(d, 10), fam, 0.0, basis="spline")


# ----------------------------------------------------------------------------
# CGLS
# ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_problem(disc_family):
    m, d, _ = disc_family
    fam = ray_family_from_E(m, d, 40, 40, 0)
    grid = ScalarField.covering(d, 24)
    A = assemble_operator(grid, fam, 0.0)
    truth = cosine_bump()(*grid.mesh())
    return A, truth


def test_cgls_inverse_crime(small_problem):
    A, truth = small_problem
    f, rep = cgls_solve(A, A @ truth, 0.0, 300)
    assert np.linalg.norm(f.values - truth) / np.linalg.norm(truth) < 0.05
    assert rep.converged


def test_cgls_zero_data(small_problem):
    A, _ = small_problem
    f, rep = cgls_solve(A, np.zeros(A.shape[0]), 0.0, 50)
    assert np.all(f.values == 0.0)
    assert rep.iterations == 0


def test_cgls_heavy_damping_shrinks(small_problem):
    A, truth = small_problem
    g = A @ truth
    f0, _ = cgls_solve(A, g, 0.0, 300)
    f1, _ = cgls_solve(A, g, 1e6, 300)
    assert np.linalg.norm(f1.values) < 1e-3 * np.linalg.norm(f0.values)


@pytest.mark.parametrize("alpha", [0.0, 1e-6, 1e-2])
def test_cgls_normal_residual_non_increasing(small_problem, alpha):
    A, truth = small_problem
    _, rep = cgls_solve(A, A @ truth, alpha, 200)
    nh = np.asarray(rep.normal_residual_history)
    assert np.all(np.diff(nh) <= 0.0)
    assert nh[-1] < 1e-3 * nh[0]


def test_cgls_matches_lstsq_on_dense_problem(rng):
    M = rng.standard_normal((60, 25))
    grid = ScalarField(np.zeros((5, 5)), 1.0, 1.0, 0.0, 0.0)
    A = DiscreteOperator(sp.csr_matrix(M), grid, 0.0)
    g = rng.standard_normal(60)
    alpha = 0.3
    f, rep = cgls_solve(A, g, alpha, 200, tol=1e-13)
    ref = np.linalg.solve(M.T @ M + alpha * np.eye(25), M.T @ g)
    assert np.allclose(f.values.ravel(), ref, atol=1e-9)


def test_cgls_complex_data(small_problem):
    A, truth = small_problem
    g = A @ truth
    f, _ = cgls_solve(A, g * (1 + 2j), 0.0, 300)
    fr, _ = cgls_solve(A, g, 0.0, 300)
    assert np.allclose(f.values, fr.values * (1 + 2j), atol=1e-7)


def test_cgls_input_errors(small_problem):
    A, _ = small_problem
    with pytest.raises(InputError):
        cgls_solve(A, np.zeros(A.shape[0] + 1))
    bad = np.zeros(A.shape[0])
    bad[3] = np.nan
    with pytest.raises(InputError):
        cgls_solve(A, bad)


# ----------------------------------------------------------------------------
# visible sets
# ----------------------------------------------------------------------------
def _half_check(vs, grid, d):
    c = np.asarray(d.params.get("center", (0.0, 0.0)), dtype=float)
    X1, X2 = grid.mesh()
    inside = d.rho(X1, X2) > 0
    up = inside & (X2 - c[1] > grid.hy)
    down = inside & (X2 - c[1] < -grid.hy)
    assert np.all(vs.mask[up])
    assert not np.any(vs.mask[down])


@pytest.mark.parametrize("method", ["hull", "scan"])
def test_disc_half_boundary_visible_set(disc, method):
    m, d = disc
    grid = ScalarField.covering(d, 33)
    vs = visible_set((m, d), [(0.0, d.boundary_length / 2)], grid, method=method)
    _half_check(vs, grid, d)


@pytest.mark.parametrize("name", ["sphere_cap", "hyperbolic_halfplane_patch"])
def test_curved_half_boundary_visible_set(name):
    m, d = builtin_geometry(name)
    grid = ScalarField.covering(d, 25)
    vs = visible_set((m, d), [(0.0, d.boundary_length / 2)], grid, n_dirs=180)
    _half_check(vs, grid, d)


def test_full_and_empty_observation_sets(geometry):
    name, m, d = geometry
    grid = ScalarField.covering(d, 15)
    inside = d.rho(*grid.mesh()) > 0
    full = visible_set((m, d), [(0.0, d.boundary_length)], grid)
    empty = visible_set((m, d), [], grid)
    assert np.array_equal(full.mask, inside)
    assert not empty.mask.any()


def test_visible_complement_convex(disc, rng):
    m, d = disc
    n = 41
    grid = ScalarField.covering(d, n)
    L = d.boundary_length
    vs = visible_set((m, d), [(0.0, 0.75 * L)], grid)
    X1, X2 = grid.mesh()
    inside = d.rho(X1, X2) > 0
    invisible = np.argwhere(inside & ~vs.mask)
    assert len(invisible) > 10
    pairs = rng.integers(0, len(invisible), size=(500, 2))
    for a, b in pairs:
        p, q = invisible[a], invisible[b]
        for s in np.linspace(0.0, 1.0, 11):
            i, j = np.rint(p + s * (q - p)).astype(int)
            nb = vs.mask[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            # one-pixel rasterisation slack
            assert not nb.all()


def test_pixels_next_to_E_are_visible(disc):
    m, d = disc
    grid = ScalarField.covering(d, 41)
    L = d.boundary_length
    E = [(0.0, 0.25 * L)]
    vs = visible_set((m, d), E, grid)
    X1, X2 = grid.mesh()
    inside = d.rho(X1, X2) > 0
    u = np.linspace(0.05 * L, 0.2 * L, 40)
    bx, by = d.boundary_point(u)
    dist = np.min(np.hypot(X1[..., None] - bx, X2[..., None] - by), axis=-1)
    near = inside & (dist < 1.5 * grid.hx)
    assert near.any()
    assert np.all(vs.mask[near])


def test_visible_set_as_field(disc):
    m, d = disc
    grid = ScalarField.covering(d, 11)
    vs = visible_set((m, d), [(0.0, 1.0)], grid)
    assert np.array_equal(vs.as_field().values, vs.mask.astype(float))


# ----------------------------------------------------------------------------
# masked errors
# ----------------------------------------------------------------------------
def test_masked_error_examples(rng):
    truth = rng.standard_normal((8, 8))
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4] = True
    assert masked_error(truth, truth, mask) == {"rel_L2_inside": 0.0, "rel_L2_outside": 0.0}
    recon = np.where(mask, truth, 0.0)
    err = masked_error(recon, truth, mask)
    assert err["rel_L2_inside"] == 0.0
    assert err["rel_L2_outside"] == pytest.approx(1.0)


def test_masked_error_floor_for_vanishing_region():
    truth = np.zeros((4, 4))
    truth[0, 0] = 1.0
    mask = np.zeros((4, 4), dtype=bool)
    mask[0] = True
    recon = truth.copy()
    recon[3, 3] = 0.5
    err = masked_error(recon, truth, mask)
    assert err["rel_L2_outside"] == pytest.approx(0.5)


def test_masked_error_empty_mask():
    with pytest.raises(EmptyMaskError):
        masked_error(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3), dtype=bool))


# ----------------------------------------------------------------------------
# x1 inversion and cylinder reconstruction
# ----------------------------------------------------------------------------
def test_idft_recovers_gaussian():
    lams = np.linspace(-10, 10, 81)
    k = 2 * lams
    s = 0.3
    x = np.linspace(-1, 1, 41)
    P = x1_inversion_matrix(lams, x, (-1, 1), "idft")
    Q = s * np.sqrt(2 * np.pi) * np.exp(-s * s * k * k / 2)
    assert np.max(np.abs((P @ Q).real - np.exp(-x * x / (2 * s * s)))) < 1e-8


def _raised_cosine_transform(k):
    re = quad(lambda t: raised_cosine(t) * np.cos(k * t), 0, 1)[0]
    im = quad(lambda t: raised_cosine(t) * np.sin(k * t), 0, 1)[0]
    return re - 1j * im


def test_support_smooth_from_narrow_band():
    lams = np.linspace(-2, 2, 17)
    Q = np.array([_raised_cosine_transform(2 * l) for l in lams])
    x = np.linspace(0, 1, 17)
    P = x1_inversion_matrix(lams, x, (0, 1), "support_smooth")
    t = raised_cosine(x)
    assert np.linalg.norm((P @ Q).real - t) / np.linalg.norm(t) < 0.02


def test_support_methods_vanish_outside_support():
    lams = np.linspace(-2, 2, 9)
    x = np.linspace(-0.5, 1.5, 21)
    for method in ("support_lstsq", "support_smooth"):
        P = x1_inversion_matrix(lams, x, (0, 1), method)
        assert P.shape == (21, 9)
        assert np.all(P[(x < 0) | (x > 1)] == 0)


def test_unknown_x1_method():
    with pytest.raises(ValidationError):
        x1_inversion_matrix([-1, 0, 1], [0.0, 1.0], (0, 1), "magic")


@pytest.fixture(scope="module")
def cyl_setup():
    m, d = builtin_geometry("disc_euclidean")
    fam = ray_family_from_E(m, d, 20, 20, 0)
    grid = ScalarField.covering(d, 16)
    return m, d, fam, grid


def test_cylinder_zero_potential(cyl_setup):
    m, d, fam, grid = cyl_setup
    lams = np.linspace(-1, 1, 5)
    data = {float(l): np.zeros(len(fam), dtype=complex) for l in lams}
    pot, rep = cylinder_reconstruct(data, fam, grid, np.linspace(0, 1, 9))
    assert np.linalg.norm(pot.stack) < 1e-8
    assert len(rep.slice_reports) == 5


def test_cylinder_conformal_factor_cancels(cyl_setup):
    m, d, fam, _ = cyl_setup
    kw = dict(n_lambda=5, lambda_max=1.0, n_grid=16, fine_n=33, x1_data_nodes=17, x1_nodes=9,
              iters=60, family=fam)
    r1 = cylinder_experiment(d, m, c_value=1.0, **kw)
    r2 = cylinder_experiment(d, m, c_value=2.0, **kw)
    assert np.max(np.abs(r1.recon - r2.recon)) < 1e-10


def test_cylinder_symmetry_errors(cyl_setup):
    m, d, fam, grid = cyl_setup
    z = np.zeros(len(fam))
    with pytest.raises(SymmetryError):
        cylinder_reconstruct({0.5: z, 1.0: z}, fam, grid, [0.0, 1.0])
    with pytest.raises(SymmetryError):
        cylinder_reconstruct({l: z for l in (-2.0, -0.5, 0.0, 0.5, 2.0)}, fam, grid, [0.0, 1.0])


def test_cylinder_potential_slices_real(cyl_setup):
    m, d, fam, grid = cyl_setup
    fine = ScalarField.covering(d, 33, lambda x, y: np.exp(-4 * (x * x + y * y)), margin=0.05)
    pot = CylinderPotential.separable(raised_cosine, fine, np.linspace(0, 1, 17))
    lams = np.linspace(-1, 1, 5)
    data = {float(l): forward_transform(pot, fam, float(l)) for l in lams}
    est, _ = cylinder_reconstruct(data, fam, grid, np.linspace(0, 1, 9), iters=60)
    assert np.isrealobj(est.stack)
    assert np.all(np.isfinite(est.stack))


# ----------------------------------------------------------------------------
# singular spectrum
# ----------------------------------------------------------------------------
def test_identity_operator_spectrum():
    grid = ScalarField(np.zeros((6, 6)), 1.0, 1.0, 0.0, 0.0)
    A = DiscreteOperator(sp.identity(36, format="csr"), grid, 0.0)
    rep = singular_spectrum(A, 3, 3)
    assert np.allclose(rep.sigma_max, 1.0, atol=1e-10)
    assert np.allclose(rep.sigma_min, 1.0, atol=1e-10)
    assert rep.condition == pytest.approx(1.0)


@pytest.fixture(scope="module")
def full_operator_17():
    m, d = builtin_geometry("disc_euclidean")
    fam = ray_family_from_E(m, d, 40, 40, 0)
    return assemble_operator(ScalarField.covering(d, 17), fam, 0.0)


def test_spectrum_matches_dense_svd(full_operator_17):
    A = full_operator_17
    rep = singular_spectrum(A, 2, 2)
    s = np.linalg.svd(A.matrix[:, A.touched_columns()].toarray(), compute_uv=False)
    assert rep.sigma_min[0] > 0
    assert np.allclose(rep.sigma_max, s[:2], rtol=1e-6)
    assert np.allclose(rep.sigma_min, np.sort(s[-2:]), rtol=1e-6)
    assert rep.n_columns == len(A.touched_columns())


def test_spectrum_deterministic(full_operator_17):
    a = singular_spectrum(full_operator_17, 1, 1)
    b = singular_spectrum(full_operator_17, 1, 1)
    assert np.allclose(a.sigma_min, b.sigma_min, rtol=1e-8)
    assert np.allclose(a.sigma_max, b.sigma_max, rtol=1e-8)
    assert "sigma_min=" in a.as_text()


def test_spectrum_all_columns_has_zero_mode(full_operator_17):
    rep = singular_spectrum(full_operator_17, 1, 1, columns="all")
    assert rep.sigma_min[0] < 1e-6 * rep.sigma_max[0]


def test_spectrum_convergence_error_carries_best(full_operator_17):
    with pytest.raises(ConvergenceError) as exc:
        singular_spectrum(full_operator_17, 1, 1, max_iter=2, tol=1e-15)
    assert exc.value.best is not None
    assert exc.value.best.sigma_max[0] > 0


def test_spectrum_k_too_large():
    grid = ScalarField(np.zeros((2, 2)), 1.0, 1.0, 0.0, 0.0)
    A = DiscreteOperator(sp.identity(4, format="csr"), grid, 0.0)
    with pytest.raises(ValidationError):
        singular_spectrum(A, 5, 1)
