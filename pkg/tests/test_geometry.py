import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brl.errors import DegenerateMetricError, InvalidGeometryError, OutOfChartError, ValidationError
from brl.geometry import (ScalarField, boundary_geometry, builtin_geometry, chart_to_sphere,
                          christoffel_at, circular_domain, halfplane_metric, inner, laplace_beltrami,
                          laplace_beltrami_grid, metric_at, parallel_transport, sphere_polar_metric,
                          sphere_to_chart, stereographic_sphere_metric, Metric)
from brl.raytrace import integrate_cogeodesic

from conftest import interior_points


# ---------------------------------------------------------------- metric_at
def test_metric_at_euclidean_is_identity(disc):
    m, _ = disc
    md = metric_at(m, (0.3, -0.7))
    np.testing.assert_array_equal(md.g, np.eye(2))
    assert md.sqrt_det == 1.0


def test_metric_at_hyperbolic_patch():
    md = metric_at(halfplane_metric(), (2.0, 0.0))
    np.testing.assert_allclose(md.g, np.diag([0.25, 0.25]), atol=1e-15)
    np.testing.assert_allclose(md.ginv, np.diag([4.0, 4.0]), atol=1e-14)
    assert md.sqrt_det == pytest.approx(0.25, abs=1e-15)


def test_metric_at_sphere_colatitude_chart():
    md = metric_at(sphere_polar_metric(), (np.pi / 4, 0.3))
    s = np.sin(np.pi / 4)
    np.testing.assert_allclose(md.g, np.diag([1.0, s * s]), atol=1e-15)
    assert md.sqrt_det == pytest.approx(s, rel=1e-14)


def test_sphere_polar_chart_distance_matches_exponential_map():
    # geodesic from the equator along a meridian: chart distance equals arclength
    m = sphere_polar_metric()
    seg = integrate_cogeodesic(m, (np.pi / 2, 0.0), (-1.0, 0.0), np.pi / 4, 1e-3)
    np.testing.assert_allclose(seg.x[-1], (np.pi / 4, 0.0), atol=1e-12)


def test_metric_at_outside_chart():
    with pytest.raises(OutOfChartError):
        metric_at(halfplane_metric(), (-1.0, 0.0))


def test_metric_at_degenerate():
    m = Metric(lambda a, b: (a * 0.0, a * 0.0, a * 0.0 + 1.0))
    with pytest.raises(DegenerateMetricError):
        metric_at(m, (0.0, 0.0))


def test_metric_spd_and_inverse_at_random_points(geometry, rng):
    _, m, d = geometry
    x1, x2 = interior_points(d, 100, rng, shrink=1.0)
    for a, b in zip(x1, x2):
        md = metric_at(m, (a, b))
        assert np.all(np.linalg.eigvalsh(md.g) > 0)
        assert np.linalg.norm(md.g @ md.ginv - np.eye(2)) < 1e-12


# ---------------------------------------------------------------- Christoffel symbols
def test_christoffel_euclidean_zero(disc):
    m, _ = disc
    np.testing.assert_array_equal(christoffel_at(m, (0.1, 0.4)), np.zeros((2, 2, 2)))


def test_christoffel_hyperbolic_closed_form():
    G = christoffel_at(halfplane_metric(), (2.0, 0.0))
    assert G[0, 0, 0] == pytest.approx(-0.5, abs=1e-14)
    assert G[0, 1, 1] == pytest.approx(0.5, abs=1e-14)
    assert G[1, 0, 1] == pytest.approx(-0.5, abs=1e-14)
    assert G[1, 1, 0] == pytest.approx(-0.5, abs=1e-14)
    # symmetric in the lower indices
    np.testing.assert_allclose(G, np.swapaxes(G, 1, 2), atol=0)


def test_christoffel_hyperbolic_fd_cross_check():
    m = halfplane_metric()
    m.fd_h = 1e-4
    G = christoffel_at(m, (2.0, 0.0), method="analytic")
    Gfd = christoffel_at(m, (2.0, 0.0), method="fd")
    assert np.max(np.abs(G - Gfd)) < 1e-7


def test_christoffel_fd_sphere_cap_deviation():
    m = stereographic_sphere_metric()
    m.fd_h = 1e-4
    x = (0.3, -0.2)
    dev = np.max(np.abs(christoffel_at(m, x, "fd") - christoffel_at(m, x, "analytic")))
    assert dev < 1e-6


@pytest.mark.parametrize("x", [(0.3, -0.2), (0.5, 0.1), (-0.4, 0.35)])
def test_christoffel_fd_second_order(x):
    m = stereographic_sphere_metric()
    exact = christoffel_at(m, x, "analytic")
    devs = []
    for h in (1e-2, 5e-3):
        m.fd_h = h
        devs.append(np.max(np.abs(christoffel_at(m, x, "fd") - exact)))
    assert devs[0] / devs[1] == pytest.approx(4.0, rel=0.2)


def test_christoffel_fd_stencil_outside_chart():
    m = halfplane_metric()
    m.fd_h = 1e-2
    with pytest.raises(OutOfChartError):
        christoffel_at(m, (0.005, 0.0), method="fd")


# ---------------------------------------------------------------- Laplace-Beltrami
def test_laplacian_of_quadratic_euclidean(disc):
    m, d = disc
    f = ScalarField.covering(d, 41, lambda a, b: a * a + b * b)
    assert laplace_beltrami(f, m, (0.13, -0.21)) == pytest.approx(4.0, abs=1e-8)
    lap = laplace_beltrami_grid(f, m).values
    assert np.nanmax(np.abs(lap - 4.0)) < 1e-8


def test_laplacian_of_constant_is_zero(geometry):
    _, m, d = geometry
    f = ScalarField.covering(d, 33, lambda a, b: 3.5 + 0 * a)
    lap = laplace_beltrami_grid(f, m).values
    assert np.nanmax(np.abs(lap)) < 1e-12


def test_laplacian_round_metric_closed_form():
    # conformal factor 4/(1+r^2)^2 gives Delta(r^2) = (1+r^2)^2
    m = stereographic_sphere_metric()
    _, d = builtin_geometry("sphere_cap")
    errs = []
    for n in (41, 81):
        f = ScalarField.covering(d, n, lambda a, b: a * a + b * b + a ** 4)
        X = f.mesh()
        r2 = X[0] ** 2 + X[1] ** 2
        exact = 0.25 * (1 + r2) ** 2 * (4 + 12 * X[0] ** 2)
        errs.append(np.nanmax(np.abs(laplace_beltrami_grid(f, m).values - exact)))
    assert errs[1] < 1e-3
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)


def test_laplacian_stencil_near_edge(disc):
    m, d = disc
    f = ScalarField.covering(d, 21, lambda a, b: a)
    with pytest.raises(OutOfChartError):
        laplace_beltrami(f, m, (f.ox + 0.5 * f.hx, 0.0))


# ---------------------------------------------------------------- boundary frames
@pytest.mark.parametrize("u, nu", [(0.0, (1.0, 0.0)), (np.pi / 2, (0.0, 1.0))])
def test_unit_disc_normals(disc, u, nu):
    m, d = disc
    bf = boundary_geometry(d, m, u)
    np.testing.assert_allclose([float(c) for c in bf.nu], nu, atol=1e-15)


def test_hyperbolic_patch_normal_is_unit():
    m, d = builtin_geometry("hyperbolic_halfplane_patch", r=0.5)
    bf = boundary_geometry(d, m, 0.0)
    np.testing.assert_allclose([float(c) for c in bf.point], (2.5, 0.0), atol=1e-15)
    nu = np.array([float(c) for c in bf.nu])
    assert float(inner(m, 2.5, 0.0, nu, nu)) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(nu, (2.5, 0.0), atol=1e-12)


def test_boundary_frame_postconditions(geometry):
    _, m, d = geometry
    u = np.linspace(0, d.boundary_length, 37, endpoint=False)
    bf = boundary_geometry(d, m, u)
    p1, p2 = bf.point
    n, T = np.array(bf.nu), np.array(bf.tangent)
    np.testing.assert_allclose(inner(m, p1, p2, n, n), 1.0, atol=1e-12)
    np.testing.assert_allclose(inner(m, p1, p2, T, T), 1.0, atol=1e-12)
    np.testing.assert_allclose(inner(m, p1, p2, n, T), 0.0, atol=1e-12)
    # rho decreases along nu
    eps = 1e-6
    assert np.all(d.rho(p1 + eps * n[0], p2 + eps * n[1]) < 0)


# ---------------------------------------------------------------- builtin geometries
def test_disc_rho_is_signed_distance(disc):
    _, d = disc
    assert d.rho(0.3, 0.4) == pytest.approx(0.5)
    assert d.E_full


def test_sphere_cap_domain():
    _, d = builtin_geometry("sphere_cap", theta_max=1.0)
    # boundary maps to colatitude 1.0 on the sphere
    b1, b2 = d.boundary_point(np.array([0.0, 0.2]))
    X, Y, Z = chart_to_sphere(b1, b2)
    np.testing.assert_allclose(np.arccos(Z), 1.0, atol=1e-14)
    np.testing.assert_allclose(sphere_to_chart(np.stack([X, Y, Z], -1)), np.stack([b1, b2]), atol=1e-14)


def test_hyperbolic_patch_valid():
    _, d = builtin_geometry("hyperbolic_halfplane_patch", center=(2, 0), r=0.8)
    assert d.params["center"] == (2.0, 0.0)


@pytest.mark.parametrize("name, params", [
    ("sphere_cap", {"theta_max": np.pi / 2}),
    ("sphere_cap", {"theta_max": 2.0}),
    ("hyperbolic_halfplane_patch", {"center": (0.5, 0.0), "r": 0.5}),
    ("disc_euclidean", {"radius": -1.0}),
    ("disc_euclidean", {"bogus": 1}),
    ("torus", {}),
])
def test_invalid_geometry(name, params):
    with pytest.raises(InvalidGeometryError):
        builtin_geometry(name, **params)


def test_E_intervals_wrap(disc):
    _, d = disc
    d2 = d.with_E([(-0.5, 0.5)])
    assert d2.in_E(np.array([0.0, 2 * np.pi - 0.1, 0.49]))[()].all()
    assert not d2.in_E(np.array([1.0]))[0]
    assert d2.E_measure == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        d.with_E([(1.0, 0.5)])


# ---------------------------------------------------------------- parallel transport
def test_transport_flat_is_constant(disc):
    m, _ = disc
    t = np.linspace(0, 1, 101)
    x = np.column_stack([np.cos(t), np.sin(2 * t)])
    xd = np.column_stack([-np.sin(t), 2 * np.cos(2 * t)])
    v = parallel_transport(m, t, x, xd, np.array([0.3, -1.2]))
    np.testing.assert_allclose(v, np.tile([0.3, -1.2], (101, 1)), atol=1e-15)


@pytest.mark.parametrize("theta0, frac", [(0.6, 1.0), (1.0, 0.25), (np.pi / 3, 0.5)])
def test_transport_holonomy_on_latitude(theta0, frac):
    m = sphere_polar_metric()
    n = 4001
    phi = np.linspace(0, 2 * np.pi * frac, n)
    x = np.column_stack([np.full(n, theta0), phi])
    xd = np.column_stack([np.zeros(n), np.ones(n)])
    v = parallel_transport(m, phi, x, xd, np.array([1.0, 0.0]))[-1]
    # angle against the orthonormal frame (d_theta, d_phi / sin theta)
    ang = np.arctan2(v[1] * np.sin(theta0), v[0])
    # the frame turns by 2 pi frac against a parallel field, the vector by 2 pi frac (1 - cos theta)
    expected = -2 * np.pi * frac * np.cos(theta0)
    assert abs(np.angle(np.exp(1j * (ang - expected)))) < 1e-6
    hol = 2 * np.pi * frac + ang
    assert abs(np.angle(np.exp(1j * (hol - 2 * np.pi * (1 - np.cos(theta0)) * frac)))) < 1e-6


def test_transport_preserves_norm_along_geodesic(geometry, rng):
    name, m, d = geometry
    c = d.params["center"]
    g = metric_at(m, c).g
    xi = g @ np.array([0.6, 0.8])
    seg = integrate_cogeodesic(m, c, xi / np.sqrt(xi @ np.linalg.solve(g, xi)), 0.5, 1e-3)
    v0 = np.array([0.7, -0.2])
    v = parallel_transport(m, seg.t, seg.x, seg.v, v0)
    nrm = np.sqrt(inner(m, seg.x[:, 0], seg.x[:, 1], v.T, v.T))
    assert np.max(np.abs(nrm - nrm[0])) < 1e-9


def test_transport_outside_chart():
    m = halfplane_metric()
    t = np.linspace(0, 1, 5)
    x = np.column_stack([t - 0.5, 0 * t])
    with pytest.raises(OutOfChartError):
        parallel_transport(m, t, x, np.tile([1.0, 0.0], (5, 1)), np.array([1.0, 0.0]))


# ---------------------------------------------------------------- fields
@settings(max_examples=25, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_bilinear_interp_reproduces_affine(a, b):
    _, d = builtin_geometry("disc_euclidean")
    f = ScalarField.covering(d, 17, lambda x, y: 2 * x - 3 * y + 0.5)
    assert f(a, b) == pytest.approx(2 * a - 3 * b + 0.5, abs=1e-12)


def test_field_rejects_wrong_rank():
    with pytest.raises(ValidationError):
        ScalarField(np.zeros(4), 1.0, 1.0, 0.0, 0.0)


def test_circular_domain_boundary_param_roundtrip():
    d = circular_domain((0.5, -0.25), 0.7, "custom")
    u = np.linspace(0, d.boundary_length, 50, endpoint=False)
    np.testing.assert_allclose(d.boundary_param(*d.boundary_point(u)), u, atol=1e-12)
