import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brl.errors import (ImmediateExitError, NonUnitCovectorError, OutOfChartError, PolarCoordinatesError,
                        TangentialRayError, TrappedRayError, ValidationError)
from brl.geometry import (Metric, boundary_geometry, builtin_geometry, halfplane_metric, inner, metric_at,
                          sphere_to_chart, stereographic_sphere_metric)
from brl.raytrace import (classify_ray, exp_and_polar, integrate_cogeodesic, inward_direction,
                          reflect_direction, trace_broken_ray, trace_broken_rays, trace_to_boundary)

from conftest import interior_points


def unit_covector(metric, x, v):
    g = metric_at(metric, x).g
    v = np.asarray(v, dtype=float)
    return g @ v / np.sqrt(v @ g @ v)


# ---------------------------------------------------------------- closed-form trajectories
def halfplane_circle(R, alpha, t):
    return np.array([R * np.sin(t), R * np.cos(t) + alpha])


def test_euclidean_straight_line(disc):
    m, _ = disc
    seg = integrate_cogeodesic(m, (0.0, 0.0), (1.0, 0.0), 1.0, 1e-3)
    np.testing.assert_allclose(seg.x[-1], (1.0, 0.0), atol=1e-14)


def test_hyperbolic_geodesic_stays_on_circle():
    m = halfplane_metric()
    R, alpha, t0 = 1.5, 0.3, 1.1
    x0 = halfplane_circle(R, alpha, t0)
    xi0 = unit_covector(m, x0, (R * np.cos(t0), -R * np.sin(t0)))
    seg = integrate_cogeodesic(m, x0, xi0, 3.0, 1e-3)
    dist = np.abs(np.hypot(seg.x[:, 0], seg.x[:, 1] - alpha) - R)
    assert dist.max() < 1e-6


def test_sphere_geodesic_is_great_circle():
    m = stereographic_sphere_metric()
    P = np.array([np.sin(0.4), 0.0, np.cos(0.4)])
    T = np.array([0.3, 0.8, 0.0])
    T -= (T @ P) * P
    T /= np.linalg.norm(T)
    s = np.linspace(0.0, 2.5, 6)
    circle = np.outer(np.cos(s), P) + np.outer(np.sin(s), T)
    x0 = np.array(sphere_to_chart(P))
    # chart velocity of the stereographic image at s = 0
    v0 = T[:2] / (1 + P[2]) - P[:2] * T[2] / (1 + P[2]) ** 2
    seg = integrate_cogeodesic(m, x0, unit_covector(m, x0, v0), 2.5, 1e-3)
    idx = np.searchsorted(seg.t, s - 1e-12)
    np.testing.assert_allclose(seg.x[idx], np.stack(sphere_to_chart(circle), -1), atol=1e-6)


@pytest.mark.parametrize("name, x0, v0", [
    ("disc_euclidean", (0.0, 0.0), (0.6, 0.8)),
    ("sphere_cap", (0.5, 0.0), (0.0, 1.0)),
    ("hyperbolic_halfplane_patch", (2.0, 0.0), (0.0, 1.0)),
])
def test_hamiltonian_drift_length_ten(name, x0, v0):
    m, _ = builtin_geometry(name)
    seg = integrate_cogeodesic(m, x0, unit_covector(m, x0, v0), 10.0, 1e-3)
    assert np.max(np.abs(seg.hamiltonian(m) - 0.5)) < 1e-9


def test_rk4_fourth_order():
    m = halfplane_metric()
    R, alpha, t0 = 1.5, 0.3, 1.1
    x0 = halfplane_circle(R, alpha, t0)
    xi0 = unit_covector(m, x0, (R * np.cos(t0), -R * np.sin(t0)))
    ref = integrate_cogeodesic(m, x0, xi0, 2.0, 1e-3).x[-1]
    e1 = np.linalg.norm(integrate_cogeodesic(m, x0, xi0, 2.0, 0.1).x[-1] - ref)
    e2 = np.linalg.norm(integrate_cogeodesic(m, x0, xi0, 2.0, 0.05).x[-1] - ref)
    assert e1 / e2 == pytest.approx(16.0, rel=0.25)


def test_backward_integration_retraces(disc):
    m = halfplane_metric()
    x0 = np.array([2.0, 0.1])
    xi0 = unit_covector(m, x0, (0.3, 1.0))
    fw = integrate_cogeodesic(m, x0, xi0, 1.3, 1e-3)
    bw = integrate_cogeodesic(m, fw.x[-1], fw.xi[-1], -1.3, 1e-3)
    np.testing.assert_allclose(bw.x[-1], x0, atol=1e-10)


def test_non_unit_covector_rejected(disc):
    m, _ = disc
    with pytest.raises(NonUnitCovectorError):
        integrate_cogeodesic(m, (0.0, 0.0), (2.0, 0.0), 1.0)


def test_non_unit_covector_renormalized_within_tolerance(disc):
    m, _ = disc
    seg = integrate_cogeodesic(m, (0.0, 0.0), (1.0 + 1e-7, 0.0), 0.5)
    assert seg.hamiltonian(m)[0] == pytest.approx(0.5, abs=1e-15)


def test_leaving_chart():
    m = Metric(lambda a, b: (1.0 + 0 * a, 0 * a, 1.0 + 0 * a), in_chart=lambda a, b: np.asarray(a) < 1.0)
    with pytest.raises(OutOfChartError):
        integrate_cogeodesic(m, (0.5, 0.0), (1.0, 0.0), 1.0, 1e-2)


# ---------------------------------------------------------------- boundary tracing
def test_diameter_length(disc):
    m, d = disc
    seg = trace_to_boundary(m, d, (-1.0, 0.0), (1.0, 0.0))
    np.testing.assert_allclose(seg.x[-1], (1.0, 0.0), atol=1e-9)
    assert seg.length == pytest.approx(2.0, abs=1e-9)
    assert abs(d.rho(*seg.x[-1])) < 1e-12


@pytest.mark.parametrize("dd", [0.5, 0.1, 0.9])
def test_chord_length(disc, dd):
    m, d = disc
    seg = trace_to_boundary(m, d, (-np.sqrt(1 - dd * dd), dd), (1.0, 0.0))
    assert seg.length == pytest.approx(2 * np.sqrt(1 - dd * dd), abs=1e-8)


def test_chord_length_radius_two():
    m, d = builtin_geometry("disc_euclidean", radius=2.0)
    seg = trace_to_boundary(m, d, (0.0, -0.7), (1.0, 0.0))
    seg0 = trace_to_boundary(m, d, (0.0, -0.7), (-1.0, 0.0))
    assert seg.length + seg0.length == pytest.approx(2 * np.sqrt(4 - 0.49), abs=1e-8)


def test_immediate_exit(disc):
    m, d = disc
    with pytest.raises(ImmediateExitError):
        trace_to_boundary(m, d, (1.0, 0.0), (1.0, 0.0))


def test_trapped_ray(disc):
    m, d = disc
    with pytest.raises(TrappedRayError):
        trace_to_boundary(m, d, (0.0, 0.0), (1.0, 0.0), max_length=0.5)


def test_time_reversal(geometry, rng):
    name, m, d = geometry
    x1, x2 = interior_points(d, 5, rng, shrink=0.5)
    for a, b in zip(x1, x2):
        ang = rng.uniform(0, 2 * np.pi)
        xi = unit_covector(m, (a, b), (np.cos(ang), np.sin(ang)))
        fw = trace_to_boundary(m, d, (a, b), xi)
        back = integrate_cogeodesic(m, fw.x[-1], -fw.xi[-1], fw.length, 1e-3)
        assert np.linalg.norm(back.x[-1] - (a, b)) < 1e-6


# ---------------------------------------------------------------- reflection law
def test_reflect_normal_incidence(disc):
    m, _ = disc
    np.testing.assert_allclose(reflect_direction(m, (0, -1), (0.0, -1.0), (0.0, -1.0)), (0.0, 1.0))


def test_reflect_mirror_law(disc):
    m, _ = disc
    out = reflect_direction(m, (0, -1), np.array([1.0, -1.0]) / np.sqrt(2), (0.0, -1.0))
    np.testing.assert_allclose(out, np.array([1.0, 1.0]) / np.sqrt(2), atol=1e-15)


def test_reflection_postconditions(geometry, rng):
    _, m, d = geometry
    u = rng.uniform(0, d.boundary_length, 1000)
    bf = boundary_geometry(d, m, u)
    p1, p2 = bf.point
    nu = np.array(bf.nu)
    T = np.array(bf.tangent)
    v = rng.standard_normal((2, 1000))
    w = reflect_direction(m, (p1, p2), v, nu)
    assert np.max(np.abs(inner(m, p1, p2, w, nu) + inner(m, p1, p2, v, nu))) < 1e-12
    assert np.max(np.abs(inner(m, p1, p2, w, T) - inner(m, p1, p2, v, T))) < 1e-12
    assert np.max(np.abs(inner(m, p1, p2, w, w) - inner(m, p1, p2, v, v))) < 1e-12
    # covector form: tangential part of the covector is kept
    xi = rng.standard_normal((2, 1000))
    eta = reflect_direction(m, (p1, p2), xi, nu, covector=True)
    assert np.max(np.abs((eta[0] * T[0] + eta[1] * T[1]) - (xi[0] * T[0] + xi[1] * T[1]))) < 1e-12


# ---------------------------------------------------------------- broken rays
def test_broken_ray_diameter(disc):
    m, d = disc
    ray = trace_broken_ray(m, d, 0.0, np.array([-1.0, 0.0]), 0)
    assert len(ray.segments) == 1 and not ray.reflections
    np.testing.assert_allclose(ray.exit.point, (-1.0, 0.0), atol=1e-9)
    assert ray.exits_through_E
    assert ray.total_length == pytest.approx(2.0, abs=1e-9)


def test_billiard_closes_after_two_reflections(disc):
    m, d = disc
    dE = d.with_E([(-0.05, 0.05)])
    ray = trace_broken_ray(m, dE, 0.0, np.pi / 3, 2)
    assert len(ray.reflections) == 2
    np.testing.assert_allclose(ray.exit.point, (1.0, 0.0), atol=1e-6)
    rot = [np.angle(r.point[0] + 1j * r.point[1]) for r in ray.reflections]
    np.testing.assert_allclose(np.mod(rot, 2 * np.pi), [2 * np.pi / 3, 4 * np.pi / 3], atol=1e-6)
    assert ray.total_length == pytest.approx(3 * np.sqrt(3), abs=1e-8)


def chord_angle(ray, k):
    """Angles of the incoming and outgoing directions with the outward normal at reflection ``k``."""
    r = ray.reflections[k]
    n = r.nu / np.linalg.norm(r.nu)
    return np.arccos(np.clip(r.incoming @ n, -1, 1)), np.arccos(np.clip(-(r.outgoing @ n), -1, 1))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, np.pi - 0.2), st.floats(0.0, 2 * np.pi))
def test_billiard_angle_invariance(angle, u0):
    m, d = builtin_geometry("disc_euclidean")
    dE = d.with_E([(u0 - 0.01, u0 + 0.01)])
    ray = trace_broken_ray(m, dE, u0, angle, 4)
    inc = abs(np.pi / 2 - angle)
    for k in range(len(ray.reflections)):
        a_in, a_out = chord_angle(ray, k)
        assert a_in == pytest.approx(inc, abs=1e-8)
        assert a_out == pytest.approx(inc, abs=1e-8)


def test_max_reflections_small_arc_distinct_points(disc):
    m, d = disc
    dE = d.with_E([(0.0, 0.3)])
    ray = trace_broken_ray(m, dE, 0.1, 1.234, 5)
    assert len(ray.reflections) <= 5
    pts = [r.point for r in ray.reflections]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert np.hypot(*(pts[i] - pts[j])) > 1e-6


def test_entry_outside_E(disc):
    m, d = disc
    with pytest.raises(ValidationError):
        trace_broken_ray(m, d.with_E([(0.0, 0.5)]), 1.0, np.pi / 2)


def test_tangential_entry(disc):
    m, d = disc
    with pytest.raises(TangentialRayError):
        trace_broken_ray(m, d, 0.0, 1e-4)


def test_outward_entry(disc):
    m, d = disc
    with pytest.raises(ImmediateExitError):
        trace_broken_ray(m, d, 0.0, np.array([1.0, 0.0]))


def test_inward_direction_is_unit_and_inward(geometry):
    _, m, d = geometry
    u = 0.3 * d.boundary_length
    v = inward_direction(m, d, u, 0.7)
    bf = boundary_geometry(d, m, u)
    p = [float(c) for c in bf.point]
    assert float(inner(m, p[0], p[1], v, v)) == pytest.approx(1.0, abs=1e-12)
    assert float(inner(m, p[0], p[1], v, [float(c) for c in bf.nu])) == pytest.approx(-np.sin(0.7), abs=1e-12)


def test_batch_matches_single(geometry):
    _, m, d = geometry
    us = np.array([0.1, 0.5, 1.0]) * d.boundary_length / 2
    angs = np.array([0.6, 1.5, 2.4])
    rays, errs = trace_broken_rays(m, d, us, angs)
    for u, a, r, e in zip(us, angs, rays, errs):
        assert e is None
        single = trace_broken_ray(m, d, u, a)
        np.testing.assert_array_equal(r.segments[0].x, single.segments[0].x)


# ---------------------------------------------------------------- classification
def test_classify_diameter(disc):
    m, d = disc
    ray = trace_broken_ray(m, d, 0.0, np.pi / 2)
    c = classify_ray(ray, domain=d)
    assert c.nontangential and c.self_intersections == []


def test_classify_entry_margin_below_tolerance(disc):
    m, d = disc
    ray = trace_broken_ray(m, d, 0.0, 1e-5, 0, tangency_tol=1e-6)
    assert ray.tangency_margin == pytest.approx(1e-5, rel=1e-3)
    assert not classify_ray(ray, tangency_tol=1e-3).nontangential


def segment_crossings(points):
    """Interior crossings between the straight chords of a billiard polygon (brute force)."""
    chords = list(zip(points[:-1], points[1:]))
    out = []
    for i in range(len(chords)):
        for j in range(i + 1, len(chords)):
            (P, Q), (R, S) = chords[i], chords[j]
            d1, d2 = Q - P, S - R
            den = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(den) < 1e-14:
                continue
            w = R - P
            a = (w[0] * d2[1] - w[1] * d2[0]) / den
            b = (w[0] * d1[1] - w[1] * d1[0]) / den
            if 1e-9 < a < 1 - 1e-9 and 1e-9 < b < 1 - 1e-9:
                out.append((i, a, j, b))
    return out


def test_star_polygon_five_crossings(disc):
    m, d = disc
    dE = d.with_E([(-0.01, 0.01)])
    ray = trace_broken_ray(m, dE, 0.0, 2 * np.pi / 5, 4)
    assert len(ray.reflections) == 4
    np.testing.assert_allclose(ray.exit.point, (1.0, 0.0), atol=1e-6)
    c = classify_ray(ray, domain=dE)
    pts = np.array([ray.entry.point] + [r.point for r in ray.reflections] + [ray.exit.point])
    assert len(segment_crossings(pts)) == 5
    assert len(c.self_intersections) == 5
    for t1, t2 in c.self_intersections:
        assert t1 < t2


def test_classify_agrees_with_brute_force(disc):
    m, d = disc
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 50:
        u0 = rng.uniform(0, 2 * np.pi)
        ang = rng.uniform(0.15, np.pi - 0.15)
        dE = d.with_E([(u0 - 0.05, u0 + 0.05)])
        ray = trace_broken_ray(m, dE, u0, ang, int(rng.integers(1, 5)), step=2e-3)
        pts = np.array([ray.entry.point] + [r.point for r in ray.reflections] + [ray.exit.point])
        oracle = segment_crossings(pts)
        # skip grazing configurations the rasterized search cannot resolve
        lens = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        near = [o for o in oracle if min(o[1], 1 - o[1]) * lens[o[0]] < 1e-2
                or min(o[3], 1 - o[3]) * lens[o[2]] < 1e-2]
        if near:
            continue
        found = classify_ray(ray, domain=dE).self_intersections
        assert len(found) == len(oracle)
        bounds = ray.segment_bounds()
        want = sorted((bounds[i] + a * lens[i], bounds[j] + b * lens[j]) for i, a, j, b in oracle)
        np.testing.assert_allclose(np.array(found).reshape(-1, 2), np.array(want).reshape(-1, 2), atol=1e-6)
        checked += 1


# ---------------------------------------------------------------- polar normal coordinates
def test_polar_euclidean(disc):
    m, d = disc
    res = exp_and_polar(m, (-1.5, 0.0), r=np.array([0.5, 1.0, 2.0]), theta=np.array([0.0, 0.3, -0.2]), domain=d)
    np.testing.assert_allclose(res.sqrt_det_g0, [0.5, 1.0, 2.0])
    inv = exp_and_polar(m, (-1.5, 0.0), target=res.point, domain=d)
    np.testing.assert_allclose(inv.r, [0.5, 1.0, 2.0], atol=1e-14)
    np.testing.assert_allclose(inv.theta, [0.0, 0.3, -0.2], atol=1e-14)


def test_polar_sphere_jacobi_is_sin():
    m = stereographic_sphere_metric()
    r = np.array([0.2, 0.8, 1.5, 2.5])
    res = exp_and_polar(m, (0.1, -0.2), r=r, theta=np.array([0.1, 1.0, 2.0, 3.0]))
    np.testing.assert_allclose(res.sqrt_det_g0, np.sin(r), atol=1e-8)


def test_polar_hyperbolic_jacobi_is_sinh():
    m = halfplane_metric()
    r = np.array([0.2, 0.8, 1.5])
    res = exp_and_polar(m, (2.0, 0.0), r=r, theta=np.array([0.1, 1.0, 2.0]))
    np.testing.assert_allclose(res.sqrt_det_g0, np.sinh(r), atol=1e-8)


def test_polar_inverse_roundtrip_hyperbolic():
    m, d = builtin_geometry("hyperbolic_halfplane_patch")
    omega = (1.0, 0.0)
    _, (b1, b2) = d.boundary_samples(16)
    inv = exp_and_polar(m, omega, target=(b1, b2), domain=d)
    fw = exp_and_polar(m, omega, r=inv.r, theta=inv.theta)
    np.testing.assert_allclose(fw.point[0], b1, atol=1e-9)
    np.testing.assert_allclose(fw.point[1], b2, atol=1e-9)
    np.testing.assert_allclose(inv.sqrt_det_g0, np.sinh(inv.r), atol=1e-8)


def test_polar_conjugate_point():
    m = stereographic_sphere_metric()
    with pytest.raises(PolarCoordinatesError):
        exp_and_polar(m, (0.0, 0.0), r=np.array([3.3]), theta=np.array([0.2]))


def test_polar_centre_inside_domain(disc):
    m, d = disc
    with pytest.raises(ValidationError):
        exp_and_polar(m, (0.0, 0.0), r=np.array([1.0]), theta=np.array([0.0]), domain=d)
