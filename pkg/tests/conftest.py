import sys

import numpy as np
import pytest

from brl.geometry import builtin_geometry

GEOMETRIES = ("disc_euclidean", "sphere_cap", "hyperbolic_halfplane_patch")


@pytest.fixture(params=GEOMETRIES)
def geometry(request):
    """``(name, metric, domain)`` for each built-in geometry."""
    metric, domain = builtin_geometry(request.param)
    return request.param, metric, domain


@pytest.fixture
def disc():
    return builtin_geometry("disc_euclidean")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def interior_points(domain, n, rng, shrink=0.9):
    """Uniform random chart points in the inner ``shrink`` fraction of a circular domain."""
    c = np.asarray(domain.params.get("center", (0.0, 0.0)), dtype=float)
    x0, x1, y0, y1 = domain.bbox
    R = 0.5 * (x1 - x0)
    rad = shrink * R * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0, 2 * np.pi, size=n)
    return c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
