import numpy as np
import pytest

from lipforge.baseline import boundary_violation, compare, fast_march, mcshane_extend, weighted_distance
from lipforge.expr import MapExpr
from lipforge.field import BumpStack
from lipforge.geometry import make_domain

ZERO = MapExpr.parse("0", 2)
ONE = MapExpr.parse("1", 2)
CENTRE = [0.5, 0.5]


@pytest.fixture(scope="module")
def point_gamma():
    return make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [CENTRE])], "exterior": False})


@pytest.fixture(scope="module")
def incompatible():
    """f is a narrow spike on a small disk, so it changes faster than psi = 1 allows."""
    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("disk", [0.3, 0.5], 0.1)], "exterior": True})
    f = MapExpr.parse("0.5 * exp(-((x - 0.3) * (x - 0.3) + (y - 0.5) * (y - 0.5)) / 0.0009)", 2)
    return dom, f


def _cone(grid):
    return np.linalg.norm(grid.points() - CENTRE, axis=1)


# -- weighted distance ---------------------------------------------------------------


def test_point_distance_is_a_cone(point_gamma):
    h = 1 / 64
    g = weighted_distance(point_gamma, ONE, h)
    exact = _cone(g)
    err = g.values.ravel() - exact
    assert np.all(err >= -1e-12)  # lattice paths are never shorter than straight lines
    assert np.all(err <= 2 * h * np.sqrt(2) + 0.08 * exact)


def test_weighted_distance_is_homogeneous(point_gamma):
    a = weighted_distance(point_gamma, ONE, 1 / 32)
    b = weighted_distance(point_gamma, MapExpr.parse("2", 2), 1 / 32)
    assert np.array_equal(b.values, 2 * a.values)


def test_gamma_nodes_are_zero(point_gamma):
    g = weighted_distance(point_gamma, ONE, 1 / 32)
    assert g.gamma.sum() == 1
    assert g.values.ravel()[g.index_of(CENTRE)][0] == 0.0


def test_triangle_inequality_on_lattice():
    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [[0.25, 0.25], [0.75, 0.6]])],
                       "exterior": False})
    psi = MapExpr.parse("1 + 0.5 * sin(3 * x) * y", 2)
    g = weighted_distance(dom, psi, 1 / 32)
    # d(x, Gamma) <= d(x, y) + d(y, Gamma); lattice neighbours give d(x, y) <= edge weight
    v = g.values
    h = g.spacing
    P = g.points().reshape(v.shape + (2,))
    pv = psi.scalar(P.reshape(-1, 2)).reshape(v.shape)
    for dx, dy in [(1, 0), (0, 1), (1, 1), (1, -1)]:
        a = (slice(0, v.shape[0] - dx), slice(max(0, -dy), v.shape[1] - max(dy, 0)))
        b = (slice(dx, None), slice(max(dy, 0), v.shape[1] + min(dy, 0) or None))
        w = h * np.hypot(dx, dy) * 0.5 * (pv[a] + pv[b])
        assert np.all(np.abs(v[a] - v[b]) <= w + 1e-12)


# -- McShane ---------------------------------------------------------------------------


def test_mcshane_with_zero_data_is_distance(point_gamma):
    m = mcshane_extend(ZERO, ONE, point_gamma, 1 / 32)
    assert np.array_equal(m.values, weighted_distance(point_gamma, ONE, 1 / 32).values)
    assert m.certificate.passed


def test_mcshane_two_points_is_min_of_cones():
    a, b = [0.25, 0.5], [0.75, 0.5]
    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [a, b])], "exterior": False})
    m = mcshane_extend(MapExpr.parse("0.2", 2), ONE, dom, 1 / 32)
    da = weighted_distance(make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [a])]}), ONE, 1 / 32)
    db = weighted_distance(make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [b])]}), ONE, 1 / 32)
    # the datum is added inside the sweep, so equality holds up to one rounding
    assert np.allclose(m.values, 0.2 + np.minimum(da.values, db.values), rtol=0, atol=1e-12)
    # symmetric under x -> 1 - x
    assert np.array_equal(m.values, m.values[::-1])


def test_mcshane_is_one_lipschitz_for_psi_distance():
    rng = np.random.default_rng(4)
    G = rng.uniform(0.1, 0.9, (10, 2))
    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", G)], "exterior": False})
    # gradient norm is about 0.58, so the data is compatible
    f = MapExpr.parse("0.5 * x + 0.3 * y", 2)
    h = 1 / 32
    m = mcshane_extend(f, ONE, dom, h)
    assert m.certificate.passed
    # each Gamma node acts as a source; compare against its lattice distance field
    for g in G:
        single = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [g])]})
        d = weighted_distance(single, ONE, h).values
        src = m.values.ravel()[m.index_of(g)][0]
        assert np.all(np.abs(m.values - src) <= d + 1e-12)


def test_mcshane_flags_incompatible_pair(incompatible):
    dom, f = incompatible
    m = mcshane_extend(f, ONE, dom, 1 / 64)
    assert not m.certificate.passed
    assert m.certificate.measured > 0 and m.certificate.witness.shape == (4,)


# -- fast marching -----------------------------------------------------------------------


def test_fast_march_box_centre(unit_square):
    h = 1 / 256
    g = fast_march(unit_square, ONE, ZERO, h)
    assert g.values.max() == pytest.approx(0.5, abs=2 * h)
    assert g.certificate.passed


def test_fast_march_cone_within_2h(point_gamma):
    h = 1 / 256
    g = fast_march(point_gamma, ONE, ZERO, h)
    assert np.max(np.abs(g.values.ravel() - _cone(g))) <= 2 * h


def test_fast_march_error_halves(point_gamma):
    errs = []
    for h in (1 / 32, 1 / 64, 1 / 128):
        g = fast_march(point_gamma, ONE, ZERO, h)
        errs.append(np.max(np.abs(g.values.ravel() - _cone(g))))
    assert errs[1] / errs[0] <= 0.7 and errs[2] / errs[1] <= 0.7


def test_fast_march_is_monotone_in_data():
    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [("points", [[0.2, 0.2], [0.8, 0.7]])],
                       "exterior": True})
    lo = fast_march(dom, ONE, MapExpr.parse("0.1 * x", 2), 1 / 64)
    hi = fast_march(dom, ONE, MapExpr.parse("0.1 * x + 0.05 * y * y", 2), 1 / 64)
    assert np.all(hi.values >= lo.values - 1e-12)


def test_fast_march_misses_incompatible_data(incompatible):
    dom, f = incompatible
    g = fast_march(dom, ONE, f, 1 / 128)
    assert not g.certificate.passed
    assert g.certificate.measured > 0.1
    u = BumpStack(f)
    report = compare(u, g, f)
    assert report["baseline_boundary_violation"] > 0
    assert report["map_boundary_exact"] and report["map_boundary_violation"] == 0.0


# -- compare -----------------------------------------------------------------------------


def test_compare_identical_is_zero(unit_square):
    g = fast_march(unit_square, ONE, ZERO, 1 / 32)
    r = compare(g, g)
    assert r["sup_abs"] == r["mean_abs"] == r["max_excess"] == 0.0


def test_constructed_map_below_maximal_subsolution(default_run, unit_square):
    g = fast_march(unit_square, ONE, ZERO, 1 / 128)
    r = compare(default_run.u, g, ZERO)
    assert r["max_excess"] <= 2 / 128
    assert r["map_boundary_exact"]


def test_boundary_violation_on_exact_grid(unit_square):
    g = fast_march(unit_square, ONE, ZERO, 1 / 16)
    assert boundary_violation(g, ZERO).measured == 0.0
