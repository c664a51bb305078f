import numpy as np
import pytest

from lipforge.expr import MapExpr
from lipforge.field import BumpStack
from lipforge.geometry import Segment, SegmentLedger
from lipforge.verify import (attainment_curve, check_coverage, check_exceptional_volume, check_segments,
                             check_separation, check_solution, check_stability, coverage_curve, exceptional_bound,
                             separation_bound)

ZERO = MapExpr.parse("0", 2)
ONE = MapExpr.parse("1", 2)


def _ledger(*scales):
    led = SegmentLedger(2)
    for i, segs in scales:
        centers = np.array([0.5 * (np.add(a, b)) for a, b in segs]).reshape(-1, 2)
        led.add_scale(i, centers, [Segment(a, b, i, k) for k, (a, b) in enumerate(segs)])
    return led


# -- coverage ----------------------------------------------------------------------


def test_coverage_below_ten_is_report_only(default_run, unit_square):
    c = check_coverage(default_run.ledger, unit_square, 4, n=10_000)
    assert c.mode == "report" and c.passed
    assert c.bound == 1.0


def test_coverage_trivial_when_bound_exceeds_diameter(unit_square):
    led = _ledger((1, [((0.45, 0.5), (0.55, 0.5))]))
    c = check_coverage(led, unit_square, 2, n=5000)
    assert c.measured <= 0.5 < c.bound


def test_coverage_is_monotone(default_run, unit_square):
    curve = coverage_curve(default_run.ledger, unit_square, [1, 2, 3, 4], n=20_000)
    assert np.all(np.diff(curve) <= 0)


# -- exceptional volume ------------------------------------------------------------


def test_exceptional_volume_small_i_is_trivial(default_run, unit_square):
    for i in (1, 2, 3, 4):
        c = check_exceptional_volume(default_run.ledger, unit_square, i, n=20_000)
        assert c.passed and c.bound >= 4096 / 2**i


@pytest.mark.parametrize("i, area", [(6, 1 - 0.5**2), (7, 1 - 0.75**2)])
def test_empty_ledger_gives_boundary_tube(unit_square, i, area):
    c = check_exceptional_volume(SegmentLedger(2), unit_square, i, M=4.0, n=200_000)
    assert c.measured == pytest.approx(area, abs=5e-3)


def test_exceptional_bound_formula():
    assert exceptional_bound(4.0, 1.0, 2, 13) == pytest.approx((256 + 4096) / 8192)


# -- separation ---------------------------------------------------------------------


def test_separation_vacuous_for_single_segment():
    c = check_separation(_ledger((3, [((0.4, 0.5), (0.6, 0.5))])), 3)
    assert c.passed and c.samples == 0


def test_separation_of_adjacent_balls():
    # two balls of radius 1/8 touching centres 2r apart; segments inside Phi(B)
    r = 0.125
    led = _ledger((3, [((0.5 - r * r, 0.3), (0.5 + r * r, 0.3)), ((0.5 - r * r, 0.3 + 2 * r), (0.5 + r * r, 0.3 + 2 * r))]))
    c = check_separation(led, 3)
    assert c.passed
    assert c.measured + separation_bound(3) == pytest.approx(2 * r, abs=1e-12)


def test_separation_flags_violating_pair():
    led = _ledger((2, [((0.1, 0.1), (0.3, 0.1)), ((0.1, 0.15), (0.3, 0.15))]))
    c = check_separation(led, 2)
    assert not c.passed
    assert c.measured == pytest.approx(0.05 - separation_bound(2))
    assert c.witness is not None


def test_default_run_separation(default_run):
    c = check_separation(default_run.ledger, 4)
    assert c.passed and c.samples > 0


# -- solution ------------------------------------------------------------------------


def test_solution_with_no_scales(unit_square):
    c = check_solution(BumpStack(ZERO), ONE, ZERO, unit_square, 0.03, SegmentLedger(2), 0, n_free=5000)
    parts = {p.name: p for p in c.parts}
    assert parts["boundary_exact"].passed
    assert parts["subsolution"].passed
    assert parts["attainment"].measured == 0.0


def test_solution_attains_where_data_already_saturates(unit_square):
    f = MapExpr.parse("x", 2)
    c = check_solution(BumpStack(f), ONE, f, unit_square, 0.03, SegmentLedger(2), 0, n_free=5000)
    parts = {p.name: p for p in c.parts}
    assert parts["attainment"].measured == 1.0
    assert c.passed


def test_default_run_solution(default_run, unit_square):
    c = check_solution(default_run.u, ONE, ZERO, unit_square, 0.03, default_run.ledger, 4)
    parts = {p.name: p for p in c.parts}
    assert c.passed
    assert parts["audit_subsolution"].measured <= 0.0
    assert parts["attainment"].measured >= 0.5


def test_attainment_curve_is_monotone(default_run, unit_square):
    curve = attainment_curve(default_run, ONE, unit_square, [1, 2, 3, 4], n=20_000)
    assert np.all(np.diff(curve) >= 0)
    assert curve[-1] >= 0.5


def test_stability_and_segments(default_run):
    assert check_stability(default_run).passed
    seg = check_segments(default_run, ONE)
    assert seg.passed and seg.samples == len(default_run.ledger)


def test_certificates_are_reproducible(default_run, unit_square):
    a = check_solution(default_run.u, ONE, ZERO, unit_square, 0.03, default_run.ledger, 4, n_free=20_000, seed=3)
    b = check_solution(default_run.u, ONE, ZERO, unit_square, 0.03, default_run.ledger, 4, n_free=20_000, seed=3)
    for p, q in zip(a.rows(), b.rows()):
        assert (p.name, p.passed, p.measured) == (q.name, q.passed, q.measured)
