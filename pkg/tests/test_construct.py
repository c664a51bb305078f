import numpy as np
import pytest

from lipforge.construct import (ConstructConfig, HProfile, OscillatorCeiling, OscillatorParams, PreconditionError,
                                _root, continuity_constant, h_profile, homotopy_eval, improve_ball, improve_packing,
                                improve_point, iterate, make_oscillator, support_samples)
from lipforge.expr import MapExpr
from lipforge.field import BumpStack, lip_on_segment, local_lip
from lipforge.geometry import Ball, FreeRegion, Packing, maximal_packing, phi_shrink

ZERO = MapExpr.parse("0", 2)
ONE = MapExpr.parse("1", 2)


def _u0():
    return BumpStack(ZERO)


# -- oscillators -----------------------------------------------------------------


def test_zero_t_gives_zero_bump():
    S = Ball([0.5, 0.5], 0.05)
    bump, cert = make_oscillator(S, 0.0)
    X = support_samples(S, 200)
    assert np.all(bump.evaluate(X) == 0.0)
    assert cert.passed


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 5.0])
def test_oscillator_certificate(t):
    S = Ball([0.5, 0.5], 0.05)
    bump, cert = make_oscillator(S, t, sup_psi=1.0)
    assert cert.measured >= 0.98 * t
    assert cert.passed and cert.t == t


def test_oscillator_with_fixed_amplitude():
    S = Ball([0.5, 0.5], 0.05)
    bump, cert = make_oscillator(S, 1.0, OscillatorParams(eps0=0.1))
    assert bump.eps0 == 0.1
    assert cert.measured >= 0.98


def test_amplitude_policy_and_direction_hash():
    p = OscillatorParams(seed=3)
    assert p.amplitude(0.1, 0.5) == pytest.approx(0.05 / 6.114484581, rel=1e-8)
    e1 = p.orient([0.25, 0.5], 2, 2)
    assert np.array_equal(e1, p.orient([0.25, 0.5], 2, 2))
    assert np.linalg.norm(e1) == pytest.approx(1.0)
    assert not np.array_equal(e1, OscillatorParams(seed=4).orient([0.25, 0.5], 2, 2))
    assert np.array_equal(OscillatorParams(direction="axis").orient([0.3, 0.3], 1, 2), [1.0, 0.0])


# -- h profile -------------------------------------------------------------------


def test_h_negative_at_zero_for_strict_subsolution():
    assert h_profile(_u0(), ONE, Ball([0.5, 0.5], 0.05), 0.0) == -1.0


def test_h_large_t():
    assert h_profile(_u0(), ONE, Ball([0.5, 0.5], 0.05), 2.0) >= 1 - 0.02


def test_h_is_lipschitz_in_t():
    S = Ball([0.5, 0.5], 0.05)
    X = support_samples(S, 512)
    template, _ = make_oscillator(S, 0.0, sup_psi=1.0)
    h = HProfile(_u0(), ONE, template, X)
    ts = np.linspace(0, 4.0, 20)
    vals = np.array([h(t)[0] for t in ts])
    C = continuity_constant(4.0, S.radius, template.eps0)
    diff = np.abs(vals[:, None] - vals[None, :])
    gap = np.abs(ts[:, None] - ts[None, :])
    assert np.all(diff <= C * gap + 1e-12)


def test_root_brackets_and_ceiling():
    calls = []

    def h(t):
        calls.append(t)
        return (t - 0.3, 0)

    T, hT, (lo, hi), _ = _root(h, 1e-3, 4.0)
    assert h(lo)[0] < 0 <= h(hi)[0]
    assert -1e-3 <= hT[0] <= 0 and T == pytest.approx(0.3, abs=1e-3)
    with pytest.raises(OscillatorCeiling):
        _root(lambda t: (-1.0, 0), 1e-3, 4.0)


# -- improve_point ---------------------------------------------------------------


def test_improve_point_hits_psi_at_witness():
    ball = Ball([0.5, 0.5], 0.1)
    v, res = improve_point(_u0(), ONE, ball, tol=1e-3)
    L = local_lip(v, res.witness)
    assert 1 - 1e-3 - 0.02 <= L <= 1.0
    assert res.bracket[0] < res.bracket[1]
    assert np.all(local_lip(v, res.audit) <= 1.0)


def test_improve_point_with_saturated_input_is_a_no_op():
    u = BumpStack(MapExpr.parse("x", 2))
    v, res = improve_point(u, ONE, Ball([0.5, 0.5], 0.1))
    assert v is u and res.T == 0.0 and res.bump is None


def test_improve_point_rejects_supersolution():
    u = BumpStack(MapExpr.parse("2*x", 2))
    with pytest.raises(PreconditionError) as info:
        improve_point(u, ONE, Ball([0.5, 0.5], 0.1))
    assert info.value.witness is not None


def test_improve_point_leaves_outside_untouched():
    ball = Ball([0.5, 0.5], 0.1)
    u = BumpStack(MapExpr.parse("0.3*sin(x) + 0.2*y", 2))
    v, _ = improve_point(u, ONE, ball)
    rng = np.random.default_rng(0)
    Y = rng.uniform(0, 1, (400, 2))
    Y = Y[np.linalg.norm(Y - 0.5, axis=1) >= 0.05][:100]
    assert np.array_equal(u(Y), v(Y))


# -- improve_ball / improve_packing ---------------------------------------------


def test_improve_ball_finds_a_good_segment():
    W = Ball([0.5, 0.5], 0.1)
    v, seg, res = improve_ball(_u0(), ONE, W, 0.1)
    assert lip_on_segment(v, seg, 1000).value > 0.9
    assert res.lip > res.psi_max - 0.1 and res.psi_max == 1.0
    # the segment stays strictly inside W
    assert max(np.linalg.norm(seg.a - W.center), np.linalg.norm(seg.b - W.center)) < W.radius


def test_improve_packing_empty():
    u = _u0()
    p = Packing(1, 0.5, np.empty((0, 2)), 0.0625)
    v, segs, res = improve_packing(u, ONE, p, 0.5)
    assert v is u and segs == [] and res == []


def test_improve_packing_single_ball_equals_improve_ball():
    p = Packing(3, 0.125, np.array([[0.5, 0.5]]), 0.125 / 8)
    v, segs, _ = improve_packing(_u0(), ONE, p, 0.125)
    w, seg, _ = improve_ball(_u0(), ONE, phi_shrink(p.balls()[0]), 0.125, scale=3, parent=0)
    X = np.random.default_rng(1).random((500, 2))
    assert np.array_equal(v(X), w(X))
    assert np.array_equal(segs[0].a, seg.a) and np.array_equal(segs[0].b, seg.b)


def test_improve_packing_two_balls_disjoint_supports(unit_square):
    p = maximal_packing(FreeRegion(unit_square), 0.25, scale=2)
    assert len(p) == 2
    u = BumpStack(MapExpr.parse("0.1*x", 2))
    v, _, _ = improve_packing(u, ONE, p, 0.25)
    a = v.arrays
    assert np.linalg.norm(a.centers[0] - a.centers[1]) > a.radius[0] + a.radius[1]
    X = np.random.default_rng(2).random((2000, 2))
    out = np.all(np.linalg.norm(X[:, None] - p.centers[None], axis=2) >= 0.25**2, axis=1)
    assert np.array_equal(u(X[out]), v(X[out]))


def test_improve_packing_thread_count_does_not_matter(unit_square):
    p = maximal_packing(FreeRegion(unit_square), 0.125, scale=3)
    v1, s1, _ = improve_packing(_u0(), ONE, p, 0.125, threads=1)
    v4, s4, _ = improve_packing(_u0(), ONE, p, 0.125, threads=4)
    X = np.random.default_rng(3).random((1000, 2))
    assert np.array_equal(v1(X), v4(X))
    assert all(np.array_equal(a.a, b.a) for a, b in zip(s1, s4))


# -- iterate ---------------------------------------------------------------------


def test_first_scale_is_empty(unit_square):
    res = iterate(ZERO, ONE, unit_square, 1)
    assert len(res.u) == 0 and len(res.ledger) == 0
    assert res.report.scales[0].balls == 0


def test_segments_meet_their_deficit(default_run):
    for i in default_run.ledger.scales:
        for s in default_run.ledger.new_at(i):
            assert lip_on_segment(default_run.u, s, 1000).value > 1.0 - 2.0**-i


def test_stability_on_scale_two_segments(default_run):
    P = np.vstack([s.points(200) for s in default_run.ledger.new_at(2)])
    assert np.array_equal(default_run.snapshot(2)(P), default_run.u(P))


def test_bumps_localised_in_parent_shrink(default_run):
    a = default_run.u.arrays
    for k in range(len(default_run.u)):
        i, parent = int(a.scale[k]), int(a.parent[k])
        B = default_run.packings[i - 1].balls()[parent]
        inner = phi_shrink(B)
        assert np.linalg.norm(a.centers[k] - inner.center) + a.radius[k] <= inner.radius


def test_ledger_bijection_with_packings(default_run):
    for i, p in zip(default_run.ledger.scales, default_run.packings):
        assert len(default_run.ledger.new_at(i)) == len(p)


def test_report_rows(default_run):
    rows = default_run.report.scales
    assert [r.scale for r in rows] == [1, 2, 3, 4]
    assert all(r.balls == r.segments for r in rows)
    for r in rows[1:]:
        assert r.max_deficit < 2.0**-r.scale
        assert r.max_h <= 0.0


def test_bracket_before_bisection(default_run):
    for results in default_run.balls.values():
        for r in results:
            if r.point.bump is not None:
                lo, hi = r.point.bracket
                assert lo < hi and r.point.h_0 < 0


def test_subsolution_safety(default_run, unit_square):
    X = unit_square.sample_free(10_000, np.random.default_rng(99))
    assert np.max(local_lip(default_run.u, X)) - 1.0 <= 0.03
    a = default_run.u.arrays
    audit = np.vstack([support_samples(Ball(a.centers[k], a.radius[k]), int(a.samples[k]))
                       for k in range(len(default_run.u))])
    assert np.max(local_lip(default_run.u, audit)) <= 1.0


def test_adversarial_points_near_bump_rims(default_run, unit_square):
    X = unit_square.halton_free(100_000)
    assert np.max(local_lip(default_run.u, X)) <= 1.0
    a = default_run.u.arrays
    rng = np.random.default_rng(5)
    k = rng.integers(0, len(a.radius), 100)
    theta = rng.uniform(0, 2 * np.pi, 100)
    rho = a.radius[k] * rng.uniform(0.5, 1.0, 100)
    Y = a.centers[k] + rho[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    assert np.max(local_lip(default_run.u, Y)) <= 1.0 + 1e-3


def test_precondition_violation(unit_square):
    with pytest.raises(PreconditionError) as info:
        iterate(MapExpr.parse("2*x", 2), ONE, unit_square, 2)
    assert info.value.excess == pytest.approx(1.0)
    assert unit_square.in_free(info.value.witness[None])[0]


def test_iterate_is_deterministic(unit_square):
    cfg = ConstructConfig(params=OscillatorParams(seed=7))
    a = iterate(ZERO, ONE, unit_square, 3, cfg)
    b = iterate(ZERO, ONE, unit_square, 3, cfg)
    for k in a.u.arrays.__slots__:
        assert np.array_equal(getattr(a.u.arrays, k), getattr(b.u.arrays, k))


def test_homotopy_endpoints(default_run, unit_square):
    X = unit_square.halton_free(500)
    assert np.array_equal(homotopy_eval(default_run.u, 0.0, X), ZERO(X))
    assert np.array_equal(homotopy_eval(default_run.u, 1.0, X), default_run.u(X))
    G = unit_square.sample_gamma(200, np.random.default_rng(0))
    for s in (0.0, 0.3, 1.0):
        assert np.array_equal(homotopy_eval(default_run.u, s, G), ZERO(G))
    with pytest.raises(ValueError):
        homotopy_eval(default_run.u, 1.5, X)
