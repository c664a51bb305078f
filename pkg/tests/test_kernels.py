"""The numba and numpy backends must agree on every kernel."""

import numpy as np
import pytest

from lipforge import _accel, kernels
from lipforge.baseline import _neighbours

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not importable")


def both(fn):
    out = []
    for be in ("numba", "numpy"):
        with _accel.use_backend(be):
            out.append(fn())
    return out


def test_backend_switch_restores():
    before = _accel.backend()
    with _accel.use_backend("numpy"):
        assert _accel.backend() == "numpy"
    assert _accel.backend() == before
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")


def test_pair_lip_max(rng):
    P = rng.random((150, 3))
    U = rng.random((150, 2))
    a, b = both(lambda: kernels.pair_lip_max(P, U))
    assert a == b


def test_stamp_and_greedy_scan(rng):
    side = 48
    A = rng.random((6, 2))
    B = A + 0.1 * rng.standard_normal((6, 2))
    offs = np.array([(i, j) for i in range(-4, 5) for j in range(-4, 5) if 0 < i * i + j * j < 16])

    def run():
        mask = np.ones(side * side, bool)
        kernels.stamp_segments(mask, (side, side), np.zeros(2), 1 / (side - 1), A, B, 0.05)
        stamped = mask.copy()
        return stamped, kernels.greedy_scan(mask, (side, side), offs)

    (m1, p1), (m2, p2) = both(run)
    assert np.array_equal(m1, m2) and np.array_equal(p1, p2)
    assert 0 < m1.sum() < side * side


def test_bump_accumulate(rng):
    X = rng.random((500, 2))
    centers = rng.random((12, 2))
    radius = np.full(12, 0.2)
    theta = rng.random(12) * 2 * np.pi
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pt, bi = np.nonzero(np.linalg.norm(X[:, None] - centers[None], axis=2) < radius)

    def run():
        V = np.zeros((500, 1))
        J = np.zeros((500, 1, 2))
        kernels.bump_accumulate(X, pt, bi, centers, radius, direction, np.zeros(12, np.int64),
                                np.full(12, 0.03), np.linspace(0.1, 2, 12), V, J)
        return V, J

    (v1, j1), (v2, j2) = both(run)
    # compiled sin/cos may differ from numpy's in the last ulp
    assert np.allclose(v1, v2, rtol=0, atol=1e-14)
    assert np.allclose(j1, j2, rtol=0, atol=1e-13)


@pytest.mark.parametrize("kernel", ["dijkstra", "fmm"])
def test_lattice_solvers(kernel, rng):
    g = 40
    init = np.full(g * g, np.inf)
    init[rng.choice(g * g, 3, replace=False)] = rng.random(3)
    psi = 1 + rng.random(g * g)
    offs, lengths = _neighbours(2)
    if kernel == "dijkstra":
        (v1, s1), (v2, s2) = both(lambda: kernels.lattice_dijkstra(init, psi, (g, g), offs, lengths / g))
        assert np.array_equal(s1, s2)
    else:
        v1, v2 = both(lambda: kernels.fast_march(init, psi, (g, g), 1 / g))
    assert np.array_equal(v1, v2)


def test_construction_agrees_across_backends(unit_square, zero2, one2):
    from lipforge.construct import iterate

    a, b = both(lambda: iterate(zero2, one2, unit_square, 3))
    assert len(a.u) == len(b.u)
    assert np.array_equal(a.u.arrays.centers, b.u.arrays.centers)
    assert np.allclose(a.u.arrays.t, b.u.arrays.t, rtol=1e-12, atol=0)
    X = unit_square.halton_free(2000)
    assert np.allclose(a.u(X), b.u(X), rtol=0, atol=1e-13)
