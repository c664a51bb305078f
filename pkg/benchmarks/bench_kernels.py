"""Time the hot kernels under both backends and check that they agree.

    python3 benchmarks/bench_kernels.py            # default sizes
    python3 benchmarks/bench_kernels.py --quick    # small sizes, for CI
    python3 benchmarks/bench_kernels.py --end-to-end

The numba timings exclude compilation (one warm-up call per kernel).
"""

import argparse
import time
import timeit

import numpy as np

from lipforge import _accel, kernels
from lipforge.baseline import _neighbours


def _cases(scale):
    rng = np.random.default_rng(7)
    n_pair = int(600 * scale)
    P = rng.random((n_pair, 2))
    U = np.sin(3 * P[:, :1]) + P[:, 1:] ** 2

    side = int(256 * scale)
    shape = (side, side)
    h = 1.0 / (side - 1)
    A = rng.random((40, 2))
    B = A + 0.05 * rng.standard_normal((40, 2))

    def stamp():
        mask = np.ones(side * side, bool)
        kernels.stamp_segments(mask, shape, np.zeros(2), h, A, B, 0.03)
        return mask

    r = 6
    offs = np.array([(i, j) for i in range(-r, r + 1) for j in range(-r, r + 1) if 0 < i * i + j * j < r * r])

    def scan():
        mask = np.ones(side * side, bool)
        return kernels.greedy_scan(mask, shape, offs)

    m = int(4000 * scale)
    X = rng.random((m, 2))
    nb = 60
    centers = rng.random((nb, 2))
    radius = np.full(nb, 0.12)
    theta = rng.random(nb) * 2 * np.pi
    direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    dist = np.linalg.norm(X[:, None] - centers[None], axis=2)
    pt, bi = np.nonzero(dist < radius)
    axis = np.zeros(nb, np.int64)
    eps0 = np.full(nb, 0.02)
    t = rng.random(nb)

    def bumps():
        V = np.zeros((m, 1))
        J = np.zeros((m, 1, 2))
        kernels.bump_accumulate(X, pt, bi, centers, radius, direction, axis, eps0, t, V, J)
        return np.concatenate([V.ravel(), J.ravel()])

    g = int(128 * scale)
    gshape = (g, g)
    init = np.full(g * g, np.inf)
    init[(g // 2) * g + g // 2] = 0.0
    psi = np.ones(g * g)
    nbr, lengths = _neighbours(2)
    gh = 1.0 / (g - 1)

    return {
        f"pair_lip_max n={n_pair}": lambda: np.array(kernels.pair_lip_max(P, U)[:1]),
        f"stamp_segments {side}^2": stamp,
        f"greedy_scan {side}^2": scan,
        f"bump_accumulate {len(pt)} pairs": bumps,
        f"lattice_dijkstra {g}^2": lambda: kernels.lattice_dijkstra(init, psi, gshape, nbr, gh * lengths)[0],
        f"fast_march {g}^2": lambda: kernels.fast_march(init, psi, gshape, gh),
    }


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(scale=1.0, repeat=3):
    rows = []
    for name, fn in _cases(scale).items():
        out = {}
        for be in ("numba", "numpy"):
            if be == "numba" and not _accel.HAVE_NUMBA:
                continue
            with _accel.use_backend(be):
                first = fn()  # warm-up / compile
                out[be] = (np.asarray(first), _time(fn, repeat))
        agree = "n/a"
        if len(out) == 2:
            a, b = out["numba"][0], out["numpy"][0]
            agree = "exact" if np.array_equal(a, b) else f"{np.max(np.abs(a.astype(float) - b.astype(float))):.1e}"
        rows.append((name, out.get("numba", (None, float("nan")))[1], out["numpy"][1], agree))
    return rows


def end_to_end(i_max=3):
    from lipforge.construct import iterate
    from lipforge.expr import MapExpr
    from lipforge.geometry import make_domain

    dom = make_domain({"box": [(0, 1), (0, 1)], "gamma": [], "exterior": True})
    f = MapExpr.parse("0", 2)
    psi = MapExpr.parse("1", 2)
    out = []
    for be in ("numba", "numpy"):
        with _accel.use_backend(be):
            iterate(f, psi, dom, 1)
            t0 = time.perf_counter()
            res = iterate(f, psi, dom, i_max)
            out.append((be, time.perf_counter() - t0, len(res.u)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--end-to-end", action="store_true", help="also time a full construction")
    args = ap.parse_args()
    rows = run(0.25 if args.quick else 1.0, args.repeat)
    print(f"{'kernel':<34} {'numba [s]':>10} {'numpy [s]':>10} {'speed-up':>9}  agree")
    for name, t_nb, t_np, agree in rows:
        print(f"{name:<34} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>8.1f}x  {agree}")
    if args.end_to_end:
        for be, secs, bumps in end_to_end():
            print(f"iterate(i_max=3) [{be}]: {secs:.2f}s, {bumps} bumps")


if __name__ == "__main__":
    main()
