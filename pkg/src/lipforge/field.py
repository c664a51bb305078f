"""Bump stacks u = f + sum of oscillator bumps, and Lipschitz estimators."""

import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtri
from scipy.stats import qmc

from . import kernels
from .expr import MapExpr, max_combine  # noqa: F401  (re-exported)
from .geometry import Ball, Segment


def _profile_constants():
    tau = np.linspace(0.5, 1.0, 200_001)[1:-1]
    phi, dphi = kernels.profile_np(tau)
    lip = float(np.max(np.abs(dphi)))
    gap = 1.0 - phi * phi
    ok = gap > 1e-300
    kappa = float(np.max(np.abs(dphi[ok]) / np.sqrt(gap[ok])))
    return lip, kappa


# max |phi'| of the cutoff profile in units of the support radius, and the
# worst ratio |phi'| / sqrt(1 - phi^2) that controls the transition zone
PROFILE_LIP, PROFILE_KAPPA = _profile_constants()


@dataclass(frozen=True, eq=False)
class Bump:
    """``eps0 * sin(10 t xi / eps0) * phi(|x - c| / radius)`` on one output axis,
    with ``xi = (x - c) . direction``."""

    center: np.ndarray
    radius: float
    direction: np.ndarray
    eps0: float
    t: float
    axis: int = 0
    scale: int = 0
    parent: int = -1
    samples: int = 0  # h-profile samples used when the bump was placed

    def __post_init__(self):
        c = np.asarray(self.center, float)
        e = np.asarray(self.direction, float)
        n = np.linalg.norm(e)
        if not n > 0:
            raise ValueError("bump direction must be nonzero")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "direction", e / n)
        if not self.radius > 0 or not self.eps0 > 0 or not self.t >= 0:
            raise ValueError("bump needs radius > 0, eps0 > 0, t >= 0")

    @property
    def support(self):
        return Ball(self.center, self.radius)

    @property
    def frequency(self):
        return 10.0 * self.t / self.eps0

    def with_t(self, t):
        return Bump(self.center, self.radius, self.direction, self.eps0, float(t),
                    self.axis, self.scale, self.parent, self.samples)

    def evaluate(self, X, D=1, jac=False):
        """Values (n, D) and optionally Jacobians (n, D, d) of this bump alone."""
        X = np.atleast_2d(np.asarray(X, float))
        n, d = X.shape
        V = np.zeros((n, D))
        J = np.zeros((n, D, d)) if jac else None
        diff = X - self.center
        inside = np.flatnonzero(np.sum(diff * diff, axis=1) < self.radius**2)
        arr = _BumpArrays.from_bumps([self], d)
        kernels.bump_accumulate(X, inside.astype(np.int64), np.zeros(len(inside), np.int64),
                                arr.centers, arr.radius, arr.direction, arr.axis, arr.eps0, arr.t, V, J)
        return (V, J) if jac else V


class _BumpArrays:
    __slots__ = ("centers", "radius", "direction", "axis", "eps0", "t", "scale", "parent", "samples")

    def __init__(self, centers, radius, direction, axis, eps0, t, scale, parent, samples):
        self.centers = centers
        self.radius = radius
        self.direction = direction
        self.axis = axis
        self.eps0 = eps0
        self.t = t
        self.scale = scale
        self.parent = parent
        self.samples = samples

    @classmethod
    def empty(cls, d):
        return cls(np.empty((0, d)), np.empty(0), np.empty((0, d)), np.empty(0, np.int64),
                   np.empty(0), np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))

    @classmethod
    def from_bumps(cls, bumps, d):
        if not bumps:
            return cls.empty(d)
        return cls(
            np.array([b.center for b in bumps], float).reshape(-1, d),
            np.array([b.radius for b in bumps], float),
            np.array([b.direction for b in bumps], float).reshape(-1, d),
            np.array([b.axis for b in bumps], np.int64),
            np.array([b.eps0 for b in bumps], float),
            np.array([b.t for b in bumps], float),
            np.array([b.scale for b in bumps], np.int64),
            np.array([b.parent for b in bumps], np.int64),
            np.array([b.samples for b in bumps], np.int64),
        )

    def concat(self, other):
        return _BumpArrays(*[np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.__slots__])

    def head(self, m):
        return _BumpArrays(*[getattr(self, k)[:m] for k in self.__slots__])

    def __len__(self):
        return len(self.radius)


def _index_groups(arr, lo, hi):
    """KD-trees over bumps ``lo:hi``, one per dyadic radius class."""
    groups = []
    if hi > lo:
        key = np.floor(np.log2(arr.radius[lo:hi])).astype(np.int64)
        for g in np.unique(key):
            idx = lo + np.flatnonzero(key == g)
            groups.append((idx, cKDTree(arr.centers[idx]), float(arr.radius[idx].max())))
    return groups


class BumpStack:
    """Immutable map ``u = base + sum(bumps)``.

    Bumps are summed in stack order, and only bumps whose open support
    contains the point take part, so appending bumps elsewhere never changes
    a value bit-wise.
    """

    def __init__(self, base, bumps=(), _arrays=None):
        if not isinstance(base, MapExpr):
            raise TypeError("base must be a MapExpr")
        self.base = base
        self.d = base.d
        self.D = base.D
        self._arr = _arrays if _arrays is not None else _BumpArrays.from_bumps(list(bumps), self.d)
        if len(self._arr) and (self._arr.axis.min() < 0 or self._arr.axis.max() >= self.D):
            raise ValueError("bump output axis out of range")
        self._groups = None
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._arr)

    def bump(self, k):
        a = self._arr
        return Bump(a.centers[k], float(a.radius[k]), a.direction[k], float(a.eps0[k]), float(a.t[k]),
                    int(a.axis[k]), int(a.scale[k]), int(a.parent[k]), int(a.samples[k]))

    @property
    def bumps(self):
        return [self.bump(k) for k in range(len(self))]

    @property
    def arrays(self):
        return self._arr

    @classmethod
    def from_arrays(cls, base, centers, radius, direction, eps0, t, axis, scale, parent, samples):
        d = base.d
        arr = _BumpArrays(
            np.asarray(centers, float).reshape(-1, d), np.asarray(radius, float),
            np.asarray(direction, float).reshape(-1, d), np.asarray(axis, np.int64), np.asarray(eps0, float),
            np.asarray(t, float), np.asarray(scale, np.int64), np.asarray(parent, np.int64),
            np.asarray(samples, np.int64),
        )
        return cls(base, _arrays=arr)

    def with_bumps(self, bumps):
        extra = _BumpArrays.from_bumps(list(bumps), self.d)
        out = BumpStack(self.base, _arrays=self._arr.concat(extra))
        # reuse this stack's search trees; only the new bumps need indexing
        out._groups = self._bump_groups() + _index_groups(out._arr, len(self), len(out))
        return out

    def prefix(self, m):
        """The stack made of the first ``m`` bumps (a construction snapshot)."""
        return BumpStack(self.base, _arrays=self._arr.head(m))

    def tscale(self, s):
        """Every bump's frequency parameter multiplied by ``s``."""
        a = self._arr
        arr = _BumpArrays(a.centers, a.radius, a.direction, a.axis, a.eps0, a.t * float(s), a.scale, a.parent,
                          a.samples)
        out = BumpStack(self.base, _arrays=arr)
        out._groups = self._groups
        return out

    # candidate (point, bump) pairs ---------------------------------------

    def _bump_groups(self):
        with self._lock:
            if self._groups is None:
                self._groups = _index_groups(self._arr, 0, len(self))
        return self._groups

    def candidates(self, X):
        """Sorted ``(point, bump)`` index pairs with the point strictly inside the support."""
        groups = self._bump_groups()
        if not groups or len(X) == 0:
            e = np.empty(0, np.int64)
            return e, e
        pts, bis = [], []
        xtree = None
        # one query around the bounding ball of X prunes far bumps when X is clustered
        mid = 0.5 * (X.min(axis=0) + X.max(axis=0))
        spread = float(np.sqrt(np.max(np.sum((X - mid) ** 2, axis=1))))
        for idx, tree, rmax in groups:
            near = np.asarray(tree.query_ball_point(mid, spread + rmax), np.int64)
            if len(near) == 0:
                continue
            if len(near) * len(X) <= 1 << 20:
                b = idx[near]
                diff = X[:, None, :] - self._arr.centers[b][None]
                p, k = np.nonzero(np.sum(diff * diff, axis=2) < self._arr.radius[b][None] ** 2)
                pts.append(p)
                bis.append(b[k])
                continue
            if len(X) > 4 * len(idx):
                if xtree is None:
                    xtree = cKDTree(X)
                sdm = tree.sparse_distance_matrix(xtree, rmax, output_type="ndarray")
                b, p = sdm["i"], sdm["j"]
            else:
                lists = tree.query_ball_point(X, rmax, return_sorted=False)
                lens = np.fromiter((len(c) for c in lists), np.int64, len(lists))
                if lens.sum() == 0:
                    continue
                p = np.repeat(np.arange(len(X)), lens)
                b = np.concatenate([np.asarray(c, np.int64) for c in lists if len(c)])
            if len(p) == 0:
                continue
            b = idx[b]
            diff = X[p] - self._arr.centers[b]
            keep = np.sum(diff * diff, axis=1) < self._arr.radius[b] ** 2
            pts.append(p[keep])
            bis.append(b[keep])
        if not pts:
            e = np.empty(0, np.int64)
            return e, e
        p = np.concatenate(pts).astype(np.int64)
        b = np.concatenate(bis).astype(np.int64)
        order = np.lexsort((b, p))
        return p[order], b[order]

    # evaluation ----------------------------------------------------------

    def _accumulate(self, X, V, J):
        p, b = self.candidates(X)
        if len(p):
            a = self._arr
            kernels.bump_accumulate(X, p, b, a.centers, a.radius, a.direction, a.axis, a.eps0, a.t, V, J)

    def __call__(self, x):
        X = np.asarray(x, float)
        single = X.ndim == 1
        X = np.ascontiguousarray(np.atleast_2d(X))
        V = np.ascontiguousarray(self.base(X), dtype=float)
        self._accumulate(X, V, None)
        return V[0] if single else V

    eval = __call__

    def jacobian(self, x):
        """Return ``(J, kink)``; ``kink`` flags base-expression kinks."""
        X = np.asarray(x, float)
        single = X.ndim == 1
        X = np.ascontiguousarray(np.atleast_2d(X))
        V, J, kink = self.base.value_and_jacobian(X)
        J = np.ascontiguousarray(J)
        self._accumulate(X, np.ascontiguousarray(V), J)
        if single:
            return J[0], bool(kink[0])
        return J, kink

    def value_and_jacobian(self, X):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, float)))
        V, J, kink = self.base.value_and_jacobian(X)
        V = np.ascontiguousarray(V)
        J = np.ascontiguousarray(J)
        self._accumulate(X, V, J)
        return V, J, kink


# ---------------------------------------------------------------------------
# operator norm and local Lipschitz constants


def op_norm(J, tol=1e-12, max_iter=1000):
    """Largest singular value of a matrix or a stack of matrices (..., D, d)."""
    J = np.asarray(J, float)
    single = J.ndim == 2
    if J.ndim < 2:
        raise ValueError("op_norm needs a matrix")
    A = J.reshape((-1,) + J.shape[-2:])
    D, d = A.shape[1:]
    if min(D, d) == 1:
        # elementwise sums keep each result independent of the batch size
        flat = A.reshape(len(A), -1)
        acc = flat[:, 0] * flat[:, 0]
        for k in range(1, flat.shape[1]):
            acc = acc + flat[:, k] * flat[:, k]
        out = np.sqrt(acc)
    elif min(D, d) == 2:
        rows = A if D == 2 else np.swapaxes(A, 1, 2)
        r0, r1 = rows[:, 0, :], rows[:, 1, :]
        a = r0[:, 0] * r0[:, 0]
        b = r0[:, 0] * r1[:, 0]
        c = r1[:, 0] * r1[:, 0]
        for k in range(1, rows.shape[2]):
            a = a + r0[:, k] * r0[:, k]
            b = b + r0[:, k] * r1[:, k]
            c = c + r1[:, k] * r1[:, k]
        lam = 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
        out = np.sqrt(np.maximum(lam, 0.0))
    else:
        out = _power_norm(A, tol, max_iter)
    return float(out[0]) if single else out.reshape(J.shape[:-2])


def _power_norm(A, tol, max_iter):
    G = np.einsum("nji,njk->nik", A, A)
    n, d, _ = G.shape
    v = np.ones((n, d)) / np.sqrt(d)
    # start from the largest column to avoid an orthogonal initial vector
    col = np.argmax(np.einsum("nii->ni", G), axis=1)
    v[np.arange(n), col] += 1.0
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.zeros(n)
    for _ in range(max_iter):
        w = np.einsum("nij,nj->ni", G, v)
        new = np.linalg.norm(w, axis=1)
        nz = new > 0
        v[nz] = w[nz] / new[nz, None]
        done = np.all(np.abs(new - lam) <= tol * np.maximum(new, 1e-300))
        lam = new
        if done:
            break
    # the Rayleigh quotient is second-order accurate in the vector error
    rq = np.einsum("ni,nij,nj->n", v, G, v)
    return np.sqrt(np.maximum(rq, 0.0))


def top_right_singular(J):
    """Unit right singular vector for the largest singular value of one matrix."""
    _, _, vt = np.linalg.svd(np.atleast_2d(J))
    return vt[0]


DEFAULT_R0 = 1e-3
DEFAULT_LEVELS = 5


def default_radii(r0=DEFAULT_R0, levels=DEFAULT_LEVELS):
    return r0 * 0.5 ** np.arange(levels)


def _pair_design(d, n_dirs=16, n_offsets=16):
    """Deterministic unit directions (first is e1) and offsets in the ball of radius 1/2."""
    if d == 2:
        ang = np.pi * np.arange(n_dirs) / n_dirs
        E = np.column_stack([np.cos(ang), np.sin(ang)])
    else:
        eng = qmc.Halton(d, scramble=False)
        eng.fast_forward(1)
        g = ndtri(np.clip(eng.random(n_dirs - 1), 1e-12, 1 - 1e-12))
        E = np.vstack([np.eye(d)[:1], g / np.linalg.norm(g, axis=1, keepdims=True)])
    eng = qmc.Halton(d, scramble=False)
    eng.fast_forward(1)
    C = [np.zeros(d)]
    while len(C) < n_offsets:
        c = eng.random(1)[0] - 0.5
        if np.linalg.norm(c) <= 0.5:
            C.append(c)
    return E, np.array(C)


def lip_profile(u, x, radii=None, n_dirs=16, n_offsets=16):
    """Sampled Lip(u, B(x, r)) per radius, made monotone in r.

    Pairs ``p = x + r c`` and ``q = x + r (c + e / 2)`` for every direction
    ``e`` and offset ``c`` lie in the closed ball; the value at radius ``r``
    is the largest quotient seen at ``r`` or any smaller radius.
    """
    radii = default_radii() if radii is None else np.asarray(radii, float)
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    X = np.atleast_2d(np.asarray(x, float))
    n, d = X.shape
    E, C = _pair_design(d, n_dirs, n_offsets)
    # (dirs, offsets) grid of unit-radius pairs
    P0 = np.repeat(C, len(E), axis=0)
    Q0 = P0 + 0.5 * np.tile(E, (len(C), 1))
    out = np.empty((n, len(radii)))
    for k, r in enumerate(radii):
        P = (X[:, None, :] + r * P0[None]).reshape(-1, d)
        Q = (X[:, None, :] + r * Q0[None]).reshape(-1, d)
        du = np.atleast_2d(u(Q) - u(P)).reshape(len(P), -1)
        dx = np.linalg.norm(Q - P, axis=1)
        quot = np.linalg.norm(du, axis=1) / dx
        out[:, k] = quot.reshape(n, -1).max(axis=1)
    return np.maximum.accumulate(out[:, ::-1], axis=1)[:, ::-1]


def local_lip(u, x, radii=None, n_dirs=16, n_offsets=16):
    """Lu at points: Jacobian norm where smooth, sampled quotients at kinks."""
    X = np.asarray(x, float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    J, kink = u.jacobian(X)
    out = op_norm(J) if len(X) else np.empty(0)
    out = np.atleast_1d(out)
    kink = np.atleast_1d(kink)
    if np.any(kink):
        out = out.copy()
        out[kink] = lip_profile(u, X[kink], radii, n_dirs, n_offsets)[:, -1]
    return float(out[0]) if single else out


class SegmentLip(NamedTuple):
    value: float
    local_max: float


def lip_on_segment(u, seg, n=1000):
    """All-pairs difference-quotient maximum along a segment (a lower bound
    for Lip(u, seg)) and the maximum of Lu over the same samples.

    The samples are collinear and ordered, so by the triangle inequality the
    all-pairs maximum is attained by a pair of neighbours; that makes this O(n).
    """
    if n < 2:
        raise ValueError("need at least two samples")
    if not isinstance(seg, Segment):
        seg = Segment(*seg)
    if seg.length == 0.0:
        raise ValueError("degenerate segment (a == b)")
    P = seg.points(n)
    U = np.atleast_2d(u(P)).reshape(n, -1)
    du = np.sqrt(np.sum(np.diff(U, axis=0) ** 2, axis=1))
    dx = np.sqrt(np.sum(np.diff(P, axis=0) ** 2, axis=1))
    value = float(np.max(du / dx))
    return SegmentLip(value, float(np.max(local_lip(u, P))))


def lip_bruteforce(u, points):
    """Max difference quotient over all pairs of distinct sample points."""
    P = np.unique(np.atleast_2d(np.asarray(points, float)), axis=0)
    if len(P) < 2:
        raise ValueError("need at least two distinct points")
    U = np.atleast_2d(u(P)).reshape(len(P), -1)
    return kernels.pair_lip_max(P, U)[0]
