"""Domains, primitive shapes, balls, packings, segments and Minkowski content."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import qmc

from . import kernels


class DomainError(ValueError):
    pass


def as_points(x):
    """Return ``(X, single)`` with ``X`` of shape (n, d)."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return X[None, :], True
    return X, False


def point_segment_distance(X, A, B):
    """Distances from points ``X`` (n, d) to segments ``A``-``B`` (s, d); shape (n, s)."""
    X = np.asarray(X, float)
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    AB = B - A
    ab2 = np.sum(AB * AB, axis=1)
    out = np.empty((len(X), len(A)))
    step = max(1, 4_000_000 // max(1, len(A) * X.shape[1]))
    for start in range(0, len(X), step):
        P = X[start:start + step, None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.sum((P - A) * AB, axis=2) / ab2
        t = np.where(ab2 > 0, np.clip(np.nan_to_num(t), 0.0, 1.0), 0.0)
        C = A + t[..., None] * AB
        out[start:start + step] = np.sqrt(np.sum((C - P) ** 2, axis=2))
    return out


def point_segment_distance_pairs(P, A, B):
    """Distance from each point ``P[k]`` to its own segment ``[A[k], B[k]]``."""
    AB = B - A
    ab2 = np.sum(AB * AB, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(ab2 > 0, np.clip(np.sum((P - A) * AB, axis=1) / ab2, 0.0, 1.0), 0.0)
    return np.linalg.norm(A + t[:, None] * AB - P, axis=1)


def segment_distances(A1, B1, A2, B2):
    """Exact distances between closed segments, pairwise along the first axis."""
    A1, B1, A2, B2 = (np.atleast_2d(np.asarray(v, float)) for v in (A1, B1, A2, B2))
    d1 = B1 - A1
    d2 = B2 - A2
    r = A1 - A2
    a = np.sum(d1 * d1, axis=1)
    e = np.sum(d2 * d2, axis=1)
    f = np.sum(d2 * r, axis=1)
    c = np.sum(d1 * r, axis=1)
    b = np.sum(d1 * d2, axis=1)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 0.0, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = np.where(e > 0.0, (b * s + f) / e, 0.0)
        lo = t < 0.0
        hi = t > 1.0
        s = np.where(lo, np.where(a > 0.0, np.clip(-c / a, 0.0, 1.0), 0.0), s)
        s = np.where(hi, np.where(a > 0.0, np.clip((b - c) / a, 0.0, 1.0), 0.0), s)
        t = np.clip(t, 0.0, 1.0)
        # a point-like second segment: project it onto the first
        pt2 = (e == 0.0) & (a > 0.0)
        s = np.where(pt2, np.clip(-c / np.where(a > 0.0, a, 1.0), 0.0, 1.0), s)
        t = np.where(pt2, 0.0, t)
        # a point-like first segment: project it onto the second
        pt = a == 0.0
        s = np.where(pt, 0.0, s)
        t = np.where(pt, np.where(e > 0.0, np.clip(f / e, 0.0, 1.0), 0.0), t)
    C1 = A1 + s[:, None] * d1
    C2 = A2 + t[:, None] * d2
    return np.sqrt(np.sum((C1 - C2) ** 2, axis=1))


def segment_distance(a1, b1, a2, b2):
    """Exact Euclidean distance between closed segments [a1, b1] and [a2, b2]."""
    return float(segment_distances(a1, b1, a2, b2)[0])


def _fmt(v):
    return " ".join(repr(float(x)) for x in np.ravel(v))


# ---------------------------------------------------------------------------
# closed primitive shapes


class Shape:
    kind = "shape"

    def distance(self, X):
        raise NotImplementedError

    def contains(self, X):
        return self.distance(X) <= 0.0

    def bbox(self):
        return None

    def sample(self, n, rng):
        raise NotImplementedError


class HalfSpace(Shape):
    """Closed half-space ``{x : normal . x >= offset}``."""

    kind = "halfspace"

    def __init__(self, normal, offset):
        normal = np.asarray(normal, float)
        norm = np.linalg.norm(normal)
        if not np.isfinite(norm) or norm == 0.0 or not np.isfinite(offset):
            raise DomainError("half-space needs a finite nonzero normal")
        self.normal = normal / norm
        self.offset = float(offset) / norm
        self.d = len(normal)

    def distance(self, X):
        return np.maximum(0.0, self.offset - X @ self.normal)

    def contains(self, X):
        return X @ self.normal >= self.offset

    def sample(self, n, rng, lo=None, hi=None):
        X = lo + (hi - lo) * rng.random((4 * n, self.d))
        X = X[self.contains(X)][:n]
        return X

    def spec(self):
        return f"halfspace {_fmt(self.normal)} {self.offset!r}"


class Box(Shape):
    kind = "box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise DomainError("box needs lo <= hi")
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise DomainError("box corners must be finite")
        self.d = len(self.lo)

    def distance(self, X):
        gap = np.maximum(np.maximum(self.lo - X, X - self.hi), 0.0)
        return np.sqrt(np.sum(gap * gap, axis=1))

    def contains(self, X):
        return np.all((X >= self.lo) & (X <= self.hi), axis=1)

    def bbox(self):
        return self.lo, self.hi

    def sample(self, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.d))

    def spec(self):
        return f"box {_fmt(self.lo)} {_fmt(self.hi)}"


class Disk(Shape):
    """Closed Euclidean ball."""

    kind = "disk"

    def __init__(self, center, radius):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        if not (self.radius >= 0.0 and np.isfinite(self.radius)) or not np.all(np.isfinite(self.center)):
            raise DomainError("disk needs a finite center and radius >= 0")
        self.d = len(self.center)

    def distance(self, X):
        return np.maximum(0.0, np.linalg.norm(X - self.center, axis=1) - self.radius)

    def contains(self, X):
        return np.sum((X - self.center) ** 2, axis=1) <= self.radius**2

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def sample(self, n, rng):
        g = rng.standard_normal((n, self.d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = self.radius * rng.random(n) ** (1.0 / self.d)
        return self.center + g * rad[:, None]

    def spec(self):
        return f"disk {_fmt(self.center)} {self.radius!r}"


class Sphere(Shape):
    """The boundary shell of a ball, a (d-1)-dimensional set."""

    kind = "sphere"

    def __init__(self, center, radius):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        if not (self.radius > 0.0 and np.isfinite(self.radius)):
            raise DomainError("sphere needs radius > 0")
        self.d = len(self.center)

    def distance(self, X):
        return np.abs(np.linalg.norm(X - self.center, axis=1) - self.radius)

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def sample(self, n, rng):
        g = rng.standard_normal((n, self.d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return self.center + self.radius * g

    def spec(self):
        return f"sphere {_fmt(self.center)} {self.radius!r}"


class PointSet(Shape):
    kind = "points"

    def __init__(self, points):
        self.points = np.atleast_2d(np.asarray(points, float))
        if not np.all(np.isfinite(self.points)):
            raise DomainError("points must be finite")
        self.d = self.points.shape[1]

    def distance(self, X):
        if len(self.points) == 0:
            return np.full(len(X), np.inf)
        return cKDTree(self.points).query(X)[0]

    def contains(self, X):
        return self.distance(X) == 0.0

    def bbox(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def sample(self, n, rng):
        return self.points[rng.integers(0, len(self.points), n)]

    def spec(self):
        return "points " + "; ".join(_fmt(p) for p in self.points)


class SegmentSet(Shape):
    kind = "segments"

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, float))
        self.B = np.atleast_2d(np.asarray(B, float))
        if self.A.shape != self.B.shape or not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.B)):
            raise DomainError("segments need matching finite endpoints")
        self.d = self.A.shape[1]

    def distance(self, X):
        if len(self.A) == 0:
            return np.full(len(X), np.inf)
        return point_segment_distance(X, self.A, self.B).min(axis=1)

    def bbox(self):
        both = np.vstack([self.A, self.B])
        return both.min(axis=0), both.max(axis=0)

    def sample(self, n, rng):
        k = rng.integers(0, len(self.A), n)
        t = rng.random(n)[:, None]
        return self.A[k] + t * (self.B[k] - self.A[k])

    def spec(self):
        return "segments " + "; ".join(f"{_fmt(a)} {_fmt(b)}" for a, b in zip(self.A, self.B))


class Exterior(Shape):
    """Complement of an open box: closed, contains the box boundary."""

    kind = "exterior"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.d = len(self.lo)

    def distance(self, X):
        inside = np.minimum(X - self.lo, self.hi - X).min(axis=1)
        return np.maximum(inside, 0.0)

    def contains(self, X):
        return ~np.all((X > self.lo) & (X < self.hi), axis=1)

    def sample(self, n, rng):
        # half on the faces, half in a collar outside
        d = self.d
        m = n // 2
        F = self.lo + (self.hi - self.lo) * rng.random((m, d))
        ax = rng.integers(0, d, m)
        side = rng.integers(0, 2, m).astype(bool)
        F[np.arange(m), ax] = np.where(side, self.hi[ax], self.lo[ax])
        size = self.hi - self.lo
        C = self.lo - 0.1 * size + 1.2 * size * rng.random((4 * (n - m) + 8, d))
        C = C[self.contains(C)][: n - m]
        return np.vstack([F, C])

    def spec(self):
        return "exterior"


# ---------------------------------------------------------------------------
# domain


class Domain:
    """Bounded free region ``V = interior(box) minus Gamma``.

    ``gamma`` is a list of closed primitives; with ``exterior=True`` the
    complement of the open box is part of Gamma as well.
    """

    def __init__(self, lo, hi, gamma=(), exterior=True, resolution=512):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        if self.lo.ndim != 1 or self.lo.shape != self.hi.shape:
            raise DomainError("box corners must be 1-d and of equal length")
        self.d = len(self.lo)
        if self.d < 2:
            raise DomainError(f"dimension must be >= 2, got {self.d}")
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise DomainError("box corners must be finite")
        if np.any(self.hi <= self.lo):
            raise DomainError("box is degenerate")
        self.gamma = list(gamma)
        for s in self.gamma:
            if s.d != self.d:
                raise DomainError(f"shape {s.kind} has dimension {s.d}, box has {self.d}")
        self.exterior = bool(exterior)
        self.resolution = int(resolution)
        self._shapes = self.gamma + ([Exterior(self.lo, self.hi)] if self.exterior else [])
        self._edt = None
        self._volume = None
        if not np.any(self.in_free(self.cell_centers(min(self.resolution, self._lattice_cap())))):
            raise DomainError("empty free region: Gamma covers the box")

    def _lattice_cap(self):
        return max(8, int(round(4_000_000 ** (1.0 / self.d))))

    @property
    def size(self):
        return self.hi - self.lo

    @property
    def shapes(self):
        return list(self._shapes)

    def cell_centers(self, n):
        h = self.size / n
        axes = [self.lo[k] + h[k] * (np.arange(n) + 0.5) for k in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def dist_gamma(self, x):
        X, single = as_points(x)
        if not self._shapes:
            out = np.full(len(X), np.inf)
        else:
            out = np.min([s.distance(X) for s in self._shapes], axis=0)
        return out[0] if single else out

    def in_gamma(self, x):
        X, single = as_points(x)
        out = np.zeros(len(X), bool)
        for s in self._shapes:
            out |= s.contains(X)
        return out[0] if single else out

    def dist_complement(self, x):
        """Distance from points of the box to the complement of V."""
        X, single = as_points(x)
        out = self.dist_gamma(X)
        if not self.exterior:
            faces = np.minimum(X - self.lo, self.hi - X).min(axis=1)
            out = np.minimum(out, np.maximum(faces, 0.0))
        return out[0] if single else out

    def in_box(self, X):
        return np.all((X > self.lo) & (X < self.hi), axis=1)

    def in_free(self, x):
        X, single = as_points(x)
        out = self.in_box(X) & ~self.in_gamma(X)
        return out[0] if single else out

    def free_volume(self):
        """vol(V) by counting lattice cell centres at the domain resolution."""
        if self._volume is None:
            n = min(self.resolution * 2, self._lattice_cap())
            h = self.size / n
            count = 0
            for chunk in self._center_chunks(n):
                count += int(np.count_nonzero(self.in_free(chunk)))
            self._volume = count * float(np.prod(h))
        return self._volume

    def _center_chunks(self, n):
        h = self.size / n
        rest = [self.lo[k] + h[k] * (np.arange(n) + 0.5) for k in range(1, self.d)]
        tail = np.stack(np.meshgrid(*rest, indexing="ij"), axis=-1).reshape(-1, self.d - 1)
        for i in range(n):
            x0 = self.lo[0] + h[0] * (i + 0.5)
            yield np.column_stack([np.full(len(tail), x0), tail])

    def sample_free(self, n, rng):
        out = []
        got = 0
        while got < n:
            X = self.lo + self.size * rng.random((2 * (n - got) + 16, self.d))
            X = X[self.in_free(X)]
            out.append(X)
            got += len(X)
        return np.vstack(out)[:n]

    def halton_free(self, n, skip=1):
        """Deterministic low-discrepancy points of V (unscrambled Halton)."""
        eng = qmc.Halton(self.d, scramble=False)
        if skip:
            eng.fast_forward(skip)
        out = []
        got = 0
        while got < n:
            X = self.lo + self.size * eng.random(2 * (n - got) + 16)
            X = X[self.in_free(X)]
            out.append(X)
            got += len(X)
        return np.vstack(out)[:n]

    def sample_gamma(self, n, rng):
        """Points of Gamma near the box, including lower-dimensional pieces."""
        if not self._shapes:
            return np.empty((0, self.d))
        per = max(1, n // len(self._shapes))
        parts = []
        for s in self._shapes:
            if isinstance(s, HalfSpace):
                lo = self.lo - 0.1 * self.size
                hi = self.hi + 0.1 * self.size
                parts.append(s.sample(per, rng, lo, hi))
            else:
                parts.append(s.sample(per, rng))
        X = np.vstack(parts)
        X = X[self.in_gamma(X)]
        if len(X) < n:
            X = np.vstack([X, X[rng.integers(0, len(X), n - len(X))]]) if len(X) else X
        return X[:n]

    # distance to the boundary of V --------------------------------------

    def _edt_table(self):
        if self._edt is None:
            n = min(self.resolution, self._lattice_cap())
            h = self.size / n
            pad = 8
            lo = self.lo - pad * h
            m = n + 2 * pad
            axes = [lo[k] + h[k] * (np.arange(m) + 0.5) for k in range(self.d)]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
            inside = self.in_free(grid).reshape((m,) * self.d)
            dist = ndimage.distance_transform_edt(~inside, sampling=h)
            # cell centres sit half a cell from the interface on average
            dist = np.where(inside, 0.0, np.maximum(dist - 0.5 * float(h.min()), 0.0))
            self._edt = (lo, h, dist)
        return self._edt

    def dist_outside(self, X):
        """Distance from points outside V to the closure of V (within a cell)."""
        lo, h, dist = self._edt_table()
        idx = np.floor((X - lo) / h).astype(np.int64)
        m = np.array(dist.shape)
        inside_grid = np.all((idx >= 0) & (idx < m), axis=1)
        out = np.empty(len(X))
        ii = np.clip(idx, 0, m - 1)
        out[:] = dist[tuple(ii.T)]
        if not np.all(inside_grid):
            # far outside the padded grid: fall back to distance to the box
            far = ~inside_grid
            gap = np.maximum(np.maximum(self.lo - X[far], X[far] - self.hi), 0.0)
            out[far] = np.sqrt(np.sum(gap * gap, axis=1))
        return out

    def dist_boundary(self, x):
        X, single = as_points(x)
        free = self.in_free(X)
        out = np.empty(len(X))
        if np.any(free):
            out[free] = self.dist_complement(X[free])
        if np.any(~free):
            out[~free] = self.dist_outside(X[~free])
        return out[0] if single else out

    def boundary_content(self, radii, spacing=None):
        """Minkowski content estimate of the boundary of V (two-sided tube).

        Inside V the exact distance to Gamma is used; outside, a Euclidean
        distance transform on the same box-aligned lattice.
        """
        radii = _check_radii(radii)
        n_in = min(self.resolution, self._lattice_cap())
        if spacing is None:
            # make the smallest radius a whole number of cells
            h = float(self.size.min()) / n_in
            h = radii[-1] / np.ceil(radii[-1] / h - 1e-9)
        else:
            h = float(spacing)
        if radii[-1] < 4 * h * (1 - 1e-12):
            raise DomainError("radii below lattice resolution (need r >= 4 * spacing)")
        pad = int(np.ceil(radii[0] / h)) + 2
        n = np.ceil(self.size / h - 1e-9).astype(int) + 2 * pad
        lo = self.lo - pad * h
        axes = [lo[k] + h * (np.arange(n[k]) + 0.5) for k in range(self.d)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        inside = self.in_free(grid)
        dist = ndimage.distance_transform_edt(~inside.reshape(tuple(n)), sampling=h).ravel()
        dist = np.maximum(dist - 0.5 * h, 0.0)
        dist[inside] = self.dist_complement(grid[inside])
        counts = np.count_nonzero(dist[:, None] < radii[None, :], axis=0)
        return MinkowskiEstimate(radii, counts * h**self.d / (2.0 * radii))

    def describe(self):
        lines = ["x".join(f"[{a!r},{b!r}]" for a, b in zip(self.lo, self.hi))]
        lines += [s.spec() for s in self._shapes]
        return lines


def make_domain(spec):
    """Build a :class:`Domain` from a dict description.

    ``spec = {"box": [(lo, hi), ...], "gamma": [shape, ...], "exterior": bool}``
    where shapes are :class:`Shape` instances or ``(kind, *params)`` tuples.
    """
    box = np.asarray(spec["box"], float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise DomainError("box must be a list of (lo, hi) pairs")
    shapes = []
    exterior = bool(spec.get("exterior", False))
    for s in spec.get("gamma", []):
        if isinstance(s, Shape):
            if isinstance(s, Exterior):
                exterior = True
            else:
                shapes.append(s)
        else:
            shape = shape_from_tuple(s)
            if shape is None:
                exterior = True
            else:
                shapes.append(shape)
    return Domain(box[:, 0], box[:, 1], shapes, exterior=exterior, resolution=spec.get("resolution", 512))


def shape_from_tuple(t):
    kind, *args = t
    if kind == "exterior":
        return None
    if kind == "halfspace":
        return HalfSpace(args[0], args[1])
    if kind == "box":
        return Box(args[0], args[1])
    if kind == "disk":
        return Disk(args[0], args[1])
    if kind == "sphere":
        return Sphere(args[0], args[1])
    if kind == "points":
        return PointSet(args[0])
    if kind == "segments":
        return SegmentSet(args[0], args[1])
    raise DomainError(f"unknown shape kind {kind!r}")


def dist_to_set(domain, x, which):
    """Distance from ``x`` to Gamma (``"gamma"``), to the boundary of V
    (``"boundary"``) or to a list of segments."""
    X, single = as_points(x)
    if isinstance(which, str):
        if which == "gamma":
            out = domain.dist_gamma(X)
        elif which == "boundary":
            out = domain.dist_boundary(X)
        else:
            raise ValueError(f"unknown target {which!r}")
    else:
        segs = list(which)
        if not segs:
            out = np.full(len(X), np.inf)
        else:
            A = np.array([s.a for s in segs])
            B = np.array([s.b for s in segs])
            out = point_segment_distance(X, A, B).min(axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# balls, segments, packings


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def contains(self, X):
        X, _ = as_points(X)
        return np.sum((X - self.center) ** 2, axis=1) < self.radius**2


def phi_shrink(ball):
    """B(x, r) -> B(x, r**2)."""
    return Ball(ball.center, ball.radius**2)


@dataclass(frozen=True, eq=False)
class Segment:
    a: np.ndarray
    b: np.ndarray
    scale: int = 0
    parent: int = -1

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, float))
        object.__setattr__(self, "b", np.asarray(self.b, float))

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))

    @property
    def midpoint(self):
        return 0.5 * (self.a + self.b)

    def points(self, n):
        t = np.linspace(0.0, 1.0, n)[:, None]
        return self.a + t * (self.b - self.a)

    def distance(self, X):
        X, single = as_points(X)
        out = point_segment_distance(X, self.a[None], self.b[None])[:, 0]
        return out[0] if single else out


class FreeRegion:
    """V minus a finite union of closed segments."""

    def __init__(self, domain, segments=(), snapshot=0):
        self.domain = domain
        self.segments = list(segments)
        self.snapshot = snapshot
        if self.segments:
            self._A = np.array([s.a for s in self.segments])
            self._B = np.array([s.b for s in self.segments])
        else:
            self._A = self._B = np.empty((0, domain.d))

    def dist_complement(self, x):
        X, single = as_points(x)
        out = self.domain.dist_complement(X)
        if len(self._A):
            tree = cKDTree(0.5 * (self._A + self._B))
            half = 0.5 * np.max(np.linalg.norm(self._B - self._A, axis=1))
            # only segments whose midpoint is close enough can beat the gamma distance
            cap = np.minimum(out, np.max(self.domain.size)) + half
            for i, cand in enumerate(tree.query_ball_point(X, cap)):
                if cand:
                    dd = point_segment_distance(X[i:i + 1], self._A[cand], self._B[cand]).min()
                    out[i] = min(out[i], dd)
        return out[0] if single else out

    def contains(self, x):
        X, single = as_points(x)
        out = self.domain.in_free(X)
        if len(self._A):
            out &= self.dist_complement(X) > 0.0
        return out[0] if single else out


@dataclass
class Packing:
    scale: int
    radius: float
    centers: np.ndarray
    spacing: float
    snapshot: int = 0

    def __len__(self):
        return len(self.centers)

    def balls(self):
        return [Ball(c, self.radius) for c in self.centers]

    def min_separation(self):
        if len(self.centers) < 2:
            return np.inf
        return float(cKDTree(self.centers).query(self.centers, k=2)[0][:, 1].min())


def _lattice(domain, h):
    n = np.floor(domain.size / h + 1e-9).astype(np.int64) + 1
    return domain.lo.copy(), n


def _disk_offsets(d, radius, h):
    m = int(np.ceil(radius / h))
    axes = [np.arange(-m, m + 1)] * d
    off = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    dist2 = np.sum((off * h) ** 2, axis=1)
    return off[dist2 <= radius * radius * (1.0 + 1e-12)]


def admissible_mask(region, r, h):
    """Lattice points p with dist(p, complement of region) >= r + h."""
    domain = region.domain
    origin, n = _lattice(domain, h)
    margin = r + h
    mask = np.zeros(int(np.prod(n)), bool)
    rest = [origin[k] + h * np.arange(n[k]) for k in range(1, domain.d)]
    tail = np.stack(np.meshgrid(*rest, indexing="ij"), axis=-1).reshape(-1, domain.d - 1)
    row = len(tail)
    lo_ok = np.all(tail - domain.lo[1:] >= margin * (1 - 1e-12), axis=1) & np.all(
        domain.hi[1:] - tail >= margin * (1 - 1e-12), axis=1
    )
    for i in range(n[0]):
        x0 = origin[0] + h * i
        if x0 - domain.lo[0] < margin * (1 - 1e-12) or domain.hi[0] - x0 < margin * (1 - 1e-12):
            continue
        sel = lo_ok
        if not np.any(sel):
            continue
        P = np.column_stack([np.full(row, x0), tail])
        ok = sel.copy()
        ok[sel] = domain.dist_gamma(P[sel]) >= margin
        mask[i * row:(i + 1) * row] = ok
    if region.segments:
        kernels.stamp_segments(mask, n, origin, h, region._A, region._B, margin)
    return mask, origin, n


def maximal_packing(region, r, scale=0, spacing=None):
    """Greedy maximal r-packing of a free region over an audit lattice.

    Candidate centres are lattice points of spacing ``r/8`` (default) with
    distance at least ``r + spacing`` to the complement of the region; the
    scan is row-major and a candidate is kept when its centre is more than
    ``2r`` from every kept centre.
    """
    if not (0 < r <= 1):
        raise ValueError("packing radius must satisfy 0 < r <= 1")
    h = spacing if spacing is not None else r / 8.0
    mask, origin, n = admissible_mask(region, r, h)
    offsets = _disk_offsets(region.domain.d, 2 * r, h)
    flat = kernels.greedy_scan(mask, n, offsets)
    if len(flat):
        idx = np.stack(np.unravel_index(flat, tuple(n)), axis=1)
        centers = origin + idx * h
    else:
        centers = np.empty((0, region.domain.d))
    return Packing(scale=scale, radius=float(r), centers=centers, spacing=float(h), snapshot=region.snapshot)


def packing_audit(region, packing):
    """Independent maximality check: lattice points admitting one more ball.

    Recomputes admissibility with exact distances (no stamping) and returns
    every lattice point that is admissible yet farther than ``2r`` from all
    packed centres. An empty result certifies maximality on the lattice.
    """
    domain = region.domain
    h, r = packing.spacing, packing.radius
    origin, n = _lattice(domain, h)
    axes = [origin[k] + h * np.arange(n[k]) for k in range(domain.d)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.d)
    ok = region.dist_complement(P) >= r + h
    P = P[ok]
    if len(packing.centers) == 0 or len(P) == 0:
        return P
    dist, _ = cKDTree(packing.centers).query(P)
    return P[dist > 2 * r * (1.0 + 1e-12)]


class SegmentLedger:
    """Scale-indexed segment families with their packing centres."""

    def __init__(self, d):
        self.d = d
        self._segments = {}
        self._centers = {}

    def add_scale(self, i, centers, segments):
        if i in self._segments:
            raise ValueError(f"scale {i} already recorded")
        if self._segments and i <= max(self._segments):
            raise ValueError("scales must be added in increasing order")
        self._segments[i] = list(segments)
        self._centers[i] = np.asarray(centers, float).reshape(-1, self.d)

    @property
    def scales(self):
        return sorted(self._segments)

    def new_at(self, i):
        return list(self._segments.get(i, []))

    def upto(self, i):
        return [s for j in self.scales if j <= i for s in self._segments[j]]

    def all(self):
        return self.upto(max(self.scales) if self.scales else 0)

    def centers_at(self, i):
        return self._centers.get(i, np.empty((0, self.d)))

    def centers_upto(self, i):
        parts = [self._centers[j] for j in self.scales if j <= i]
        return np.vstack(parts) if parts else np.empty((0, self.d))

    def arrays(self, upto=None):
        segs = self.all() if upto is None else self.upto(upto)
        if not segs:
            return np.empty((0, self.d)), np.empty((0, self.d))
        return np.array([s.a for s in segs]), np.array([s.b for s in segs])

    def __len__(self):
        return sum(len(v) for v in self._segments.values())


# ---------------------------------------------------------------------------
# Minkowski content


@dataclass
class MinkowskiEstimate:
    radii: np.ndarray
    values: np.ndarray
    estimate: float = field(init=False)
    extrapolated: float = field(init=False)

    def __post_init__(self):
        self.estimate = float(self.values[-1]) if len(self.values) else 0.0
        if len(self.radii) >= 2:
            slope, icpt = np.polyfit(self.radii, self.values, 1)
            self.extrapolated = float(icpt)
        else:
            self.extrapolated = self.estimate


def _check_radii(radii):
    radii = np.asarray(radii, float)
    if radii.ndim != 1 or len(radii) == 0 or np.any(radii <= 0):
        raise ValueError("radii must be a nonempty list of positive values")
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    return radii


def minkowski_content(shapes, radii, spacing=None):
    """vol({dist < r}) / (2r) per radius, by counting lattice cell centres.

    ``estimate`` is the value at the smallest radius; ``extrapolated`` is the
    intercept at r = 0 of a least-squares line through (r, value).
    """
    radii = _check_radii(radii)
    shapes = list(shapes)
    if not shapes:
        return MinkowskiEstimate(radii, np.zeros(len(radii)))
    boxes = [s.bbox() for s in shapes]
    if any(b is None for b in boxes):
        raise ValueError("minkowski_content needs bounded shapes")
    d = shapes[0].d
    h = spacing if spacing is not None else radii[-1] / 4.0
    if radii[-1] < 4 * h * (1 - 1e-12):
        raise ValueError("radii below lattice resolution (need r >= 4 * spacing)")
    lo = np.min([b[0] for b in boxes], axis=0) - radii[0] - h
    hi = np.max([b[1] for b in boxes], axis=0) + radii[0] + h
    n = np.ceil((hi - lo) / h).astype(int)
    rest = [lo[k] + h * (np.arange(n[k]) + 0.5) for k in range(1, d)]
    tail = np.stack(np.meshgrid(*rest, indexing="ij"), axis=-1).reshape(-1, d - 1)
    counts = np.zeros(len(radii), np.int64)
    for i in range(n[0]):
        P = np.column_stack([np.full(len(tail), lo[0] + h * (i + 0.5)), tail])
        dist = np.min([s.distance(P) for s in shapes], axis=0)
        counts += np.count_nonzero(dist[:, None] < radii[None, :], axis=0)
    return MinkowskiEstimate(radii, counts * h**d / (2.0 * radii))
