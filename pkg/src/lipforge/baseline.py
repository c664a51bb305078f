"""Grid baselines: psi-weighted lattice distance, McShane extension and
first-order fast marching for |grad u| = psi."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .verify import Certificate


@dataclass
class GridField:
    """Scalar samples on the lattice ``origin + h * k`` (C order)."""

    origin: np.ndarray
    spacing: float
    shape: tuple
    values: np.ndarray
    gamma: np.ndarray
    certificate: Certificate | None = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, float)
        self.shape = tuple(int(s) for s in self.shape)
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        self.values = np.asarray(self.values, float).reshape(self.shape)
        self.gamma = np.asarray(self.gamma, bool).reshape(self.shape)

    @property
    def d(self):
        return len(self.shape)

    def points(self):
        axes = [self.origin[k] + self.spacing * np.arange(self.shape[k]) for k in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def index_of(self, x):
        """Flat index of the nearest lattice node."""
        k = np.rint((np.atleast_2d(x) - self.origin) / self.spacing).astype(np.int64)
        k = np.clip(k, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(k.T, self.shape)


def lattice(dom, h):
    """Node origin and counts for spacing ``h`` over the closed box."""
    n = np.floor(dom.size / h + 1e-9).astype(np.int64) + 1
    return dom.lo.copy(), tuple(int(v) for v in n)


def _gamma_nodes(dom, P, h):
    return dom.dist_gamma(P) <= 0.5 * h


def _neighbours(d):
    offs = np.array([o for o in itertools.product((-1, 0, 1), repeat=d) if any(o)], np.int64)
    return offs, np.linalg.norm(offs, axis=1)


def _setup(dom, psi, h):
    origin, shape = lattice(dom, h)
    axes = [origin[k] + h * np.arange(shape[k]) for k in range(dom.d)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dom.d)
    gamma = _gamma_nodes(dom, P, h)
    psi_v = np.asarray(psi.scalar(P), float)
    free = ~gamma
    if np.any(psi_v[free] <= 0):
        k = np.flatnonzero(free & (psi_v <= 0))[0]
        raise ValueError(f"psi must be positive on V; psi({P[k]}) = {psi_v[k]}")
    return origin, shape, P, gamma, psi_v


def weighted_distance(dom, psi, h):
    """Shortest-path psi-distance to Gamma on the (3^d - 1)-neighbour lattice;
    edge weight is length times the mean of psi at the endpoints."""
    origin, shape, P, gamma, psi_v = _setup(dom, psi, h)
    init = np.where(gamma, 0.0, np.inf)
    offs, lengths = _neighbours(dom.d)
    val, _ = kernels.lattice_dijkstra(init, psi_v, shape, offs, h * lengths)
    return GridField(origin, h, shape, val, gamma)


def mcshane_extend(f, psi, dom, h):
    """inf over Gamma nodes of f(gamma) + lattice psi-distance.

    A Gamma node whose value drops below its own datum was reached more
    cheaply from another Gamma node: that pair violates compatibility and is
    reported in ``certificate``.
    """
    origin, shape, P, gamma, psi_v = _setup(dom, psi, h)
    fv = f.scalar(P)
    init = np.where(gamma, fv, np.inf)
    offs, lengths = _neighbours(dom.d)
    val, src = kernels.lattice_dijkstra(init, psi_v, shape, offs, h * lengths)
    drop = np.where(gamma, fv - val, 0.0)
    k = int(np.argmax(drop))
    ok = bool(drop[k] <= 0.0)
    witness = None if ok else np.concatenate([P[src[k]], P[k]])
    cert = Certificate("compatibility", "baseline", ok, float(max(drop[k], 0.0)), 0.0, int(gamma.sum()), witness)
    return GridField(origin, h, shape, val, gamma, cert)


def fast_march(dom, psi, f, h):
    """First-order upwind fast marching with Dirichlet data f on Gamma nodes.

    Gamma nodes are seeded with f but stay open to updates, as in the
    viscosity formulation: incompatible data gets lowered, so the solution
    need not attain f.
    """
    origin, shape, P, gamma, psi_v = _setup(dom, psi, h)
    init = np.where(gamma, f.scalar(P), np.inf)
    val = kernels.fast_march(init, psi_v, shape, h)
    out = GridField(origin, h, shape, val, gamma)
    out.certificate = boundary_violation(out, f)
    return out


def boundary_violation(grid, f):
    P = grid.points()[grid.gamma.ravel()]
    err = np.abs(grid.values.ravel()[grid.gamma.ravel()] - f.scalar(P))
    k = int(np.argmax(err)) if len(err) else 0
    worst = float(err[k]) if len(err) else 0.0
    return Certificate("baseline_boundary", "baseline", worst == 0.0, worst, 0.0, len(err),
                       None if worst == 0.0 else P[k])


def compare(u, grid, f=None, axis=0):
    """Differences between a map and a grid field on the grid's nodes.

    Returns a dict with sup/mean absolute differences over free nodes, the
    largest ``u - grid`` there, and the boundary-attainment table on Gamma
    nodes (bit-exact for the map when it equals f there).
    """
    P = grid.points()
    uv = np.atleast_2d(u(P))[:, axis] if not isinstance(u, GridField) else u.values.ravel()
    gv = grid.values.ravel()
    free = ~grid.gamma.ravel() & np.isfinite(gv)
    diff = uv[free] - gv[free]
    out = {
        "nodes": int(free.sum()),
        "sup_abs": float(np.max(np.abs(diff))) if len(diff) else 0.0,
        "mean_abs": float(np.mean(np.abs(diff))) if len(diff) else 0.0,
        "max_excess": float(np.max(diff)) if len(diff) else 0.0,
    }
    if f is not None:
        G = grid.gamma.ravel()
        fv = f.scalar(P[G])
        out["gamma_nodes"] = int(G.sum())
        out["map_boundary_violation"] = float(np.max(np.abs(uv[G] - fv))) if G.any() else 0.0
        out["map_boundary_exact"] = bool(np.array_equal(uv[G], fv))
        out["baseline_boundary_violation"] = float(np.max(np.abs(gv[G] - fv))) if G.any() else 0.0
    return out
