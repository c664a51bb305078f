"""Oscillators, one-point and one-ball improvement, and the dyadic iteration."""

import dataclasses
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import qmc

from . import _accel, kernels
from .field import (
    PROFILE_KAPPA,
    PROFILE_LIP,
    Bump,
    BumpStack,
    _BumpArrays,
    lip_on_segment,
    local_lip,
    op_norm,
    top_right_singular,
)
from .expr import MapExpr
from .geometry import Ball, FreeRegion, Segment, SegmentLedger, maximal_packing, phi_shrink


class ConstructionError(RuntimeError):
    pass


class PreconditionError(ConstructionError):
    """Lu > psi where the construction needs a subsolution."""

    def __init__(self, message, witness=None, excess=None):
        super().__init__(message)
        self.witness = None if witness is None else np.asarray(witness, float)
        self.excess = excess


class OscillatorCeiling(ConstructionError):
    pass


class SegmentDetectionError(ConstructionError):
    def __init__(self, message, profile=None):
        super().__init__(message)
        self.profile = profile or []


# ---------------------------------------------------------------------------
# oscillators


@dataclass(frozen=True)
class OscillatorParams:
    """Amplitude and orientation policy for the bumps.

    ``eps0=None`` selects ``min(rho, sup psi * rho) / kappa`` per bump, where
    ``kappa`` is the profile's transition-zone constant; this keeps the bump
    gradient largest at the support centre.
    """

    eps0: float | None = None
    axis: int = 0
    direction: str = "hash"  # "hash" or "axis"
    seed: int = 0

    def amplitude(self, rho, sup_psi):
        if self.eps0 is not None:
            if not self.eps0 > 0:
                raise ValueError("eps0 must be positive")
            return float(self.eps0)
        return min(rho, sup_psi * rho) / PROFILE_KAPPA

    def orient(self, center, scale, d):
        e = np.zeros(d)
        e[0] = 1.0
        if self.direction == "axis":
            return e
        key = np.concatenate([[self.seed, scale], np.asarray(center, float)]).tobytes()
        theta = np.pi * (zlib.crc32(key) / 2.0**32)
        e[0], e[1] = np.cos(theta), np.sin(theta)
        return e


def continuity_constant(t_max, rho, eps0):
    """C with Lip(chi_t - chi_s, S) <= C |t - s| for t, s <= t_max."""
    return 10.0 * (1.0 + 10.0 * t_max * rho / eps0 + PROFILE_LIP)


@dataclass(frozen=True)
class OscillatorCertificate:
    t: float
    measured: float
    samples: int
    continuity: float
    passed: bool


def certify_oscillator(bump, samples=1000, D=1):
    """Lip of the bump along its direction diameter (all-pairs lower bound)."""
    seg = Segment(bump.center - bump.radius * bump.direction, bump.center + bump.radius * bump.direction)
    chi = BumpStack(MapExpr.constant(0.0, len(bump.center), D), [bump])
    return lip_on_segment(chi, seg, samples).value


def make_oscillator(S, t, params=OscillatorParams(), sup_psi=1.0, scale=0, parent=-1, D=1,
                    samples=1000, t_max=None):
    """Bump on the ball ``S`` with frequency parameter ``t`` and its certificate."""
    if t < 0:
        raise ValueError("t must be >= 0")
    eps0 = params.amplitude(S.radius, sup_psi)
    direction = params.orient(S.center, scale, len(S.center))
    bump = Bump(S.center, S.radius, direction, eps0, float(t), params.axis, scale, parent)
    C = continuity_constant(max(t, t_max or 0.0), S.radius, eps0)
    if t == 0:
        return bump, OscillatorCertificate(0.0, 0.0, 0, C, True)
    for n in (samples, 4 * samples):
        measured = certify_oscillator(bump, n, D)
        if measured >= t:
            return bump, OscillatorCertificate(float(t), measured, n, C, True)
    raise ConstructionError(f"oscillator certification failed: Lip {measured:.6g} < t = {t:.6g}")


# ---------------------------------------------------------------------------
# h(t) on a support


@lru_cache(maxsize=None)
def _unit_ball_points(d, n):
    eng = qmc.Halton(d, scramble=False)
    eng.fast_forward(1)
    out = []
    got = 0
    while got < n:
        P = 2.0 * eng.random(2 * (n - got) + 16) - 1.0
        P = P[np.sum(P * P, axis=1) < 1.0]
        out.append(P)
        got += len(P)
    pts = np.vstack(out)[:n]
    pts.setflags(write=False)
    return pts


def support_samples(S, n):
    """Deterministic samples of the support: centre plus ``n`` Halton points."""
    d = len(S.center)
    return np.vstack([S.center[None], S.center + S.radius * _unit_ball_points(d, n)])


class HProfile:
    """h(t) = max over samples z of (L(u + chi_t)(z) - psi(z)) on one support.

    The Jacobian of ``u`` is computed once; each h(t) adds the bump through
    the same kernel as the final stack, so audit values are reproduced
    bit-for-bit when the finished map is evaluated.
    """

    def __init__(self, u, psi, bump, X):
        self.u = u
        self.bump = bump
        self.X = np.ascontiguousarray(X, dtype=float)
        self.J0, self.kink = u.jacobian(self.X)
        self.J0 = np.ascontiguousarray(self.J0)
        self.psi = psi.scalar(self.X)
        diff = self.X - bump.center
        self.inside = np.flatnonzero(np.sum(diff * diff, axis=1) < bump.radius**2).astype(np.int64)
        self.evals = 0

    def lu(self, t):
        J = self.J0.copy()
        b = self.bump.with_t(t)
        arr = _BumpArrays.from_bumps([b], self.u.d)
        V = np.zeros((len(self.X), self.u.D))
        kernels.bump_accumulate(self.X, self.inside, np.zeros(len(self.inside), np.int64), arr.centers,
                                arr.radius, arr.direction, arr.axis, arr.eps0, arr.t, V, J)
        L = np.atleast_1d(op_norm(J))
        if np.any(self.kink):
            L[self.kink] = local_lip(self.u.with_bumps([b]), self.X[self.kink])
        return L

    def __call__(self, t):
        self.evals += 1
        vals = self.lu(t) - self.psi
        k = int(np.argmax(vals))
        return float(vals[k]), k


def h_profile(u, psi, S, t, samples=512, params=OscillatorParams(), scale=0):
    """h(t) for the oscillator on ``S`` (value only)."""
    if samples < 64:
        raise ValueError("h_profile needs at least 64 samples")
    sup_psi = float(np.max(psi.scalar(support_samples(S, samples))))
    bump, _ = make_oscillator(S, 0.0, params, sup_psi, scale)
    return HProfile(u, psi, bump, support_samples(S, samples))(t)[0]


# ---------------------------------------------------------------------------
# improvement at a point, on a ball, on a packing


@dataclass
class PointResult:
    bump: Bump | None
    witness: np.ndarray
    T: float
    h_T: float
    h_0: float
    bracket: tuple
    evals: int
    continuity: float
    certificate: OscillatorCertificate | None
    audit: np.ndarray = field(repr=False, default=None)


def _root(h, tol, t_max):
    """Largest probed t with h(t) <= 0 after doubling + bisection."""
    probes = [(0.0, h(0.0))]
    t = tol
    t_lo, h_lo = 0.0, probes[0][1]
    while True:
        if t > t_max:
            raise OscillatorCeiling(f"no sign change of h below t_max = {t_max:.6g}")
        ht = h(t)
        probes.append((t, ht))
        if ht[0] >= 0:
            t_hi = t
            break
        t_lo, h_lo = t, ht
        t *= 2.0
    bracket = (t_lo, t_hi)
    for _ in range(60):
        if -tol <= h_lo[0] <= 0.0:
            break
        mid = 0.5 * (t_lo + t_hi)
        hm = h(mid)
        probes.append((mid, hm))
        if hm[0] < 0:
            t_lo, h_lo = mid, hm
        else:
            t_hi = mid
    ok = [(t, v) for t, v in probes if v[0] <= 0.0]
    T, hv = max(ok, key=lambda p: p[0])
    return T, hv, bracket, probes


def improve_point(u, psi, ball, tol=1e-3, params=OscillatorParams(), samples=512, scale=0, parent=-1,
                  tol_sub=0.03, extra=None):
    """Add one oscillator on S = closure of B(x, delta / 2) inside ``ball`` = B(x, delta).

    Returns ``(v, PointResult)``. The bump parameter T is the largest probed
    t with h(t) <= 0, so every audit sample keeps Lv <= psi.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    S = Ball(ball.center, 0.5 * ball.radius)
    X = support_samples(S, samples)
    if extra is not None and len(extra):
        X = np.vstack([X, extra])
    sup_psi = float(np.max(psi.scalar(X)))
    template, _ = make_oscillator(S, 0.0, params, sup_psi, scale, parent, u.D)
    h = HProfile(u, psi, template, X)
    h0 = h(0.0)
    if h0[0] > tol_sub:
        raise PreconditionError(f"Lu exceeds psi by {h0[0]:.3g} on entry", X[h0[1]], h0[0])
    C0 = continuity_constant(0.0, S.radius, template.eps0)
    if h0[0] >= -tol:
        return u, PointResult(None, X[h0[1]], 0.0, h0[0], h0[0], (0.0, 0.0), h.evals, C0, None, X)
    t_max = 4.0 * sup_psi
    T, hT, bracket, _ = _root(h, tol, t_max)
    bump, cert = make_oscillator(S, T, params, sup_psi, scale, parent, u.D, t_max=t_max)
    bump = dataclasses.replace(bump, samples=samples)
    v = u.with_bumps([bump])
    return v, PointResult(bump, X[hT[1]], T, hT[0], h0[0], bracket, h.evals, cert.continuity, cert, X)


@dataclass
class BallResult:
    point: PointResult
    segment: Segment
    lip: float
    psi_max: float
    tries: int


def _find_segment(v, psi, z, delta, eps, directions, scale, parent, n=1000, k_max=20):
    tried = []
    for k in range(k_max + 1):
        rho = delta * 0.5**k
        for e in directions:
            seg = Segment(z - 0.5 * rho * e, z + 0.5 * rho * e, scale, parent)
            P = seg.points(n)
            psi_max = float(np.max(psi.scalar(P)))
            lip = lip_on_segment(v, seg, n).value
            tried.append((rho, lip, psi_max))
            if lip > psi_max - eps:
                return seg, lip, psi_max, len(tried)
    raise SegmentDetectionError("segment detection failed", tried)


def improve_ball(u, psi, W, eps, tol=1e-3, params=OscillatorParams(), samples=512, scale=0, parent=-1,
                 tol_sub=0.03, extra_fn=None):
    """Improve on W' = B(center, r_W / 2) and find a segment l with
    Lip(v, l) > max psi on l - eps. Returns ``(v, segment, BallResult)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    Wp = Ball(W.center, 0.5 * W.radius)
    delta = Wp.radius
    profile = []
    for n in (samples, 2 * samples):
        extra = extra_fn(Ball(Wp.center, 0.5 * delta)) if extra_fn is not None else None
        v, pr = improve_point(u, psi, Wp, tol, params, n, scale, parent, tol_sub, extra)
        z = pr.witness
        dirs = []
        if pr.bump is not None:
            dirs.append(pr.bump.direction)
        J, _ = v.jacobian(z)
        top = top_right_singular(J)
        if not dirs or abs(float(top @ dirs[0])) < 1.0 - 1e-12:
            dirs.append(top)
        try:
            seg, lip, psi_max, tries = _find_segment(v, psi, z, delta, eps, dirs, scale, parent)
        except SegmentDetectionError as err:
            profile = err.profile
            continue
        return v, seg, BallResult(pr, seg, lip, psi_max, tries)
    raise SegmentDetectionError(
        f"segment detection failed on ball at {np.array2string(W.center, precision=6)}", profile
    )


def improve_packing(u, psi, packing, eps, tol=1e-3, params=OscillatorParams(), samples=512,
                    tol_sub=0.03, extra_fn=None, threads=None):
    """Improve every ball of a packing on Phi(B); bumps have disjoint supports,
    so each ball is handled against the same ``u`` and merged in scan order."""
    balls = packing.balls()
    if not balls:
        return u, [], []
    scale = packing.scale

    def work(k):
        try:
            # the per-ball stack is dropped here: holding one full copy per ball is quadratic memory
            _, seg, res = improve_ball(u, psi, phi_shrink(balls[k]), eps, tol, params, samples, scale, k,
                                       tol_sub, extra_fn)
            return seg, res
        except ConstructionError as err:
            err.args = (f"ball {k} at scale {scale}: {err.args[0]}",) + err.args[1:]
            raise

    n_workers = min(threads or _accel.thread_cap(), len(balls))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(work, range(len(balls))))
    else:
        results = [work(k) for k in range(len(balls))]
    bumps = [r.point.bump for _, r in results if r.point.bump is not None]
    return u.with_bumps(bumps), [seg for seg, _ in results], [r for _, r in results]


# ---------------------------------------------------------------------------
# dyadic iteration


@dataclass
class ConstructConfig:
    tol_root: float = 1e-3
    tol_sub: float = 0.03
    samples: int | None = None  # None: 512 for scales <= 4, 128 beyond
    params: OscillatorParams = OscillatorParams()
    eps_schedule: object = None  # callable i -> eps, default 2**-i
    threads: int | None = None
    precondition_samples: int = 10_000

    def samples_at(self, i):
        if self.samples is not None:
            return int(self.samples)
        return 512 if i <= 4 else 128

    def eps_at(self, i):
        return self.eps_schedule(i) if self.eps_schedule is not None else 2.0**-i

    def tol_at(self, i):
        # the root only promises Lv >= psi - tol at the witness, so a segment
        # within eps needs tol well below eps once eps drops under tol_root
        return min(self.tol_root, 0.5 * self.eps_at(i))


@dataclass
class ScaleReport:
    scale: int
    radius: float
    spacing: float
    balls: int
    bumps: int
    segments: int
    eps: float
    max_deficit: float
    min_margin: float
    max_h: float
    h_evals: int
    seconds: float


@dataclass
class IterationReport:
    scales: list = field(default_factory=list)

    def add(self, row):
        self.scales.append(row)

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)


@dataclass
class IterationResult:
    u: BumpStack
    ledger: SegmentLedger
    report: IterationReport
    packings: list
    snapshots: dict  # scale -> bump count after that scale
    balls: dict  # scale -> list of BallResult

    def snapshot(self, i):
        return self.u.prefix(self.snapshots[i])


def check_precondition(f, psi, dom, n=10_000, tol=1e-12):
    """Sampled Lf <= psi on V; raises PreconditionError with the worst point."""
    X = dom.halton_free(n)
    u = BumpStack(f)
    excess = local_lip(u, X) - psi.scalar(X)
    k = int(np.argmax(excess))
    if excess[k] > tol * max(1.0, float(np.max(np.abs(psi.scalar(X))))):
        raise PreconditionError(f"Lf exceeds psi by {excess[k]:.6g}", X[k], float(excess[k]))
    return float(excess[k])


class _AuditIndex:
    """Regenerates the h-profile samples of earlier bumps that fall in a new support."""

    def __init__(self):
        self.stack = None

    def set_stack(self, u):
        self.stack = u

    def __call__(self, S):
        u = self.stack
        if u is None or len(u) == 0:
            return None
        a = u.arrays
        hits = [idx[tree.query_ball_point(S.center, rmax + S.radius)] for idx, tree, rmax in u._bump_groups()]
        cand = np.sort(np.concatenate(hits)) if hits else np.empty(0, np.int64)
        dist = np.linalg.norm(a.centers[cand] - S.center, axis=1)
        near = cand[dist < a.radius[cand] + S.radius]
        if len(near) == 0:
            return None
        pts = []
        for b in near:
            own = support_samples(Ball(a.centers[b], a.radius[b]), int(a.samples[b]))
            inside = np.sum((own - S.center) ** 2, axis=1) < S.radius**2
            pts.append(own[inside])
        P = np.vstack(pts)
        return P if len(P) else None


def iterate(f, psi, dom, i_max, cfg=None, progress=None):
    """Run scales 1..i_max: pack V minus earlier segments at radius 2^-i,
    improve every ball, and record one segment per ball."""
    cfg = cfg or ConstructConfig()
    if i_max < 0:
        raise ValueError("i_max must be >= 0")
    check_precondition(f, psi, dom, cfg.precondition_samples)
    u = BumpStack(f)
    ledger = SegmentLedger(dom.d)
    report = IterationReport()
    packings, snapshots, balls = [], {0: 0}, {}
    audit = _AuditIndex()
    for i in range(1, i_max + 1):
        t0 = time.perf_counter()
        region = FreeRegion(dom, ledger.all(), snapshot=i - 1)
        packing = maximal_packing(region, 2.0**-i, scale=i)
        audit.set_stack(u)
        eps = cfg.eps_at(i)
        u, segs, results = improve_packing(u, psi, packing, eps, cfg.tol_at(i), cfg.params, cfg.samples_at(i),
                                           cfg.tol_sub, audit, cfg.threads)
        ledger.add_scale(i, packing.centers, segs)
        packings.append(packing)
        snapshots[i] = len(u)
        balls[i] = results
        deficits = [r.psi_max - r.lip for r in results]
        margins = [r.lip - (r.psi_max - eps) for r in results]
        report.add(ScaleReport(
            scale=i,
            radius=2.0**-i,
            spacing=packing.spacing,
            balls=len(packing),
            bumps=sum(r.point.bump is not None for r in results),
            segments=len(segs),
            eps=eps,
            max_deficit=max(deficits) if deficits else float("nan"),
            min_margin=min(margins) if margins else float("nan"),
            max_h=max(r.point.h_T for r in results) if results else float("nan"),
            h_evals=sum(r.point.evals for r in results),
            seconds=time.perf_counter() - t0,
        ))
        if progress is not None:
            progress(report.scales[-1])
    return IterationResult(u, ledger, report, packings, snapshots, balls)


def homotopy_eval(u, s, x):
    """u_s: every bump's t scaled by s; s = 0 gives f and s = 1 gives u."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if s == 1.0:
        return u(x)
    return u.tscale(s)(x)

