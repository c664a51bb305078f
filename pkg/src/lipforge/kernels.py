"""Hot numeric kernels, each with a numba path and a pure-numpy path.

The public functions at the bottom dispatch on :func:`lipforge._accel.backend`.
Both paths visit work items in the same order, so results agree up to
last-ulp differences between numba's libm and numpy's vectorised math.
"""

import heapq
import math

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# cutoff profile: 1 on tau <= 1/2, 0 on tau >= 1, exp-based smooth step between


def profile_np(tau):
    tau = np.asarray(tau, dtype=float)
    phi = np.where(tau <= 0.5, 1.0, 0.0)
    dphi = np.zeros_like(tau)
    mid = (tau > 0.5) & (tau < 1.0)
    if np.any(mid):
        s = 2.0 * tau[mid] - 1.0
        arg = 1.0 / (1.0 - s) - 1.0 / s
        with np.errstate(over="ignore", divide="ignore"):
            q = np.exp(np.minimum(arg, 700.0))
            p = 1.0 / (1.0 + q)
            dp = -2.0 * (1.0 / (1.0 - s) ** 2 + 1.0 / s**2) / (q + 2.0 + 1.0 / q)
        far = arg > 700.0
        phi[mid] = np.where(far, 0.0, p)
        dphi[mid] = np.where(far | (q == 0.0), 0.0, dp)
    return phi, dphi


@njit
def _profile_nb(tau):
    if tau <= 0.5:
        return 1.0, 0.0
    if tau >= 1.0:
        return 0.0, 0.0
    s = 2.0 * tau - 1.0
    arg = 1.0 / (1.0 - s) - 1.0 / s
    if arg > 700.0:
        return 0.0, 0.0
    q = math.exp(arg)
    if q == 0.0:
        return 1.0, 0.0
    return 1.0 / (1.0 + q), -2.0 * (1.0 / (1.0 - s) ** 2 + 1.0 / s**2) / (q + 2.0 + 1.0 / q)


# ---------------------------------------------------------------------------
# all-pairs maximal difference quotient


@njit
def _pair_lip_max_nb(P, U):
    n, d = P.shape
    D = U.shape[1]
    best = 0.0
    bi = -1
    bj = -1
    for i in range(n):
        for j in range(i + 1, n):
            dx2 = 0.0
            for k in range(d):
                t = P[i, k] - P[j, k]
                dx2 += t * t
            if dx2 == 0.0:
                continue
            du2 = 0.0
            for k in range(D):
                t = U[i, k] - U[j, k]
                du2 += t * t
            q2 = du2 / dx2
            if q2 > best:
                best = q2
                bi = i
                bj = j
    return math.sqrt(best), bi, bj


def _pair_lip_max_np(P, U):
    n = P.shape[0]
    best, bi, bj = 0.0, -1, -1
    block = max(1, 2_000_000 // max(n, 1))
    cols = np.arange(n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        # squared quotients, in the same operation order as the compiled loop
        dx = _sq_sum(P[start:stop, None, :] - P[None, :, :])
        du = _sq_sum(U[start:stop, None, :] - U[None, :, :])
        upper = cols[None, :] > np.arange(start, stop)[:, None]
        valid = upper & (dx > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(valid, du / np.where(valid, dx, 1.0), -1.0)
        k = int(np.argmax(q))
        r, c = divmod(k, n)
        if q[r, c] > best:
            best, bi, bj = float(q[r, c]), start + r, c
    return math.sqrt(best), bi, bj


def _sq_sum(diff):
    """Sum of squares over the last axis, accumulated left to right."""
    out = diff[..., 0] * diff[..., 0]
    for k in range(1, diff.shape[-1]):
        out = out + diff[..., k] * diff[..., k]
    return out


# ---------------------------------------------------------------------------
# lattice packing: knock out points near segments, then greedy row-major scan


@njit
def _stamp_segments_nb(mask, shape, origin, h, A, B, radius):
    d = shape.shape[0]
    strides = np.empty(d, np.int64)
    acc = 1
    for k in range(d - 1, -1, -1):
        strides[k] = acc
        acc *= shape[k]
    lo = np.empty(d, np.int64)
    hi = np.empty(d, np.int64)
    idx = np.empty(d, np.int64)
    p = np.empty(d)
    r2 = radius * radius
    for s in range(A.shape[0]):
        empty = False
        for k in range(d):
            a = min(A[s, k], B[s, k]) - radius
            b = max(A[s, k], B[s, k]) + radius
            lo[k] = max(0, int(math.floor((a - origin[k]) / h)))
            hi[k] = min(shape[k] - 1, int(math.ceil((b - origin[k]) / h)))
            if hi[k] < lo[k]:
                empty = True
        if empty:
            continue
        ab2 = 0.0
        for k in range(d):
            ab2 += (B[s, k] - A[s, k]) ** 2
        for k in range(d):
            idx[k] = lo[k]
        while True:
            flat = 0
            for k in range(d):
                p[k] = origin[k] + idx[k] * h
                flat += idx[k] * strides[k]
            if mask[flat]:
                tt = 0.0
                if ab2 > 0.0:
                    for k in range(d):
                        tt += (p[k] - A[s, k]) * (B[s, k] - A[s, k])
                    tt = min(1.0, max(0.0, tt / ab2))
                dist2 = 0.0
                for k in range(d):
                    c = A[s, k] + tt * (B[s, k] - A[s, k]) - p[k]
                    dist2 += c * c
                if dist2 < r2:
                    mask[flat] = False
            k = d - 1
            while k >= 0:
                idx[k] += 1
                if idx[k] <= hi[k]:
                    break
                idx[k] = lo[k]
                k -= 1
            if k < 0:
                break


def _stamp_segments_np(mask, shape, origin, h, A, B, radius):
    d = len(shape)
    for a, b in zip(A, B):
        lo = np.maximum(0, np.floor((np.minimum(a, b) - radius - origin) / h).astype(np.int64))
        hi = np.minimum(shape - 1, np.ceil((np.maximum(a, b) + radius - origin) / h).astype(np.int64))
        if np.any(hi < lo):
            continue
        axes = [np.arange(lo[k], hi[k] + 1) for k in range(d)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        pts = origin + grid * h
        ab = b - a
        ab2 = float(ab @ ab)
        if ab2 > 0.0:
            tt = np.clip(((pts - a) @ ab) / ab2, 0.0, 1.0)
        else:
            tt = np.zeros(len(pts))
        dist2 = np.sum((a + tt[:, None] * ab - pts) ** 2, axis=1)
        flat = np.ravel_multi_index(grid.T, tuple(shape))
        mask[flat[dist2 < radius * radius]] = False


@njit
def _greedy_scan_nb(mask, shape, offsets):
    d = shape.shape[0]
    n = mask.shape[0]
    strides = np.empty(d, np.int64)
    acc = 1
    for k in range(d - 1, -1, -1):
        strides[k] = acc
        acc *= shape[k]
    out = np.empty(n, np.int64)
    m = 0
    idx = np.empty(d, np.int64)
    for flat in range(n):
        if not mask[flat]:
            continue
        out[m] = flat
        m += 1
        rem = flat
        for k in range(d):
            idx[k] = rem // strides[k]
            rem = rem % strides[k]
        for o in range(offsets.shape[0]):
            g = 0
            ok = True
            for k in range(d):
                c = idx[k] + offsets[o, k]
                if c < 0 or c >= shape[k]:
                    ok = False
                    break
                g += c * strides[k]
            if ok:
                mask[g] = False
    return out[:m]


def _greedy_scan_np(mask, shape, offsets):
    chosen = []
    for flat in np.flatnonzero(mask):
        if not mask[flat]:
            continue
        chosen.append(flat)
        idx = np.array(np.unravel_index(flat, tuple(shape)))
        nb = idx + offsets
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        mask[np.ravel_multi_index(nb[ok].T, tuple(shape))] = False
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# bump stack accumulation over (point, bump) candidate pairs


@njit
def _bump_accumulate_nb(X, pt, bi, centers, radius, direction, axis, eps0, t, V, J, want_jac):
    d = X.shape[1]
    for q in range(pt.shape[0]):
        p = pt[q]
        b = bi[q]
        dist2 = 0.0
        xi = 0.0
        for k in range(d):
            diff = X[p, k] - centers[b, k]
            dist2 += diff * diff
            xi += diff * direction[b, k]
        dist = math.sqrt(dist2)
        rho = radius[b]
        phi, dphi = _profile_nb(dist / rho)
        e0 = eps0[b]
        phase = (10.0 * t[b] / e0) * xi
        sn = math.sin(phase)
        ax = axis[b]
        V[p, ax] += e0 * sn * phi
        if want_jac:
            cs = math.cos(phase)
            a = 10.0 * t[b] * cs * phi
            radial = 0.0
            if dphi != 0.0 and dist > 0.0:
                radial = e0 * sn * dphi / (rho * dist)
            for k in range(d):
                J[p, ax, k] += a * direction[b, k] + radial * (X[p, k] - centers[b, k])


def _bump_accumulate_np(X, pt, bi, centers, radius, direction, axis, eps0, t, V, J, want_jac):
    if pt.size == 0:
        return
    diff = X[pt] - centers[bi]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    xi = np.sum(diff * direction[bi], axis=1)
    rho = radius[bi]
    phi, dphi = profile_np(dist / rho)
    e0 = eps0[bi]
    phase = (10.0 * t[bi] / e0) * xi
    sn = np.sin(phase)
    ax = axis[bi]
    np.add.at(V, (pt, ax), e0 * sn * phi)
    if want_jac:
        cs = np.cos(phase)
        a = 10.0 * t[bi] * cs * phi
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where((dphi != 0.0) & (dist > 0.0), e0 * sn * dphi / (rho * dist), 0.0)
        grad = a[:, None] * direction[bi] + radial[:, None] * diff
        np.add.at(J, (pt, ax), grad)


# ---------------------------------------------------------------------------
# binary heap for the numba graph solvers (lazy deletion)


@njit
def _heap_push(keys, vals, size, key, val):
    if size >= keys.shape[0]:
        nk = np.empty(2 * keys.shape[0], keys.dtype)
        nv = np.empty(2 * vals.shape[0], vals.dtype)
        nk[:size] = keys[:size]
        nv[:size] = vals[:size]
        keys = nk
        vals = nv
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] > keys[i] or (keys[parent] == keys[i] and vals[parent] > vals[i]):
            keys[parent], keys[i] = keys[i], keys[parent]
            vals[parent], vals[i] = vals[i], vals[parent]
            i = parent
        else:
            break
    return keys, vals, size + 1


@njit
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        m = i
        if left < size and (keys[left] < keys[m] or (keys[left] == keys[m] and vals[left] < vals[m])):
            m = left
        if right < size and (keys[right] < keys[m] or (keys[right] == keys[m] and vals[right] < vals[m])):
            m = right
        if m == i:
            break
        keys[m], keys[i] = keys[i], keys[m]
        vals[m], vals[i] = vals[i], vals[m]
        i = m
    return key, val, size


@njit
def _unravel(flat, strides, d, out):
    rem = flat
    for k in range(d):
        out[k] = rem // strides[k]
        rem = rem % strides[k]


def _strides(shape):
    d = len(shape)
    strides = np.empty(d, np.int64)
    acc = 1
    for k in range(d - 1, -1, -1):
        strides[k] = acc
        acc *= int(shape[k])
    return strides


# ---------------------------------------------------------------------------
# multi-source Dijkstra on the (3^d - 1)-neighbour lattice


@njit
def _lattice_dijkstra_nb(init, psi, shape, strides, offsets, lengths):
    n = init.shape[0]
    d = shape.shape[0]
    val = init.copy()
    origin = np.full(n, -1, np.int64)
    done = np.zeros(n, np.bool_)
    keys = np.empty(max(16, 2 * n))
    vals = np.empty(max(16, 2 * n), np.int64)
    size = 0
    for i in range(n):
        if np.isfinite(val[i]):
            origin[i] = i
            keys, vals, size = _heap_push(keys, vals, size, val[i], i)
    idx = np.empty(d, np.int64)
    while size > 0:
        key, i, size = _heap_pop(keys, vals, size)
        if done[i] or key > val[i]:
            continue
        done[i] = True
        _unravel(i, strides, d, idx)
        for o in range(offsets.shape[0]):
            g = 0
            ok = True
            for k in range(d):
                c = idx[k] + offsets[o, k]
                if c < 0 or c >= shape[k]:
                    ok = False
                    break
                g += c * strides[k]
            if not ok or done[g]:
                continue
            cand = val[i] + lengths[o] * 0.5 * (psi[i] + psi[g])
            if cand < val[g]:
                val[g] = cand
                origin[g] = origin[i]
                keys, vals, size = _heap_push(keys, vals, size, cand, g)
    return val, origin


def _lattice_dijkstra_np(init, psi, shape, strides, offsets, lengths):
    n = init.shape[0]
    val = init.copy()
    origin = np.full(n, -1, np.int64)
    done = np.zeros(n, bool)
    heap = []
    for i in np.flatnonzero(np.isfinite(val)):
        origin[i] = i
        heap.append((val[i], int(i)))
    heapq.heapify(heap)
    shp = tuple(int(s) for s in shape)
    while heap:
        key, i = heapq.heappop(heap)
        if done[i] or key > val[i]:
            continue
        done[i] = True
        idx = np.array(np.unravel_index(i, shp))
        nb = idx + offsets
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        gs = nb[ok] @ strides
        for g, length in zip(gs, lengths[ok]):
            if done[g]:
                continue
            cand = val[i] + length * 0.5 * (psi[i] + psi[g])
            if cand < val[g]:
                val[g] = cand
                origin[g] = origin[i]
                heapq.heappush(heap, (cand, int(g)))
    return val, origin


# ---------------------------------------------------------------------------
# first-order fast marching (axis stencil, upwind quadratic update)


@njit
def _fmm_update(a, m, rhs):
    # a[:m] sorted ascending upwind values; solve sum (u - a_k)^2 = rhs^2
    u = a[0] + rhs
    s1 = a[0]
    s2 = a[0] * a[0]
    for j in range(1, m):
        if u <= a[j]:
            break
        s1 += a[j]
        s2 += a[j] * a[j]
        cnt = j + 1
        disc = s1 * s1 - cnt * (s2 - rhs * rhs)
        if disc < 0.0:
            break
        u = (s1 + math.sqrt(disc)) / cnt
    return u


@njit
def _fast_march_nb(init, psi, shape, strides, h):
    n = init.shape[0]
    d = shape.shape[0]
    val = init.copy()
    done = np.zeros(n, np.bool_)
    keys = np.empty(max(16, 2 * n))
    vals = np.empty(max(16, 2 * n), np.int64)
    size = 0
    for i in range(n):
        if np.isfinite(val[i]):
            keys, vals, size = _heap_push(keys, vals, size, val[i], i)
    idx = np.empty(d, np.int64)
    jdx = np.empty(d, np.int64)
    a = np.empty(d)
    while size > 0:
        key, i, size = _heap_pop(keys, vals, size)
        if done[i] or key > val[i]:
            continue
        done[i] = True
        _unravel(i, strides, d, idx)
        for k in range(d):
            for sgn in (-1, 1):
                c = idx[k] + sgn
                if c < 0 or c >= shape[k]:
                    continue
                g = i + sgn * strides[k]
                if done[g]:
                    continue
                _unravel(g, strides, d, jdx)
                m = 0
                for kk in range(d):
                    best = np.inf
                    for s2 in (-1, 1):
                        cc = jdx[kk] + s2
                        if cc < 0 or cc >= shape[kk]:
                            continue
                        gg = g + s2 * strides[kk]
                        if done[gg] and val[gg] < best:
                            best = val[gg]
                    if best < np.inf:
                        a[m] = best
                        m += 1
                a[:m].sort()
                cand = _fmm_update(a, m, h * psi[g])
                if cand < val[g]:
                    val[g] = cand
                    keys, vals, size = _heap_push(keys, vals, size, cand, g)
    return val


def _fmm_update_py(a, rhs):
    a = sorted(a)
    u = a[0] + rhs
    s1, s2 = a[0], a[0] * a[0]
    for j in range(1, len(a)):
        if u <= a[j]:
            break
        s1 += a[j]
        s2 += a[j] * a[j]
        cnt = j + 1
        disc = s1 * s1 - cnt * (s2 - rhs * rhs)
        if disc < 0.0:
            break
        u = (s1 + math.sqrt(disc)) / cnt
    return u


def _fast_march_np(init, psi, shape, strides, h):
    n = init.shape[0]
    d = len(shape)
    val = init.copy()
    done = np.zeros(n, bool)
    heap = [(val[i], int(i)) for i in np.flatnonzero(np.isfinite(val))]
    heapq.heapify(heap)
    shp = tuple(int(s) for s in shape)
    strides = [int(s) for s in strides]
    while heap:
        key, i = heapq.heappop(heap)
        if done[i] or key > val[i]:
            continue
        done[i] = True
        idx = np.unravel_index(i, shp)
        for k in range(d):
            for sgn in (-1, 1):
                c = idx[k] + sgn
                if c < 0 or c >= shp[k]:
                    continue
                g = i + sgn * strides[k]
                if done[g]:
                    continue
                jdx = np.unravel_index(g, shp)
                a = []
                for kk in range(d):
                    best = math.inf
                    for s2 in (-1, 1):
                        cc = jdx[kk] + s2
                        if 0 <= cc < shp[kk]:
                            gg = g + s2 * strides[kk]
                            if done[gg] and val[gg] < best:
                                best = val[gg]
                    if best < math.inf:
                        a.append(best)
                cand = _fmm_update_py(a, h * psi[g])
                if cand < val[g]:
                    val[g] = cand
                    heapq.heappush(heap, (cand, g))
    return val


# ---------------------------------------------------------------------------
# dispatchers


def _pick(nb, np_):
    return nb if _accel.backend() == "numba" else np_


def pair_lip_max(P, U):
    """Max of |U_i - U_j| / |P_i - P_j| over pairs; returns (value, i, j)."""
    P = np.ascontiguousarray(P, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    best, i, j = _pick(_pair_lip_max_nb, _pair_lip_max_np)(P, U)
    return float(best), int(i), int(j)


def stamp_segments(mask, shape, origin, h, A, B, radius):
    """Clear lattice points strictly closer than ``radius`` to any segment."""
    if len(A) == 0:
        return
    _pick(_stamp_segments_nb, _stamp_segments_np)(
        mask,
        np.asarray(shape, np.int64),
        np.asarray(origin, float),
        float(h),
        np.ascontiguousarray(A, dtype=float),
        np.ascontiguousarray(B, dtype=float),
        float(radius),
    )


def greedy_scan(mask, shape, offsets):
    """Row-major greedy selection; each pick clears ``flat + offsets``."""
    return _pick(_greedy_scan_nb, _greedy_scan_np)(
        mask, np.asarray(shape, np.int64), np.ascontiguousarray(offsets, dtype=np.int64)
    )


def bump_accumulate(X, pt, bi, centers, radius, direction, axis, eps0, t, V, J=None):
    """Add bump values (and gradients if ``J`` is given) into ``V``/``J`` in pair order."""
    want = J is not None
    if J is None:
        J = np.zeros((1, 1, 1))
    _pick(_bump_accumulate_nb, _bump_accumulate_np)(
        X, pt, bi, centers, radius, direction, axis, eps0, t, V, J, want
    )


def lattice_dijkstra(init, psi, shape, offsets, lengths):
    shape = np.asarray(shape, np.int64)
    strides = _strides(shape)
    return _pick(_lattice_dijkstra_nb, _lattice_dijkstra_np)(
        np.asarray(init, float), np.asarray(psi, float), shape, strides,
        np.ascontiguousarray(offsets, dtype=np.int64), np.asarray(lengths, float),
    )


def fast_march(init, psi, shape, h):
    shape = np.asarray(shape, np.int64)
    strides = _strides(shape)
    return _pick(_fast_march_nb, _fast_march_np)(
        np.asarray(init, float), np.asarray(psi, float), shape, strides, float(h)
    )
