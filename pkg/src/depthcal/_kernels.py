"""Compiled per-point kernels: radius search, neighborhood statistics, gradients.

Every kernel writes to disjoint output slots and sums in a fixed order, so
results do not depend on the number of worker threads.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit, prange

from .errors import InvalidParameterError

_OPTS = dict(cache=True, nogil=True)


# -- fixed-radius search on a uniform grid ---------------------------------


@njit(**_OPTS)
def _cell_keys(points, cell, lo, dims):
    n = points.shape[0]
    keys = np.empty(n, np.int64)
    coords = np.empty((n, 3), np.int64)
    for i in range(n):
        for a in range(3):
            coords[i, a] = int(math.floor((points[i, a] - lo[a]) / cell))
        keys[i] = (coords[i, 0] * dims[1] + coords[i, 1]) * dims[2] + coords[i, 2]
    return keys, coords


@njit(parallel=True, **_OPTS)
def _radius_pass(points, radius, order, cell_keys_sorted, cell_start, cell_end, coords, dims, indptr, indices, fill):
    n = points.shape[0]
    r2 = radius * radius
    counts = np.zeros(n, np.int64)
    for i in prange(n):
        cnt = 0
        base = indptr[i] if fill else 0
        cx, cy, cz = coords[i, 0], coords[i, 1], coords[i, 2]
        for dx in range(-1, 2):
            x = cx + dx
            if x < 0 or x >= dims[0]:
                continue
            for dy in range(-1, 2):
                y = cy + dy
                if y < 0 or y >= dims[1]:
                    continue
                for dz in range(-1, 2):
                    z = cz + dz
                    if z < 0 or z >= dims[2]:
                        continue
                    key = (x * dims[1] + y) * dims[2] + z
                    c = np.searchsorted(cell_keys_sorted, key)
                    if c >= cell_keys_sorted.shape[0] or cell_keys_sorted[c] != key:
                        continue
                    for s in range(cell_start[c], cell_end[c]):
                        j = order[s]
                        d0 = points[i, 0] - points[j, 0]
                        d1 = points[i, 1] - points[j, 1]
                        d2 = points[i, 2] - points[j, 2]
                        if d0 * d0 + d1 * d1 + d2 * d2 <= r2:
                            if fill:
                                indices[base + cnt] = j
                            cnt += 1
        counts[i] = cnt
        if fill:
            indices[base:base + cnt].sort()
    return counts


def radius_neighbors(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact fixed-radius neighbor lists in CSR form ``(indptr, indices)``.

    A pair is neighbors when its squared distance is at most ``radius**2``;
    each list is sorted and contains the point itself.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        return np.zeros(1, np.int64), np.zeros(0, np.int32)
    if not radius > 0:
        raise InvalidParameterError("radius must be positive")
    if not np.all(np.isfinite(points)):
        raise InvalidParameterError("radius search needs finite point coordinates")
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    dims = (np.floor(span / radius).astype(np.int64) + 1)
    keys, coords = _cell_keys(points, float(radius), lo, dims)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    sorted_keys = keys[order]
    uniq, start = np.unique(sorted_keys, return_index=True)
    end = np.append(start[1:], n)
    dummy = np.zeros(0, np.int32)
    indptr = np.zeros(n + 1, np.int64)
    counts = _radius_pass(points, float(radius), order, uniq, start, end, coords, dims, indptr, dummy, False)
    np.cumsum(counts, out=indptr[1:])
    indices = np.empty(indptr[-1], np.int32)
    _radius_pass(points, float(radius), order, uniq, start, end, coords, dims, indptr, indices, True)
    return indptr, indices


# -- symmetric 3x3 eigen-decomposition (cyclic Jacobi) ---------------------


@njit(**_OPTS)
def _jacobi3(a, w, v):
    """Eigen-pairs of symmetric ``a`` (destroyed), ascending, into ``w`` and columns of ``v``."""
    for r in range(3):
        for c in range(3):
            v[r, c] = 1.0 if r == c else 0.0
    for sweep in range(50):
        off = abs(a[0, 1]) + abs(a[0, 2]) + abs(a[1, 2])
        if off == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                if sweep > 3 and abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + g == abs(h):
                    t = apq / h
                else:
                    theta = 0.5 * h / apq
                    t = 1.0 / (abs(theta) + math.sqrt(1.0 + theta * theta))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                tau = s / (1.0 + c)
                a[p, p] -= t * apq
                a[q, q] += t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for r in range(3):
                    if r != p and r != q:
                        grp = a[r, p]
                        grq = a[r, q]
                        a[r, p] = grp - s * (grq + grp * tau)
                        a[p, r] = a[r, p]
                        a[r, q] = grq + s * (grp - grq * tau)
                        a[q, r] = a[r, q]
                for r in range(3):
                    grp = v[r, p]
                    grq = v[r, q]
                    v[r, p] = grp - s * (grq + grp * tau)
                    v[r, q] = grq + s * (grp - grq * tau)
    # sort ascending
    d0, d1, d2 = a[0, 0], a[1, 1], a[2, 2]
    i0, i1, i2 = 0, 1, 2
    if d0 > d1:
        d0, d1 = d1, d0
        i0, i1 = i1, i0
    if d1 > d2:
        d1, d2 = d2, d1
        i1, i2 = i2, i1
    if d0 > d1:
        d0, d1 = d1, d0
        i0, i1 = i1, i0
    w[0], w[1], w[2] = d0, d1, d2
    tmp = v.copy()
    for r in range(3):
        v[r, 0] = tmp[r, i0]
        v[r, 1] = tmp[r, i1]
        v[r, 2] = tmp[r, i2]


@njit(parallel=True, **_OPTS)
def eigh3_batch(cov):
    """Batched ascending eigen-decomposition of symmetric ``(n, 3, 3)`` matrices."""
    n = cov.shape[0]
    w = np.empty((n, 3))
    v = np.empty((n, 3, 3))
    for i in prange(n):
        a = cov[i].copy()
        wi = np.empty(3)
        vi = np.empty((3, 3))
        _jacobi3(a, wi, vi)
        w[i] = wi
        v[i] = vi
    return w, v


# -- neighborhood statistics -----------------------------------------------


@njit(parallel=True, **_OPTS)
def neighborhood_stats(points, valid, indptr, indices, scan_ids, scan_origins):
    """Valid-neighbor count, mean, unbiased covariance and viewpoint dispersion per point.

    Rows with fewer than two valid neighbors get a zero covariance.
    """
    n = points.shape[0]
    n_scans = scan_origins.shape[0]
    counts = np.zeros(n, np.int64)
    means = np.zeros((n, 3))
    covs = np.zeros((n, 3, 3))
    dispersion = np.zeros(n)
    for i in prange(n):
        seen = np.zeros(n_scans, np.bool_)
        cnt = 0
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            if not valid[j]:
                continue
            cnt += 1
            s0 += points[j, 0]
            s1 += points[j, 1]
            s2 += points[j, 2]
            seen[scan_ids[j]] = True
        counts[i] = cnt
        if cnt == 0:
            continue
        m0 = s0 / cnt
        m1 = s1 / cnt
        m2 = s2 / cnt
        means[i, 0] = m0
        means[i, 1] = m1
        means[i, 2] = m2
        if cnt < 2:
            continue
        c00 = c01 = c02 = c11 = c12 = c22 = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            if not valid[j]:
                continue
            x0 = points[j, 0] - m0
            x1 = points[j, 1] - m1
            x2 = points[j, 2] - m2
            c00 += x0 * x0
            c01 += x0 * x1
            c02 += x0 * x2
            c11 += x1 * x1
            c12 += x1 * x2
            c22 += x2 * x2
        f = 1.0 / (cnt - 1)
        covs[i, 0, 0] = c00 * f
        covs[i, 0, 1] = covs[i, 1, 0] = c01 * f
        covs[i, 0, 2] = covs[i, 2, 0] = c02 * f
        covs[i, 1, 1] = c11 * f
        covs[i, 1, 2] = covs[i, 2, 1] = c12 * f
        covs[i, 2, 2] = c22 * f
        # dispersion of the distinct viewpoints, unbiased covariance trace
        nv = 0
        o0 = o1 = o2 = 0.0
        for k in range(n_scans):
            if seen[k]:
                nv += 1
                o0 += scan_origins[k, 0]
                o1 += scan_origins[k, 1]
                o2 += scan_origins[k, 2]
        if nv > 1:
            o0 /= nv
            o1 /= nv
            o2 /= nv
            acc = 0.0
            for k in range(n_scans):
                if seen[k]:
                    a0 = scan_origins[k, 0] - o0
                    a1 = scan_origins[k, 1] - o1
                    a2 = scan_origins[k, 2] - o2
                    acc += a0 * a0 + a1 * a1 + a2 * a2
            dispersion[i] = acc / (nv - 1)
    return counts, means, covs, dispersion


@njit(parallel=True, **_OPTS)
def gather_min_eig_gradient(points, valid, indptr, indices, weights, means, u1):
    """``g_j = sum_i weights_i * (u1_i . (x_j - mean_i)) * u1_i`` over neighborhoods ``i`` containing ``j``.

    Uses the symmetry of the neighbor relation: the neighborhoods containing
    ``j`` are exactly the neighbors of ``j``.
    """
    n = points.shape[0]
    grad = np.zeros((n, 3))
    for j in prange(n):
        if not valid[j]:
            continue
        g0 = g1 = g2 = 0.0
        for e in range(indptr[j], indptr[j + 1]):
            i = indices[e]
            c = weights[i]
            if c == 0.0:
                continue
            proj = (u1[i, 0] * (points[j, 0] - means[i, 0])
                    + u1[i, 1] * (points[j, 1] - means[i, 1])
                    + u1[i, 2] * (points[j, 2] - means[i, 2]))
            f = c * proj
            g0 += f * u1[i, 0]
            g1 += f * u1[i, 1]
            g2 += f * u1[i, 2]
        grad[j, 0] = g0
        grad[j, 1] = g1
        grad[j, 2] = g2
    return grad


@njit(parallel=True, **_OPTS)
def gather_trace_gradient(points, valid, indptr, indices, weights, means):
    """``g_j = sum_i weights_i * (x_j - mean_i)`` over neighborhoods ``i`` containing ``j``."""
    n = points.shape[0]
    grad = np.zeros((n, 3))
    for j in prange(n):
        if not valid[j]:
            continue
        g0 = g1 = g2 = 0.0
        for e in range(indptr[j], indptr[j + 1]):
            i = indices[e]
            c = weights[i]
            if c == 0.0:
                continue
            g0 += c * (points[j, 0] - means[i, 0])
            g1 += c * (points[j, 1] - means[i, 1])
            g2 += c * (points[j, 2] - means[i, 2])
        grad[j, 0] = g0
        grad[j, 1] = g1
        grad[j, 2] = g2
    return grad


def set_threads(n: int | None) -> None:
    """Cap compiled-kernel worker threads; ``None`` or 0 means all available."""
    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(limit if not n else max(1, min(int(n), limit)))
