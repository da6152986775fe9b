"""Compiled gather/scatter loops for the truncated separable Gaussian kernel.

``geom`` packs the grid/psf constants as
``(ox, oy, oz, dx, dy, dz, tr, sx, sy, sz, st, time_scale, radius)``.
Sample positions are world coordinates in mm, times in seconds.
"""
from __future__ import annotations

import math

import numba
import numpy as np

# avoid probing the (outdated) system TBB on every import
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from numba import njit, prange  # noqa: E402

SCATTER_NORMALIZED = 0
SCATTER_RAW = 1
SCATTER_NORMALIZED_SQUARED = 2


@njit(cache=True, inline="always", fastmath=True)
def _axis(center, origin, step, sigma, radius, n, scale, out):
    """Fill ``out`` with weights along one axis; return (first index, count, sum)."""
    lim = radius * sigma
    c = (center - origin) / step
    hw = lim / (step * scale)
    lo = int(math.ceil(c - hw))
    hi = int(math.floor(c + hw))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    count = hi - lo + 1
    total = 0.0
    if count <= 0:
        return lo, 0, 0.0
    for m in range(count):
        d = (origin + (lo + m) * step - center) * scale
        if abs(d) > lim:
            w = 0.0
        else:
            w = math.exp(-0.5 * (d / sigma) ** 2)
        out[m] = w
        total += w
    return lo, count, total


def window_capacity(geom: np.ndarray) -> int:
    dx, dy, dz, tr = geom[3:7]
    sx, sy, sz, st, scale, radius = geom[7:13]
    widths = (radius * sx / dx, radius * sy / dy, radius * sz / dz, radius * st / (tr * scale))
    return int(2 * math.ceil(max(widths)) + 3)


@njit(cache=True, fastmath=True)
def _gather_range(x, pts, times, geom, cap, start, stop, out, norm):
    nx, ny, nz, nt = x.shape
    ox, oy, oz, dx, dy, dz, tr = geom[0], geom[1], geom[2], geom[3], geom[4], geom[5], geom[6]
    sx, sy, sz, st, scale, radius = geom[7], geom[8], geom[9], geom[10], geom[11], geom[12]
    wx = np.empty(cap)
    wy = np.empty(cap)
    wz = np.empty(cap)
    wt = np.empty(cap)
    for n in range(start, stop):
        i0, ci, si = _axis(pts[n, 0], ox, dx, sx, radius, nx, 1.0, wx)
        j0, cj, sj = _axis(pts[n, 1], oy, dy, sy, radius, ny, 1.0, wy)
        k0, ck, sk = _axis(pts[n, 2], oz, dz, sz, radius, nz, 1.0, wz)
        l0, cl, sl = _axis(times[n], 0.0, tr, st, radius, nt, scale, wt)
        total = si * sj * sk * sl
        norm[n] = total
        if total <= 0.0:
            out[n] = 0.0
            continue
        acc = 0.0
        for a in range(ci):
            acc_j = 0.0
            for b in range(cj):
                acc_k = 0.0
                for c in range(ck):
                    acc_l = 0.0
                    for d in range(cl):
                        acc_l += wt[d] * x[i0 + a, j0 + b, k0 + c, l0 + d]
                    acc_k += wz[c] * acc_l
                acc_j += wy[b] * acc_k
            acc += wx[a] * acc_j
        out[n] = acc / total


@njit(cache=True, parallel=True)
def _gather_chunks(x, pts, times, geom, cap, bounds, out, norm):
    for c in prange(bounds.shape[0] - 1):
        _gather_range(x, pts, times, geom, cap, bounds[c], bounds[c + 1], out, norm)


def gather(x, pts, times, geom, cap, out, norm, n_chunks=None):
    """``out[n] = sum(w * x) / sum(w)`` around each sample; ``norm[n] = sum(w)``.

    Every sample is independent, so the result does not depend on the chunking.
    """
    n_samples = pts.shape[0]
    if n_chunks is None:
        n_chunks = numba.get_num_threads()
    if n_chunks <= 1 or n_samples < 2:
        _gather_range(x, pts, times, geom, cap, 0, n_samples, out, norm)
        return
    bounds = np.linspace(0, n_samples, 4 * n_chunks + 1).astype(np.int64)
    _gather_chunks(x, pts, times, geom, cap, bounds, out, norm)


@njit(cache=True)
def _scatter_range(values, pts, times, geom, cap, mode, start, stop, grid):
    nx, ny, nz, nt = grid.shape
    ox, oy, oz, dx, dy, dz, tr = geom[0], geom[1], geom[2], geom[3], geom[4], geom[5], geom[6]
    sx, sy, sz, st, scale, radius = geom[7], geom[8], geom[9], geom[10], geom[11], geom[12]
    wx = np.empty(cap)
    wy = np.empty(cap)
    wz = np.empty(cap)
    wt = np.empty(cap)
    for n in range(start, stop):
        v = values[n]
        if v == 0.0:
            continue
        i0, ci, si = _axis(pts[n, 0], ox, dx, sx, radius, nx, 1.0, wx)
        j0, cj, sj = _axis(pts[n, 1], oy, dy, sy, radius, ny, 1.0, wy)
        k0, ck, sk = _axis(pts[n, 2], oz, dz, sz, radius, nz, 1.0, wz)
        l0, cl, sl = _axis(times[n], 0.0, tr, st, radius, nt, scale, wt)
        total = si * sj * sk * sl
        if total <= 0.0:
            continue
        if mode == SCATTER_NORMALIZED:
            scale_v = v / total
        elif mode == SCATTER_RAW:
            scale_v = v
        else:
            scale_v = v / (total * total)
        for a in range(ci):
            fa = wx[a] * scale_v
            if mode == SCATTER_NORMALIZED_SQUARED:
                fa *= wx[a]
            for b in range(cj):
                fb = fa * wy[b]
                if mode == SCATTER_NORMALIZED_SQUARED:
                    fb *= wy[b]
                for c in range(ck):
                    fc = fb * wz[c]
                    if mode == SCATTER_NORMALIZED_SQUARED:
                        fc *= wz[c]
                    for d in range(cl):
                        if mode == SCATTER_NORMALIZED_SQUARED:
                            grid[i0 + a, j0 + b, k0 + c, l0 + d] += fc * wt[d] * wt[d]
                        else:
                            grid[i0 + a, j0 + b, k0 + c, l0 + d] += fc * wt[d]


@njit(cache=True, parallel=True)
def _scatter_chunks(values, pts, times, geom, cap, mode, bounds, partial):
    for c in prange(bounds.shape[0] - 1):
        _scatter_range(values, pts, times, geom, cap, mode, bounds[c], bounds[c + 1], partial[c])


def scatter(values, pts, times, geom, cap, mode, shape, n_chunks=None):
    """Accumulate kernel-weighted sample values onto a grid of ``shape``.

    Samples are split into contiguous chunks, each accumulated into its own
    partial grid; partials are summed in chunk order, so the result depends
    only on the chunk count (one per thread by default).
    """
    if n_chunks is None:
        n_chunks = numba.get_num_threads()
    n_samples = pts.shape[0]
    n_chunks = max(1, min(int(n_chunks), max(1, n_samples)))
    if n_chunks == 1:
        grid = np.zeros(shape)
        _scatter_range(values, pts, times, geom, cap, mode, 0, n_samples, grid)
        return grid
    bounds = np.linspace(0, n_samples, n_chunks + 1).astype(np.int64)
    partial = np.zeros((n_chunks, *shape))
    _scatter_chunks(values, pts, times, geom, cap, mode, bounds, partial)
    grid = partial[0]
    for c in range(1, n_chunks):
        grid += partial[c]
    return grid
