"""Exact nearest neighbours on a uniform grid (numba)."""

import math

import numpy as np

from ._accel import njit


@njit(cache=True)
def build_grid(points, cells_per_axis):
    lo = np.empty(3)
    hi = np.empty(3)
    for d in range(3):
        lo[d] = points[:, d].min()
        hi[d] = points[:, d].max()
    extent = max(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2])
    h = extent / cells_per_axis if extent > 0 else 1.0
    dims = np.empty(3, dtype=np.int64)
    for d in range(3):
        dims[d] = max(1, int(math.floor((hi[d] - lo[d]) / h)) + 1)
    n = points.shape[0]
    cell_of = np.empty(n, dtype=np.int64)
    counts = np.zeros(dims[0] * dims[1] * dims[2] + 1, dtype=np.int64)
    for i in range(n):
        cx = min(int((points[i, 0] - lo[0]) / h), dims[0] - 1)
        cy = min(int((points[i, 1] - lo[1]) / h), dims[1] - 1)
        cz = min(int((points[i, 2] - lo[2]) / h), dims[2] - 1)
        c = (cx * dims[1] + cy) * dims[2] + cz
        cell_of[i] = c
        counts[c + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    sorted_idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = cell_of[i]
        sorted_idx[fill[c]] = i
        fill[c] += 1
    return lo, h, dims, start, sorted_idx


@njit(cache=True)
def query_grid(queries, points, lo, h, dims, start, sorted_idx):
    """Nearest point index and squared distance per query; ties go to the smaller index."""
    m = queries.shape[0]
    out_idx = np.empty(m, dtype=np.int64)
    out_d2 = np.empty(m)
    max_r = max(dims[0], dims[1], dims[2])
    for q in range(m):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        ccx = int(math.floor((qx - lo[0]) / h))
        ccy = int(math.floor((qy - lo[1]) / h))
        ccz = int(math.floor((qz - lo[2]) / h))
        # distance (in cells) from the query cell to the grid, so shells start where points exist
        off = 0
        for c, dmax in ((ccx, dims[0]), (ccy, dims[1]), (ccz, dims[2])):
            if c < 0:
                off = max(off, -c)
            elif c >= dmax:
                off = max(off, c - dmax + 1)
        best = -1
        best_d2 = np.inf
        r = off
        while True:
            for ix in range(ccx - r, ccx + r + 1):
                if ix < 0 or ix >= dims[0]:
                    continue
                ex = abs(ix - ccx) == r
                for iy in range(ccy - r, ccy + r + 1):
                    if iy < 0 or iy >= dims[1]:
                        continue
                    ey = ex or abs(iy - ccy) == r
                    for iz in range(ccz - r, ccz + r + 1):
                        if iz < 0 or iz >= dims[2]:
                            continue
                        if not (ey or abs(iz - ccz) == r):
                            continue
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        for k in range(start[c], start[c + 1]):
                            j = sorted_idx[k]
                            dx = qx - points[j, 0]
                            dy = qy - points[j, 1]
                            dz = qz - points[j, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best_d2 or (d2 == best_d2 and j < best):
                                best_d2 = d2
                                best = j
            # unvisited cells lie at least r*h away
            bound = r * h * (1.0 - 1e-9)
            if best >= 0 and best_d2 < bound * bound:
                break
            if r > max_r + off + 1:
                break
            r += 1
        out_idx[q] = best
        out_d2[q] = best_d2
    return out_idx, out_d2


@njit(cache=True)
def nearest(queries, points):
    n = points.shape[0]
    cells = max(1, int(round((n / 2.0) ** (1.0 / 3.0))))
    lo, h, dims, start, sorted_idx = build_grid(points, cells)
    return query_grid(queries, points, lo, h, dims, start, sorted_idx)
