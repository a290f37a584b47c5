"""k-nearest-neighbor queries over point clouds via a uniform grid.

A brute-force implementation is kept alongside as the test oracle. Both
return neighbors sorted by (distance, index) so results are deterministic
under distance ties. The grid query walk is numba-compiled; it expands
Chebyshev rings of cells around the query until the k-th best distance is
provably inside the scanned radius.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def brute_force_knn(points, queries, k, exclude_self=False):
    """O(N*Q) reference kNN.

    Args:
        points: (N, 3) cloud to search.
        queries: (Q, 3) query positions. With exclude_self=True, queries must
            be the points array itself (row i skips neighbor i).
        k: neighbors per query.
    Returns:
        (indices (Q, k), distances (Q, k)) sorted ascending by distance.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = points.shape[0]
    k = min(k, n - 1 if exclude_self else n)
    if k <= 0:
        raise ValueError("not enough points for the requested k")
    d2 = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=2)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    # lexicographic (distance, index) for deterministic ties
    order = np.lexsort((np.broadcast_to(np.arange(n), d2.shape), d2), axis=1)
    idx = order[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return idx, dist


@njit(cache=True)
def _knn_kernel(points, order, cell_ptr, dims, origin, cell_size,
                queries, self_query, k, out_idx, out_dist):
    nx, ny, nz = dims[0], dims[1], dims[2]
    nq = queries.shape[0]
    for qi in range(nq):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        cx = int(np.floor((qx - origin[0]) / cell_size))
        cy = int(np.floor((qy - origin[1]) / cell_size))
        cz = int(np.floor((qz - origin[2]) / cell_size))
        # farthest cell of the occupied box, for the full-coverage stop
        fx = max(abs(cx), abs(cx - (nx - 1)))
        fy = max(abs(cy), abs(cy - (ny - 1)))
        fz = max(abs(cz), abs(cz - (nz - 1)))
        rmax = max(fx, max(fy, fz))

        best_d = np.full(k, np.inf)
        best_i = np.full(k, -1, dtype=np.int64)
        count = 0
        r = max(0, max(-cx, cx - (nx - 1)))
        r = max(r, max(-cy, cy - (ny - 1)))
        r = max(r, max(-cz, cz - (nz - 1)))  # rings below never touch the box
        while True:
            x0 = max(cx - r, 0)
            x1 = min(cx + r, nx - 1)
            y0 = max(cy - r, 0)
            y1 = min(cy + r, ny - 1)
            z0 = max(cz - r, 0)
            z1 = min(cz + r, nz - 1)
            for x in range(x0, x1 + 1):
                for y in range(y0, y1 + 1):
                    for z in range(z0, z1 + 1):
                        ring = max(abs(x - cx), max(abs(y - cy), abs(z - cz)))
                        if ring != r:
                            continue
                        cid = (x * ny + y) * nz + z
                        for pp in range(cell_ptr[cid], cell_ptr[cid + 1]):
                            pi = order[pp]
                            if self_query and pi == qi:
                                continue
                            dx = points[pi, 0] - qx
                            dy = points[pi, 1] - qy
                            dz = points[pi, 2] - qz
                            d = np.sqrt(dx * dx + dy * dy + dz * dz)
                            # insert keeping (distance, index) order
                            if count < k or d < best_d[k - 1] or (
                                d == best_d[k - 1] and pi < best_i[k - 1]
                            ):
                                j = min(count, k - 1)
                                while j > 0 and (
                                    best_d[j - 1] > d
                                    or (best_d[j - 1] == d and best_i[j - 1] > pi)
                                ):
                                    best_d[j] = best_d[j - 1]
                                    best_i[j] = best_i[j - 1]
                                    j -= 1
                                best_d[j] = d
                                best_i[j] = pi
                                if count < k:
                                    count += 1
            # unscanned cells only hold points at distance >= r*cell_size
            if count >= k and best_d[k - 1] <= r * cell_size:
                break
            if r >= rmax:
                break
            r += 1
        for j in range(k):
            out_idx[qi, j] = best_i[j]
            out_dist[qi, j] = best_d[j]


class SpatialGrid:
    """Uniform dense grid over a point cloud for kNN queries."""

    def __init__(self, points, cell_size=None):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        n = self.points.shape[0]
        if n == 0:
            raise ValueError("empty point cloud")
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        extent = np.maximum(hi - lo, 1e-12)
        if cell_size is None:
            # a handful of points per cell on average
            cell_size = max(float(np.cbrt(extent.prod() / n)) * 2.0, 1e-9)
        # bound the dense grid size for degenerate aspect ratios
        for _ in range(64):
            dims = np.floor(extent / cell_size).astype(np.int64) + 1
            if dims.prod() <= 4 * n + 1024:
                break
            cell_size *= 1.5
        self.cell_size = float(cell_size)
        self.origin = lo
        self.dims = dims
        cells = np.floor((self.points - lo) / self.cell_size).astype(np.int64)
        cells = np.minimum(cells, dims - 1)  # hi-boundary points
        linear = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
        self._order = np.argsort(linear, kind="stable")
        counts = np.bincount(linear, minlength=int(dims.prod()))
        self._cell_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def knn(self, queries=None, k=1):
        """k nearest neighbors per query, sorted by (distance, index).

        queries=None queries the grid's own points and excludes each point
        from its own neighborhood.
        """
        exclude_self = queries is None
        if exclude_self:
            queries = self.points
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        n = self.points.shape[0]
        k_eff = min(k, n - 1 if exclude_self else n)
        if k_eff <= 0:
            raise ValueError("not enough points for the requested k")
        Q = queries.shape[0]
        out_idx = np.empty((Q, k_eff), dtype=np.int64)
        out_dist = np.empty((Q, k_eff), dtype=np.float64)
        _knn_kernel(self.points, self._order, self._cell_ptr, self.dims,
                    self.origin, self.cell_size, queries, exclude_self,
                    k_eff, out_idx, out_dist)
        return out_idx, out_dist

    def nearest(self, queries):
        idx, dist = self.knn(queries, k=1)
        return idx[:, 0], dist[:, 0]


def nearest_neighbors(points, k=1, exclude_self=True):
    """Self-kNN over a cloud (grid-accelerated)."""
    grid = SpatialGrid(points)
    if exclude_self:
        return grid.knn(None, k=k)
    return grid.knn(points, k=k)


def nearest_vertex(vertices, queries):
    """Index and distance of the closest template vertex per query point."""
    grid = SpatialGrid(vertices)
    return grid.nearest(queries)
