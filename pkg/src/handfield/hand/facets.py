"""Exact nearest-triangle queries: a uniform-grid search and an exhaustive scan.

Both paths share one scalar closest-point kernel, so they agree bitwise,
including tie-breaks (lowest triangle index wins on equal distance).
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _dist_at(px, py, pz, tv, u, v, w):
    qx = u * tv[0, 0] + v * tv[1, 0] + w * tv[2, 0]
    qy = u * tv[0, 1] + v * tv[1, 1] + w * tv[2, 1]
    qz = u * tv[0, 2] + v * tv[1, 2] + w * tv[2, 2]
    dx, dy, dz = px - qx, py - qy, pz - qz
    return np.sqrt(dx * dx + dy * dy + dz * dz), u, v, w


@numba.njit(cache=True)
def _closest_bary(px, py, pz, tv):
    """Distance and barycentrics of the closest point on triangle ``tv`` (Voronoi-region test)."""
    ax, ay, az = tv[0, 0], tv[0, 1], tv[0, 2]
    bx, by, bz = tv[1, 0], tv[1, 1], tv[1, 2]
    cx, cy, cz = tv[2, 0], tv[2, 1], tv[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return _dist_at(px, py, pz, tv, 1.0, 0.0, 0.0)
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return _dist_at(px, py, pz, tv, 0.0, 1.0, 0.0)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return _dist_at(px, py, pz, tv, 1.0 - t, t, 0.0)
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return _dist_at(px, py, pz, tv, 0.0, 0.0, 1.0)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return _dist_at(px, py, pz, tv, 1.0 - t, 0.0, t)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return _dist_at(px, py, pz, tv, 0.0, 1.0 - t, t)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return _dist_at(px, py, pz, tv, 1.0 - v - w, v, w)


@numba.njit(cache=True)
def _brute(points, tri_vertices, facet, dist, bary):
    for i in range(points.shape[0]):
        best = np.inf
        for t in range(tri_vertices.shape[0]):
            d, u, v, w = _closest_bary(points[i, 0], points[i, 1], points[i, 2], tri_vertices[t])
            if d < best:
                best = d
                facet[i] = t
                bary[i, 0], bary[i, 1], bary[i, 2] = u, v, w
        dist[i] = best


@numba.njit(cache=True)
def _grid_query(points, tri_vertices, centers, radii, lo, cell, dims, cell_start, cell_tris, far_threshold, facet, dist, bary, far):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        fx = (px - lo[0]) / cell
        fy = (py - lo[1]) / cell
        fz = (pz - lo[2]) / cell
        if fx < 0 or fy < 0 or fz < 0 or fx >= nx or fy >= ny or fz >= nz:
            # outside the grid: exhaustive scan
            best = np.inf
            for t in range(tri_vertices.shape[0]):
                d, u, v, w = _closest_bary(px, py, pz, tri_vertices[t])
                if d < best:
                    best = d
                    facet[i] = t
                    bary[i, 0], bary[i, 1], bary[i, 2] = u, v, w
            dist[i] = best
            far[i] = best > far_threshold
            continue
        ix, iy, iz = int(fx), int(fy), int(fz)
        best = np.inf
        best_t = -1
        s = 0
        max_s = max(nx, max(ny, nz))
        while s <= max_s:
            # the block of shells < s around the home cell excludes everything within this distance
            if s > 0:
                bx0 = max(ix - (s - 1), 0)
                by0 = max(iy - (s - 1), 0)
                bz0 = max(iz - (s - 1), 0)
                bx1 = min(ix + s, nx)
                by1 = min(iy + s, ny)
                bz1 = min(iz + s, nz)
                lb = np.inf
                if bx0 > 0:
                    lb = min(lb, px - (lo[0] + bx0 * cell))
                if bx1 < nx:
                    lb = min(lb, lo[0] + bx1 * cell - px)
                if by0 > 0:
                    lb = min(lb, py - (lo[1] + by0 * cell))
                if by1 < ny:
                    lb = min(lb, lo[1] + by1 * cell - py)
                if bz0 > 0:
                    lb = min(lb, pz - (lo[2] + bz0 * cell))
                if bz1 < nz:
                    lb = min(lb, lo[2] + bz1 * cell - pz)
                if lb > best or lb > far_threshold:
                    break
            for cx in range(ix - s, ix + s + 1):
                if cx < 0 or cx >= nx:
                    continue
                for cy in range(iy - s, iy + s + 1):
                    if cy < 0 or cy >= ny:
                        continue
                    for cz in range(iz - s, iz + s + 1):
                        if cz < 0 or cz >= nz:
                            continue
                        if max(abs(cx - ix), max(abs(cy - iy), abs(cz - iz))) != s:
                            continue
                        c = (cx * ny + cy) * nz + cz
                        if cell_start[c] == cell_start[c + 1]:
                            continue
                        # distance from the point to this cell's box
                        ex = max(lo[0] + cx * cell - px, max(px - (lo[0] + (cx + 1) * cell), 0.0))
                        ey = max(lo[1] + cy * cell - py, max(py - (lo[1] + (cy + 1) * cell), 0.0))
                        ez = max(lo[2] + cz * cell - pz, max(pz - (lo[2] + (cz + 1) * cell), 0.0))
                        if np.sqrt(ex * ex + ey * ey + ez * ez) > min(best, far_threshold):
                            continue
                        for k in range(cell_start[c], cell_start[c + 1]):
                            t = cell_tris[k]
                            ddx = px - centers[t, 0]
                            ddy = py - centers[t, 1]
                            ddz = pz - centers[t, 2]
                            # triangles beyond the far threshold cannot make the point near
                            if np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz) - radii[t] > min(best, far_threshold):
                                continue
                            d, u, v, w = _closest_bary(px, py, pz, tri_vertices[t])
                            if d < best or (d == best and t < best_t):
                                best = d
                                best_t = t
                                bary[i, 0], bary[i, 1], bary[i, 2] = u, v, w
            s += 1
        facet[i] = best_t
        dist[i] = best
        far[i] = best > far_threshold


class FacetGrid:
    """Uniform grid over a triangle soup for exact nearest-facet search."""

    def __init__(self, tri_vertices, cell: float = 0.04, pad: float = 0.3):
        self.tri_vertices = np.ascontiguousarray(tri_vertices, dtype=np.float64)
        T = len(self.tri_vertices)
        if T == 0:
            raise ValueError("cannot query an empty mesh")
        self.centers = self.tri_vertices.mean(1)
        self.radii = np.linalg.norm(self.tri_vertices - self.centers[:, None], axis=2).max(1)
        tlo = self.tri_vertices.min(1)
        thi = self.tri_vertices.max(1)
        self.lo = tlo.min(0) - pad
        hi = thi.max(0) + pad
        self.cell = float(cell)
        self.dims = np.maximum(np.ceil((hi - self.lo) / cell).astype(np.int64), 1)
        c0 = np.floor((tlo - self.lo) / cell).astype(np.int64)
        c1 = np.floor((thi - self.lo) / cell).astype(np.int64)
        span = c1 - c0 + 1
        counts = span.prod(1)
        tri_ids = np.repeat(np.arange(T), counts)
        local = np.concatenate([np.arange(n) for n in counts])
        sp = span[tri_ids]
        ox = local // (sp[:, 1] * sp[:, 2])
        oy = (local // sp[:, 2]) % sp[:, 1]
        oz = local % sp[:, 2]
        cells = c0[tri_ids] + np.stack([ox, oy, oz], 1)
        ny, nz = self.dims[1], self.dims[2]
        cell_id = (cells[:, 0] * ny + cells[:, 1]) * nz + cells[:, 2]
        order = np.lexsort((tri_ids, cell_id))
        self.cell_tris = tri_ids[order].astype(np.int64)
        n_cells = int(self.dims.prod())
        self.cell_start = np.zeros(n_cells + 1, dtype=np.int64)
        np.add.at(self.cell_start, cell_id + 1, 1)
        self.cell_start = np.cumsum(self.cell_start)

    def query(self, points, far_threshold: float = np.inf):
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        n = len(points)
        facet = np.full(n, -1, dtype=np.int64)
        dist = np.zeros(n)
        bary = np.zeros((n, 3))
        far = np.zeros(n, dtype=np.bool_)
        _grid_query(
            points, self.tri_vertices, self.centers, self.radii, self.lo, self.cell, self.dims,
            self.cell_start, self.cell_tris, float(far_threshold), facet, dist, bary, far,
        )
        return facet, dist, bary, far


def brute_force_facets(points, tri_vertices):
    """Exhaustive all-triangles scan; returns (facet, distance, bary)."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    tv = np.ascontiguousarray(tri_vertices, dtype=np.float64)
    if len(tv) == 0:
        raise ValueError("cannot query an empty mesh")
    n = len(points)
    facet = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n)
    bary = np.zeros((n, 3))
    _brute(points, tv, facet, dist, bary)
    return facet, dist, bary
