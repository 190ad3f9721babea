"""Z-buffered triangle rasterization by pixel-center ray casting.

Ground-truth color, pseudo depth and foreground masks all come from here.
Depth is the ray parameter t along the unit pixel ray, not camera z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import CameraModel
from .mesh import vertex_normals

LIGHT_DIRECTION = np.array([0.35, 0.8, 0.5]) / np.linalg.norm([0.35, 0.8, 0.5])
AMBIENT = 0.5
DIFFUSE = 0.5
MASK_DILATION = 3


@dataclass
class PosedMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray | None = None

    @classmethod
    def from_hand(cls, mesh, posed_vertices) -> "PosedMesh":
        return cls(np.asarray(posed_vertices, dtype=np.float64), mesh.triangles, mesh.albedo)


@dataclass
class RasterResult:
    depth: np.ndarray  # (H, W), +inf where nothing was hit
    color: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool silhouette
    owner: np.ndarray  # (H, W) index of the mesh hit, -1 for background
    facet: np.ndarray  # (H, W) triangle index within that mesh, -1 for background


def ray_triangle(o, d, a, b, c, eps: float = 1e-12):
    """Moller-Trumbore for paired rays and triangles. Returns (t, u, v, hit)."""
    e1 = b - a
    e2 = c - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - a
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return t, u, v, hit


def _candidate_pairs(camera: CameraModel, tri_vertices: np.ndarray):
    """(triangle, pixel) pairs whose pixel center lies in the triangle's projected bbox."""
    uv, z = camera.project(tri_vertices.reshape(-1, 3))
    uv = uv.reshape(-1, 3, 2)
    z = z.reshape(-1, 3)
    front = (z > 1e-6).all(axis=1)
    uv = np.where(front[:, None, None], uv, 0.0)
    cmin = np.ceil(uv[..., 0].min(1) - 0.5).astype(np.int64)
    cmax = np.floor(uv[..., 0].max(1) - 0.5).astype(np.int64)
    rmin = np.ceil(uv[..., 1].min(1) - 0.5).astype(np.int64)
    rmax = np.floor(uv[..., 1].max(1) - 0.5).astype(np.int64)
    cmin = np.clip(cmin, 0, camera.width)
    rmin = np.clip(rmin, 0, camera.height)
    cmax = np.clip(cmax, -1, camera.width - 1)
    rmax = np.clip(rmax, -1, camera.height - 1)
    nc = np.maximum(cmax - cmin + 1, 0)
    nr = np.maximum(rmax - rmin + 1, 0)
    counts = np.where(front, nc * nr, 0)
    tri = np.repeat(np.arange(len(tri_vertices)), counts)
    if len(tri) == 0:
        return tri, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.cumsum(counts) - counts
    local = np.arange(len(tri)) - np.repeat(starts, counts)
    rows = rmin[tri] + local // nc[tri]
    cols = cmin[tri] + local % nc[tri]
    return tri, rows, cols


def rasterize(camera: CameraModel, meshes, background=(0.0, 0.0, 0.0)) -> RasterResult:
    """Render one or more posed meshes jointly with a shared z-buffer."""
    if isinstance(meshes, PosedMesh):
        meshes = [meshes]
    H, W = camera.height, camera.width
    tv_all, owner_all, local_all, offsets = [], [], [], [0]
    for k, m in enumerate(meshes):
        tv = np.asarray(m.vertices, dtype=np.float64)[m.triangles]
        tv_all.append(tv)
        owner_all.append(np.full(len(tv), k))
        local_all.append(np.arange(len(tv)))
        offsets.append(offsets[-1] + len(tv))
    depth = np.full((H, W), np.inf)
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), (H, W, 3)).copy()
    owner = np.full((H, W), -1, dtype=np.int64)
    facet = np.full((H, W), -1, dtype=np.int64)
    if not tv_all:
        return RasterResult(depth, color, depth < np.inf, owner, facet)
    tv = np.concatenate(tv_all)
    tri_owner = np.concatenate(owner_all)
    tri_local = np.concatenate(local_all)

    tri, rows, cols = _candidate_pairs(camera, tv)
    if len(tri):
        o, d = camera.rays(np.stack([rows, cols], axis=1))
        t, u, v, hit = ray_triangle(o, d, tv[tri, 0], tv[tri, 1], tv[tri, 2])
        tri, rows, cols, t, u, v = tri[hit], rows[hit], cols[hit], t[hit], u[hit], v[hit]
        pix = rows * W + cols
        order = np.lexsort((tri, t, pix))
        first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]] if len(order) else order
        pr, pc = rows[first], cols[first]
        depth[pr, pc] = t[first]
        owner[pr, pc] = tri_owner[tri[first]]
        facet[pr, pc] = tri_local[tri[first]]
        bary = np.stack([1.0 - u[first] - v[first], u[first], v[first]], axis=1)
        for k, m in enumerate(meshes):
            sel = np.flatnonzero(tri_owner[tri[first]] == k)
            if len(sel) == 0:
                continue
            f = m.triangles[tri_local[tri[first][sel]]]
            b = bary[sel]
            albedo = np.ones((len(m.vertices), 3)) if m.albedo is None else m.albedo
            alb = np.einsum("ni,nij->nj", b, albedo[f])
            normals = vertex_normals(np.asarray(m.vertices, dtype=np.float64), m.triangles)
            n = np.einsum("ni,nij->nj", b, normals[f])
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
            shade = AMBIENT + DIFFUSE * np.clip(n @ LIGHT_DIRECTION, 0.0, None)
            color[pr[sel], pc[sel]] = np.clip(alb * shade[:, None], 0.0, 1.0)
    return RasterResult(depth, color, np.isfinite(depth), owner, facet)


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def dilate_mask(mask: np.ndarray, radius: int = MASK_DILATION) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=disk(radius))


def project_bounds(camera: CameraModel, meshes, radius: int = MASK_DILATION):
    """2D bounding box (row0, col0, row1, col1) and the dilated silhouette mask."""
    if isinstance(meshes, PosedMesh):
        meshes = [meshes]
    verts = np.concatenate([np.asarray(m.vertices, dtype=np.float64) for m in meshes])
    uv, z = camera.project(verts)
    if not np.any(z > 0):
        raise ValueError("mesh lies entirely behind the camera")
    uv = uv[z > 0]
    r0 = int(np.clip(np.floor(uv[:, 1].min()), 0, camera.height - 1))
    r1 = int(np.clip(np.ceil(uv[:, 1].max()), 0, camera.height - 1))
    c0 = int(np.clip(np.floor(uv[:, 0].min()), 0, camera.width - 1))
    c1 = int(np.clip(np.ceil(uv[:, 0].max()), 0, camera.width - 1))
    sil = rasterize(camera, meshes).mask
    return (r0, c0, r1, c1), dilate_mask(sil, radius)
