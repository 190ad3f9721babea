"""Procedural capsule hand mesh, blend weights, nearest-facet queries and bounds."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..mathcore import mirror_points
from .facets import FacetGrid, brute_force_facets
from .kinematics import FINGERS, N_JOINTS, PARENTS, Skeleton

SEGMENTS = 12
CAP_RINGS = 3
RING_SPACING = 0.05
WEIGHT_POWER = 4.0
# secondary weights below this vanish, keeping blend zones close to the joints
BLEND_CUTOFF = 0.4
BOUNDS_INFLATION = 0.05

# finger -> (MCP position, spread angle in the y-z plane, phalanx lengths, radii)
_FINGER_LAYOUT = {
    "index": ((0.0, 0.44, 0.13), 0.10, (0.20, 0.13, 0.10), (0.042, 0.038, 0.034)),
    "middle": ((0.0, 0.46, 0.04), 0.02, (0.22, 0.14, 0.105), (0.043, 0.039, 0.035)),
    "ring": ((0.0, 0.44, -0.05), -0.07, (0.20, 0.13, 0.10), (0.041, 0.037, 0.033)),
    "pinky": ((0.0, 0.40, -0.135), -0.16, (0.16, 0.10, 0.085), (0.036, 0.032, 0.029)),
    "thumb": ((0.0, 0.10, 0.12), 0.75, (0.18, 0.15, 0.12), (0.055, 0.048, 0.042)),
}
_FINGER_HUE = {"index": 0.02, "middle": 0.10, "ring": 0.16, "pinky": 0.88, "thumb": 0.55}
PALM_RADIUS = 0.06


@dataclass
class Capsule:
    joint: int
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass
class SkinnedHandMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    weights: np.ndarray
    albedo: np.ndarray
    side: str = "right"
    capsules: list = field(default_factory=list)
    vertex_capsule: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.side not in ("left", "right"):
            raise ValueError(f"hand side must be 'left' or 'right', got {self.side!r}")

    def validate(self):
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(1) - 1.0) > 1e-6):
            raise ValueError("blend weights must be nonnegative and sum to 1")

    def mirrored(self) -> "SkinnedHandMesh":
        """Reflect through x = 0; winding is flipped so normals stay outward."""
        caps = [Capsule(c.joint, mirror_points(c.a), mirror_points(c.b), c.radius) for c in self.capsules]
        return SkinnedHandMesh(
            mirror_points(self.vertices),
            self.triangles[:, ::-1].copy(),
            self.weights.copy(),
            self.albedo.copy(),
            "left" if self.side == "right" else "right",
            caps,
            None if self.vertex_capsule is None else self.vertex_capsule.copy(),
        )


def capsule_mesh(a, b, radius, segments: int = SEGMENTS, cap_rings: int = CAP_RINGS, ring_spacing: float = RING_SPACING):
    """Closed capsule surface around segment a-b. Returns (vertices, triangles)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 0.0, 1.0])
    e1 = np.cross(ref, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    phi = 2 * np.pi * np.arange(segments) / segments
    circle = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2

    # (center, ring radius) along the capsule from pole a to pole b
    rings = []
    for k in range(1, cap_rings + 1):
        th = 0.5 * np.pi * k / cap_rings
        rings.append((a - radius * np.cos(th) * axis, radius * np.sin(th)))
    n_mid = max(int(round(length / ring_spacing)) - 1, 0)
    for k in range(1, n_mid + 1):
        rings.append((a + axis * length * k / (n_mid + 1), radius))
    for k in range(cap_rings, 0, -1):
        th = 0.5 * np.pi * k / cap_rings
        rings.append((b + radius * np.cos(th) * axis, radius * np.sin(th)))

    verts = [a - radius * axis]
    for center, r in rings:
        verts.extend(center + r * circle)
    verts.append(b + radius * axis)
    verts = np.asarray(verts)

    tris = []
    S = segments
    for s in range(S):
        tris.append((0, 1 + (s + 1) % S, 1 + s))
    for k in range(len(rings) - 1):
        base0 = 1 + k * S
        base1 = 1 + (k + 1) * S
        for s in range(S):
            s1 = (s + 1) % S
            tris.append((base0 + s, base0 + s1, base1 + s1))
            tris.append((base0 + s, base1 + s1, base1 + s))
    last = len(verts) - 1
    base = 1 + (len(rings) - 1) * S
    for s in range(S):
        tris.append((base + s, base + (s + 1) % S, last))
    tris = np.asarray(tris, dtype=np.int64)
    # orient outward: check the first cylinder quad
    c = verts[tris].mean(1)
    n = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
    t = np.clip(((c - a) @ (b - a)) / length**2, 0, 1)
    out = c - (a + t[:, None] * (b - a))
    if np.sum(np.einsum("ij,ij->i", n, out)) < 0:
        tris = tris[:, ::-1].copy()
    return verts, tris


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _hand_layout(rng):
    """Joint rest positions and capsule list for a right hand."""
    pos = np.zeros((N_JOINTS, 3))
    capsules = []
    for name, joints in FINGERS.items():
        base, spread, lengths, radii = _FINGER_LAYOUT[name]
        scale = 1.0 + 0.03 * rng.standard_normal()
        d = np.array([0.0, np.cos(spread), np.sin(spread)])
        p = np.array(base, dtype=np.float64)
        for j, L, r in zip(joints, lengths, radii):
            pos[j] = p
            q = p + d * L * scale
            capsules.append(Capsule(j, p.copy(), q.copy(), r))
            p = q
        start = np.array([0.0, 0.03, 0.5 * base[2]])
        capsules.append(Capsule(0, start, np.array(base, dtype=np.float64), PALM_RADIUS))
    capsules.sort(key=lambda c: c.joint)
    return pos, capsules


def _albedo(capsules, vertex_capsule, verts, rng):
    owner_finger = {}
    for name, joints in FINGERS.items():
        for k, j in enumerate(joints):
            owner_finger[j] = (name, k)
    colors = np.zeros((len(verts), 3))
    for ci, cap in enumerate(capsules):
        idx = np.flatnonzero(vertex_capsule == ci)
        if cap.joint == 0:
            base = np.array(colorsys.hsv_to_rgb(0.07, 0.35, 0.82))
        else:
            name, k = owner_finger[cap.joint]
            value = 0.85 if k % 2 == 0 else 0.62
            base = np.array(colorsys.hsv_to_rgb(_FINGER_HUE[name], 0.5, value))
        colors[idx] = base
    # back of the (right) hand is on +x; darker so handedness is visible
    back = verts[:, 0] > 0.0
    colors[back] *= 0.78
    colors += rng.uniform(-0.04, 0.04, size=colors.shape)
    return np.clip(colors, 0.0, 1.0)


def generate_procedural_hand(side: str = "right", seed: int = 0):
    """Build a (Skeleton, SkinnedHandMesh) pair; the left hand is the mirror of the right."""
    rng = np.random.default_rng(seed)
    pos, capsules = _hand_layout(rng)
    offsets = pos.copy()
    for j, p in enumerate(PARENTS):
        if p >= 0:
            offsets[j] = pos[j] - pos[p]
    skeleton = Skeleton(PARENTS, offsets)

    verts, tris, owner = [], [], []
    n = 0
    for ci, cap in enumerate(capsules):
        v, t = capsule_mesh(cap.a, cap.b, cap.radius)
        verts.append(v)
        tris.append(t + n)
        owner.append(np.full(len(v), ci))
        n += len(v)
    verts = np.vstack(verts)
    tris = np.vstack(tris)
    vertex_capsule = np.concatenate(owner)

    # inverse-distance weights over the two nearest bones
    dist = np.full((len(verts), N_JOINTS), np.inf)
    for cap in capsules:
        dist[:, cap.joint] = np.minimum(dist[:, cap.joint], _segment_distance(verts, cap.a, cap.b))
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :2]
    d2 = np.take_along_axis(dist, nearest, axis=1)
    inv = 1.0 / np.maximum(d2, 1e-9) ** WEIGHT_POWER
    w2 = inv / inv.sum(1, keepdims=True)
    weights = np.zeros((len(verts), N_JOINTS))
    np.put_along_axis(weights, nearest, w2, axis=1)
    weights = np.clip((weights - BLEND_CUTOFF) / (1.0 - 2.0 * BLEND_CUTOFF), 0.0, 1.0)
    weights /= weights.sum(1, keepdims=True)

    albedo = _albedo(capsules, vertex_capsule, verts, rng)
    mesh = SkinnedHandMesh(verts, tris, weights, albedo, "right", capsules, vertex_capsule)
    if side == "left":
        return skeleton.mirrored(), mesh.mirrored()
    if side != "right":
        raise ValueError(f"hand side must be 'left' or 'right', got {side!r}")
    return skeleton, mesh


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, all (n, 3).

    Returns barycentric coordinates (n, 3) of the closest point.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom

    n = len(p)
    bary = np.empty((n, 3))
    bary[:] = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=1)
    regions = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), lambda m: np.stack([np.zeros(m.sum()), 1 - w_bc[m], w_bc[m]], 1)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), lambda m: np.stack([1 - w_ac[m], np.zeros(m.sum()), w_ac[m]], 1)),
        ((d6 >= 0) & (d5 <= d6), lambda m: np.tile([0.0, 0.0, 1.0], (m.sum(), 1))),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), lambda m: np.stack([1 - v_ab[m], v_ab[m], np.zeros(m.sum())], 1)),
        ((d3 >= 0) & (d4 <= d3), lambda m: np.tile([0.0, 1.0, 0.0], (m.sum(), 1))),
        ((d1 <= 0) & (d2 <= 0), lambda m: np.tile([1.0, 0.0, 0.0], (m.sum(), 1))),
    ]
    # applied lowest priority first so the vertex regions win
    for mask, fill in regions:
        if mask.any():
            bary[mask] = fill(mask)
    return bary


def point_triangle_distance(points, tri_vertices):
    """Distances and barycentrics between paired points (n, 3) and triangles (n, 3, 3)."""
    a, b, c = tri_vertices[:, 0], tri_vertices[:, 1], tri_vertices[:, 2]
    bary = closest_points_on_triangles(points, a, b, c)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return np.linalg.norm(points - closest, axis=1), bary


@dataclass
class FacetQuery:
    facet: np.ndarray
    distance: np.ndarray
    bary: np.ndarray
    weights: np.ndarray
    far: np.ndarray  # True where distance is only known to exceed the far threshold


class FacetLocator:
    """Exact nearest-triangle search over a posed mesh, with blend-weight lookup."""

    def __init__(self, vertices, triangles, weights, cell: float = 0.04):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if len(self.triangles) == 0:
            raise ValueError("cannot query an empty mesh")
        self.weights = np.asarray(weights, dtype=np.float64)
        self.grid = FacetGrid(self.vertices[self.triangles], cell=cell)

    def query(self, points, far_threshold: float | None = None) -> FacetQuery:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        thr = np.inf if far_threshold is None else far_threshold
        facet, dist, bary, far = self.grid.query(points, thr)
        safe = np.where(far, 0, facet)
        weights = np.einsum("ni,nij->nj", bary, self.weights[self.triangles[safe]])
        weights[far] = 0.0
        return FacetQuery(facet, dist, bary, weights, far)


def brute_force_nearest_facet(vertices, triangles, point):
    """Exhaustive scan of every triangle; returns (facet, distance, bary)."""
    tv = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)]
    f, d, b = brute_force_facets(np.asarray(point, dtype=np.float64)[None], tv)
    return int(f[0]), float(d[0]), b[0]


def query_blend_weights(posed_vertices, mesh: SkinnedHandMesh, x_ob, locator: FacetLocator | None = None):
    """Nearest-facet barycentric blend weights for one or many points."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot query an empty mesh")
    locator = locator or FacetLocator(posed_vertices, mesh.triangles, mesh.weights)
    single = np.ndim(x_ob) == 1
    q = locator.query(np.atleast_2d(x_ob))
    if single:
        return q.weights[0], int(q.facet[0]), float(q.distance[0])
    return q.weights, q.facet, q.distance


def scene_bounds(posed_vertices) -> tuple[np.ndarray, np.ndarray]:
    """AABB inflated on every side by 5% of its diagonal."""
    v = np.asarray(posed_vertices)
    lo, hi = v.min(0), v.max(0)
    margin = BOUNDS_INFLATION * np.linalg.norm(hi - lo)
    return lo - margin, hi + margin


def vertex_normals(vertices, triangles):
    tv = vertices[triangles]
    fn = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, triangles[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(norm, 1e-12)
