"""Core 3D types and primitives.

Vectors are numpy arrays of shape (3,), point sets are (N, 3) float64 arrays.
Quaternions are stored (w, x, y, z) and kept unit-norm. All types are value
objects: operations never mutate their inputs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import TargetTooSmall

# Points at or behind this camera-space depth are treated as behind the camera.
EPS_NEAR = 1e-6


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return quat_identity()
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Rotation matrix to quaternion, numerically stable for all traces."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_rotate(q, points) -> np.ndarray:
    """Rotate one point (3,) or a stack (N, 3) by quaternion q."""
    r = quat_to_matrix(q)
    pts = np.asarray(points, dtype=float)
    return pts @ r.T


def quat_angle(q) -> float:
    """Rotation angle of q in radians, in [0, pi]."""
    w = np.clip(abs(quat_normalize(q)[0]), -1.0, 1.0)
    return 2.0 * np.arccos(w)


# ---------------------------------------------------------------------------
# transforms and cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityTransform:
    """7-DoF similarity: p -> scale * R(p) + translation."""

    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be a positive finite scalar")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform()

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * quat_rotate(self.rotation, pts) + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other: (self.compose(other))(p) == self(other(p))."""
        return SimilarityTransform(
            rotation=quat_mul(self.rotation, other.rotation),
            translation=self.apply(other.translation),
            scale=self.scale * other.scale,
        )

    def inverse(self) -> "SimilarityTransform":
        qi = quat_conjugate(self.rotation)
        return SimilarityTransform(
            rotation=qi,
            translation=-quat_rotate(qi, self.translation) / self.scale,
            scale=1.0 / self.scale,
        )

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics plus a rigid world-to-camera transform (+z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: SimilarityTransform = field(default_factory=SimilarityTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if abs(self.world_to_cam.scale - 1.0) > 1e-9:
            raise ValueError("world_to_cam must be rigid (scale 1)")

    def project_points(self, points):
        """Project (N, 3) world points.

        Returns (uv, depth, valid): uv is (N, 2) pixel coordinates, depth the
        camera-space z, valid False where the point is at or behind the near
        plane (uv/depth undefined there).
        """
        pc = self.world_to_cam.apply(np.atleast_2d(np.asarray(points, dtype=float)))
        z = pc[:, 2]
        valid = z > EPS_NEAR
        zsafe = np.where(valid, z, 1.0)
        u = self.fx * pc[:, 0] / zsafe + self.cx
        v = self.fy * pc[:, 1] / zsafe + self.cy
        return np.stack([u, v], axis=1), z, valid

    def project_point(self, point):
        """Project one point; None when at or behind the near plane."""
        uv, z, valid = self.project_points(np.asarray(point, dtype=float)[None, :])
        if not valid[0]:
            return None
        return float(uv[0, 0]), float(uv[0, 1]), float(z[0])

    def unproject(self, u, v, depth) -> np.ndarray:
        """Pixel coordinates + camera depth back to world points."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        z = np.asarray(depth, dtype=float)
        pc = np.stack([(u - self.cx) / self.fx * z,
                       (v - self.cy) / self.fy * z,
                       z], axis=-1)
        return self.world_to_cam.inverse().apply(pc)

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_to_cam.inverse().translation


def look_at_transform(eye, target, up=(0.0, 1.0, 0.0)) -> SimilarityTransform:
    """Rigid world-to-camera transform for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("eye and target coincide")
    z = fwd / n
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-12:
        # view direction parallel to up: fall back to a perpendicular axis
        up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])  # rows are camera axes in world coords
    return SimilarityTransform(rotation=quat_from_matrix(r), translation=-r @ eye)


def camera_from_spherical(template: PinholeCamera, center, azimuth_deg: float,
                          elevation_deg: float, radius: float) -> PinholeCamera:
    """Camera on a sphere around center, intrinsics copied from template.

    Azimuth is reduced modulo 360 before use so +360 deg reproduces the same
    camera bit-exactly.
    """
    center = np.asarray(center, dtype=float)
    az = np.radians(azimuth_deg % 360.0)
    el = np.radians(elevation_deg)
    offset = radius * np.array([np.cos(el) * np.sin(az),
                                np.sin(el),
                                np.cos(el) * np.cos(az)])
    eye = center + offset
    return replace(template, world_to_cam=look_at_transform(eye, center))


# ---------------------------------------------------------------------------
# point clouds and meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(col) != len(pts):
                raise ValueError("colors length must match points")
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return len(self.points)

    def bbox_diagonal(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


@dataclass(frozen=True)
class ProxyMesh:
    """Sparse triangulated proxy geometry: vertices (N, 3), triangles (M, 3) ints."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(t) and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def unique_edges(self) -> np.ndarray:
        """All unique undirected edges, rows sorted (i < j), lexicographic order."""
        t = self.triangles
        if len(t) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def vertex_rings(self) -> list[np.ndarray]:
        """Per-vertex sorted 1-ring neighbor indices."""
        rings = [set() for _ in range(self.vertex_count)]
        for a, b in self.unique_edges():
            rings[a].add(int(b))
            rings[b].add(int(a))
        return [np.array(sorted(r), dtype=np.int64) for r in rings]

    def bbox_diagonal(self) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def euler_characteristic(self) -> int:
        return self.vertex_count - len(self.unique_edges()) + len(self.triangles)


def apply_transform(t: SimilarityTransform, cloud: PointCloud) -> PointCloud:
    """Transform every point, preserving order and colors."""
    return PointCloud(t.apply(cloud.points), cloud.colors)


# ---------------------------------------------------------------------------
# decimation (quadric error edge collapse)
# ---------------------------------------------------------------------------

def _face_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    nn = np.linalg.norm(n)
    if nn < 1e-20:
        return np.zeros((4, 4))
    n = n / nn
    d = -np.dot(n, p0)
    plane = np.append(n, d)
    return np.outer(plane, plane) * nn  # area weighting

def _optimal_position(q, vi, vj):
    a = q[:3, :3]
    b = -q[:3, 3]
    try:
        if np.linalg.cond(a) < 1e8:
            return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        pass
    # fall back to the cheapest of the endpoints and midpoint
    candidates = [vi, vj, 0.5 * (vi + vj)]
    costs = [_quadric_cost(q, c) for c in candidates]
    return candidates[int(np.argmin(costs))]

def _quadric_cost(q, v):
    h = np.append(v, 1.0)
    return float(h @ q @ h)


def decimate_mesh(mesh: ProxyMesh, target_vertices: int) -> ProxyMesh:
    """Reduce a mesh to roughly target_vertices by quadric-error edge collapse.

    Collapses are applied cheapest-first, restricted by the link condition (no
    non-manifold pinches, Euler characteristic preserved on closed manifolds)
    and a normal-flip rejection. Returns the input unchanged when it is already
    at or below the target.
    """
    if target_vertices < 4:
        raise TargetTooSmall(f"target_vertices must be >= 4, got {target_vertices}")
    n = mesh.vertex_count
    if n <= target_vertices:
        return mesh

    verts = mesh.vertices.copy()
    alive_v = np.ones(n, dtype=bool)
    faces = [tuple(int(i) for i in tri) for tri in mesh.triangles]
    alive_f = np.ones(len(faces), dtype=bool)
    vertex_faces = [set() for _ in range(n)]
    for fi, (a, b, c) in enumerate(faces):
        vertex_faces[a].add(fi)
        vertex_faces[b].add(fi)
        vertex_faces[c].add(fi)

    quadrics = np.zeros((n, 4, 4))
    for fi, (a, b, c) in enumerate(faces):
        q = _face_quadric(verts[a], verts[b], verts[c])
        quadrics[a] += q
        quadrics[b] += q
        quadrics[c] += q

    version = np.zeros(n, dtype=np.int64)

    def neighbors(i):
        nb = set()
        for fi in vertex_faces[i]:
            nb.update(faces[fi])
        nb.discard(i)
        return nb

    def push_edge(heap, i, j):
        if i > j:
            i, j = j, i
        q = quadrics[i] + quadrics[j]
        pos = _optimal_position(q, verts[i], verts[j])
        cost = _quadric_cost(q, pos)
        heapq.heappush(heap, (cost, i, j, int(version[i]), int(version[j]), tuple(pos)))

    heap: list = []
    seen = set()
    for a, b, c in faces:
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                push_edge(heap, *key)

    remaining = n
    while remaining > target_vertices and heap:
        cost, i, j, vi_ver, vj_ver, pos = heapq.heappop(heap)
        if not (alive_v[i] and alive_v[j]):
            continue
        if version[i] != vi_ver or version[j] != vj_ver:
            continue
        ni, nj = neighbors(i), neighbors(j)
        if j not in ni:
            continue  # edge no longer exists
        shared_faces = vertex_faces[i] & vertex_faces[j]
        wing = set()
        for fi in shared_faces:
            wing.update(v for v in faces[fi] if v != i and v != j)
        if ni & nj != wing:
            continue  # link condition: collapse would pinch the surface
        # reject collapses that flip a surviving face
        flips = False
        for fi in (vertex_faces[i] | vertex_faces[j]) - shared_faces:
            a, b, c = faces[fi]
            old = np.cross(verts[b] - verts[a], verts[c] - verts[a])
            pa, pb, pc = (pos if v == i or v == j else verts[v] for v in (a, b, c))
            new = np.cross(pb - pa, pc - pa)
            if np.dot(old, new) <= 0:
                flips = True
                break
        if flips:
            continue

        # collapse j into i at pos
        pos = np.asarray(pos)
        verts[i] = pos
        quadrics[i] = quadrics[i] + quadrics[j]
        alive_v[j] = False
        for fi in shared_faces:
            alive_f[fi] = False
            for v in faces[fi]:
                vertex_faces[v].discard(fi)
        for fi in list(vertex_faces[j]):
            a, b, c = faces[fi]
            faces[fi] = tuple(i if v == j else v for v in (a, b, c))
            vertex_faces[i].add(fi)
            vertex_faces[j].discard(fi)
        version[i] += 1
        version[j] += 1
        remaining -= 1
        for k in neighbors(i):
            version[k] += 1
            push_edge(heap, i, k)
            for m in neighbors(k):
                if alive_v[m]:
                    push_edge(heap, k, m)

    remap = -np.ones(n, dtype=np.int64)
    remap[alive_v] = np.arange(int(alive_v.sum()))
    new_faces = []
    for fi, f in enumerate(faces):
        if alive_f[fi] and len(set(f)) == 3:
            new_faces.append([remap[v] for v in f])
    return ProxyMesh(verts[alive_v], np.array(new_faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def laplacian_smooth(cloud: PointCloud, neighbors_k: int, lam: float,
                     iterations: int, mask) -> PointCloud:
    """Move masked points toward the centroid of their k nearest neighbors.

    One iteration is a simultaneous update from the iteration-start positions;
    neighbors are re-queried every iteration. Unmasked points are returned
    bit-identical to the input.
    """
    if neighbors_k < 1:
        raise ValueError("neighbors_k must be >= 1")
    if len(cloud) == 0:
        raise ValueError("cloud must be non-empty")
    mask = np.asarray(mask, dtype=bool).reshape(len(cloud))
    pts = cloud.points.copy()
    sel = np.where(mask)[0]
    if len(sel) == 0 or iterations == 0:
        return PointCloud(pts, cloud.colors)
    k = min(neighbors_k, len(pts) - 1)
    if k < 1:
        return PointCloud(pts, cloud.colors)
    for _ in range(iterations):
        tree = cKDTree(pts)
        _, idx = tree.query(pts[sel], k=k + 1)
        idx = np.atleast_2d(idx)
        new_pos = np.empty((len(sel), 3))
        for row, (i, nb) in enumerate(zip(sel, idx)):
            others = [j for j in nb if j != i][:k]
            centroid = pts[others].mean(axis=0)
            new_pos[row] = pts[i] + lam * (centroid - pts[i])
        pts[sel] = new_pos
    return PointCloud(pts, cloud.colors)
