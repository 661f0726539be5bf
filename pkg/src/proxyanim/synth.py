"""Synthetic meshes, images, and scene bundles for demos and verification.

Everything here is deterministic given the arguments, so fixtures can be
rebuilt on the fly instead of being committed as binary blobs.
"""

from __future__ import annotations

import numpy as np

from .geometry import PinholeCamera, PointCloud, ProxyMesh, SimilarityTransform, look_at_transform
from .raster import rasterize


def build_quad(size: float = 1.0, z: float = 0.0) -> ProxyMesh:
    s = size / 2.0
    v = np.array([[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]])
    return ProxyMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def build_cube(size: float = 1.0, center=(0.0, 0.0, 0.0)) -> ProxyMesh:
    s = size / 2.0
    c = np.asarray(center, dtype=float)
    v = np.array([[x, y, z] for x in (-s, s) for y in (-s, s) for z in (-s, s)]) + c
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # x-
        [4, 6, 7], [4, 7, 5],  # x+
        [0, 4, 5], [0, 5, 1],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [0, 2, 6], [0, 6, 4],  # z-
        [1, 5, 7], [1, 7, 3],  # z+
    ])
    return ProxyMesh(v, f)


def build_icosphere(subdivisions: int = 2, radius: float = 1.0,
                    center=(0.0, 0.0, 0.0)) -> ProxyMesh:
    """Subdivided icosahedron: 12, 42, 162, 642, 2562 vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return ProxyMesh(v, np.array(faces, dtype=np.int64))


def sample_mesh_surface(mesh: ProxyMesh, count: int,
                        rng: np.random.Generator | None = None) -> PointCloud:
    """Uniform area-weighted surface samples."""
    rng = rng or np.random.default_rng(0)
    tri = mesh.vertices[mesh.triangles]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    probs = areas / areas.sum()
    pick = rng.choice(len(areas), size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = tri[pick, 0], tri[pick, 1], tri[pick, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts)


def vertex_position_colors(mesh: ProxyMesh, frequency: float = 2.5) -> np.ndarray:
    """Smooth but non-trivial per-vertex RGB derived from vertex position."""
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    n = (v - lo) / span
    r = 0.5 + 0.45 * np.sin(frequency * np.pi * n[:, 0])
    g = 0.5 + 0.45 * np.sin(frequency * np.pi * n[:, 1] + 1.3)
    b = 0.5 + 0.45 * np.cos(frequency * np.pi * (n[:, 0] + n[:, 2]))
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def gouraud_render(mesh: ProxyMesh, vertex_colors: np.ndarray, cam: PinholeCamera,
                   background=(1.0, 1.0, 1.0)):
    """Direct barycentric interpolation of vertex colors; no neural path.

    Returns (image, coverage mask, depth map with background at +inf).
    """
    fm = rasterize(mesh, cam)
    h, w = cam.height, cam.width
    img = np.tile(np.asarray(background, dtype=float), (h, w, 1))
    rows, cols = np.nonzero(fm.covered)
    if len(rows):
        tris = fm.triangle_index[rows, cols]
        lam = fm.barycentric[rows, cols]
        img[rows, cols] = np.einsum("pk,pkc->pc", lam, vertex_colors[mesh.triangles[tris]])
    return img, fm.covered.copy(), fm.depth.copy()


def frontal_camera(image_size: int = 64, distance: float = 3.0,
                   focal_scale: float = 1.1) -> PinholeCamera:
    """Camera at +z distance looking back at the origin, unit-ish object framing."""
    f = focal_scale * image_size * distance / 4.0
    return PinholeCamera(
        fx=f, fy=f, cx=image_size / 2.0, cy=image_size / 2.0,
        width=image_size, height=image_size,
        world_to_cam=look_at_transform((0.0, 0.0, distance), (0.0, 0.0, 0.0)))


def random_similarity(rng: np.random.Generator, max_rotation_deg: float = 30.0,
                      scale_range=(0.8, 1.25), max_translation: float = 0.3) -> SimilarityTransform:
    from .geometry import quat_from_axis_angle
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    return SimilarityTransform(
        rotation=quat_from_axis_angle(axis, angle),
        translation=rng.uniform(-max_translation, max_translation, size=3),
        scale=rng.uniform(*scale_range),
    )
