"""Differentiable software rasterizer for proxy meshes.

Pixel (row r, col c) samples the continuous image point (u=c, v=r). Visibility
is a per-pixel z-buffer over perspective-correct interpolated depth; triangles
with any vertex at or behind the near plane are dropped whole. Pixels exactly
on a shared edge are assigned by the top-left fill rule, so adjacent triangles
never double-claim a pixel. Gradients flow to vertex features and decoder
parameters only; barycentrics and coverage are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContextMismatch, DimensionMismatch, IndexOutOfRange
from .geometry import PinholeCamera, ProxyMesh
from .texture import (
    Decoder,
    EncodingConfig,
    FeatureField,
    encode_features,
    encode_features_backward,
)

_MIN_SCREEN_AREA = 1e-14


@dataclass(frozen=True)
class Fragment:
    """Visible-surface sample for one pixel."""

    pixel: tuple[int, int]  # (row, col)
    triangle_index: int
    barycentric: tuple[float, float, float]
    depth: float


@dataclass
class FragmentMap:
    """Per-pixel rasterization result; triangle_index -1 marks empty pixels."""

    width: int
    height: int
    triangle_index: np.ndarray  # (H, W) int64
    barycentric: np.ndarray     # (H, W, 3)
    depth: np.ndarray           # (H, W), +inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.triangle_index >= 0

    def fragment_at(self, row: int, col: int) -> Fragment | None:
        t = int(self.triangle_index[row, col])
        if t < 0:
            return None
        return Fragment((row, col), t, tuple(self.barycentric[row, col]),
                        float(self.depth[row, col]))

    def fragments(self) -> list[Fragment]:
        rows, cols = np.nonzero(self.covered)
        return [self.fragment_at(int(r), int(c)) for r, c in zip(rows, cols)]


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by):
    # positive-orientation triangles: top edge is horizontal with b right of a,
    # left edge points toward decreasing v
    return ((ay == by) & (bx > ax)) | (by < ay)


def rasterize(mesh: ProxyMesh, cam: PinholeCamera,
              perspective_correct: bool = True) -> FragmentMap:
    """Rasterize into a FragmentMap holding the nearest triangle per pixel.

    perspective_correct=False keeps plain screen-space barycentrics in the
    fragments (depth interpolation stays perspective-correct either way).
    """
    h, w = cam.height, cam.width
    tri_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    out = FragmentMap(w, h, tri_index, bary, depth)
    if mesh.vertex_count == 0 or len(mesh.triangles) == 0:
        return out

    uv, z, valid = cam.project_points(mesh.vertices)
    tris = mesh.triangles
    keep = valid[tris].all(axis=1)
    orig_ids = np.where(keep)[0]
    if len(orig_ids) == 0:
        return out

    p = uv[tris[keep]].copy()   # (T, 3, 2)
    tz = z[tris[keep]].copy()   # (T, 3)
    area = _edge(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])
    flipped = area < 0
    if flipped.any():
        p[flipped] = p[flipped][:, [0, 2, 1]]
        tz[flipped] = tz[flipped][:, [0, 2, 1]]
        area = np.abs(area)
    ok = area > _MIN_SCREEN_AREA
    if not ok.all():
        p, tz, area, orig_ids, flipped = p[ok], tz[ok], area[ok], orig_ids[ok], flipped[ok]
    if len(orig_ids) == 0:
        return out

    cmin = np.clip(np.ceil(p[:, :, 0].min(axis=1)).astype(np.int64), 0, w - 1)
    cmax = np.clip(np.floor(p[:, :, 0].max(axis=1)).astype(np.int64), 0, w - 1)
    rmin = np.clip(np.ceil(p[:, :, 1].min(axis=1)).astype(np.int64), 0, h - 1)
    rmax = np.clip(np.floor(p[:, :, 1].max(axis=1)).astype(np.int64), 0, h - 1)
    bw = cmax - cmin + 1
    bh = rmax - rmin + 1
    # bboxes entirely off screen produce non-positive extents after clipping
    off = (p[:, :, 0].max(axis=1) < 0) | (p[:, :, 0].min(axis=1) > w - 1) | \
          (p[:, :, 1].max(axis=1) < 0) | (p[:, :, 1].min(axis=1) > h - 1)
    counts = np.where(off, 0, bw * bh)
    total = int(counts.sum())
    if total == 0:
        return out

    tri_of = np.repeat(np.arange(len(orig_ids)), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total) - starts[tri_of]
    rr = rmin[tri_of] + local // bw[tri_of]
    cc = cmin[tri_of] + local % bw[tri_of]
    px = cc.astype(float)
    py = rr.astype(float)

    a, b, c = p[tri_of, 0], p[tri_of, 1], p[tri_of, 2]
    w0 = _edge(b[:, 0], b[:, 1], c[:, 0], c[:, 1], px, py)
    w1 = _edge(c[:, 0], c[:, 1], a[:, 0], a[:, 1], px, py)
    w2 = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], px, py)
    tl0 = _top_left(p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])[tri_of]
    tl1 = _top_left(p[:, 2, 0], p[:, 2, 1], p[:, 0, 0], p[:, 0, 1])[tri_of]
    tl2 = _top_left(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1])[tri_of]
    inside = ((w0 > 0) | ((w0 == 0) & tl0)) & \
             ((w1 > 0) | ((w1 == 0) & tl1)) & \
             ((w2 > 0) | ((w2 == 0) & tl2))
    if not inside.any():
        return out

    tri_of = tri_of[inside]
    rr, cc = rr[inside], cc[inside]
    lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[tri_of, None]
    zv = tz[tri_of]
    inv_depth = (lam / zv).sum(axis=1)
    frag_depth = 1.0 / inv_depth
    if perspective_correct:
        lam = (lam / zv) * frag_depth[:, None]
    unflip = flipped[tri_of]
    if unflip.any():
        lam[unflip] = lam[unflip][:, [0, 2, 1]]

    pix = rr * w + cc
    order = np.lexsort((orig_ids[tri_of], frag_depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]

    tri_index[rr[sel], cc[sel]] = orig_ids[tri_of[sel]]
    bary[rr[sel], cc[sel]] = lam[sel]
    depth[rr[sel], cc[sel]] = frag_depth[sel]
    return out


def interpolate_features(frag: Fragment, field: FeatureField, mesh: ProxyMesh) -> np.ndarray:
    """Barycentric combination of the fragment triangle's vertex features."""
    if not (0 <= frag.triangle_index < len(mesh.triangles)):
        raise IndexOutOfRange(f"triangle {frag.triangle_index} not in mesh")
    if field.vertex_count != mesh.vertex_count:
        raise IndexOutOfRange("feature field does not match mesh vertex count")
    tri = mesh.triangles[frag.triangle_index]
    lam = np.asarray(frag.barycentric, dtype=float)
    return lam @ field.features[tri]


@dataclass
class RenderOutput:
    """Rendered raster plus the saved context needed for the backward pass."""

    color: np.ndarray      # (H, W, 3) in [0, 1]
    alpha: np.ndarray      # (H, W) in {0.0, 1.0}
    fragments: FragmentMap
    background: np.ndarray
    # saved forward context (covered pixels, row-major order)
    pix_rows: np.ndarray
    pix_cols: np.ndarray
    pix_tris: np.ndarray
    pix_bary: np.ndarray
    pix_features: np.ndarray
    pix_encoded: np.ndarray
    field_shape: tuple[int, int]


def render_image(mesh: ProxyMesh, field: FeatureField, dec: Decoder,
                 cam: PinholeCamera, enc: EncodingConfig | None = None,
                 background=(0.0, 0.0, 0.0),
                 perspective_correct: bool = True) -> RenderOutput:
    """Full forward pipeline: rasterize, interpolate, encode, decode.

    enc=None disables the sinusoidal encoding (raw features feed the decoder),
    which is the no-encoding ablation path.
    """
    if field.vertex_count != mesh.vertex_count:
        raise DimensionMismatch("feature field does not match mesh vertex count")
    fragmap = rasterize(mesh, cam, perspective_correct)
    h, w = cam.height, cam.width
    background = np.asarray(background, dtype=float).reshape(3)
    color = np.tile(background, (h, w, 1))
    alpha = np.zeros((h, w))

    rows, cols = np.nonzero(fragmap.covered)
    if len(rows):
        tris = fragmap.triangle_index[rows, cols]
        lam = fragmap.barycentric[rows, cols]
        corner = field.features[mesh.triangles[tris]]          # (P, 3, d)
        feats = np.einsum("pk,pkd->pd", lam, corner)
        encoded = encode_features(feats, enc)
        rgb = dec.forward(encoded)
        color[rows, cols] = rgb
        alpha[rows, cols] = 1.0
    else:
        d = field.dim
        feats = np.zeros((0, d))
        encoded = np.zeros((0, enc.output_width(d) if enc else d))
        tris = np.zeros(0, dtype=np.int64)
        lam = np.zeros((0, 3))

    return RenderOutput(
        color=color, alpha=alpha, fragments=fragmap, background=background,
        pix_rows=rows, pix_cols=cols, pix_tris=tris, pix_bary=lam,
        pix_features=feats, pix_encoded=encoded,
        field_shape=(field.vertex_count, field.dim),
    )


def render_backward(output_grad: np.ndarray, saved: RenderOutput,
                    mesh: ProxyMesh, field: FeatureField, dec: Decoder,
                    enc: EncodingConfig | None = None):
    """Chain pixel-color gradients back to (grad_field, grad_weights, grad_biases).

    Visibility and barycentrics are constants; vertex positions get no
    gradient. Accumulation into the field is a single deterministic
    scatter-add, so results are bit-reproducible.
    """
    output_grad = np.asarray(output_grad, dtype=float)
    if output_grad.shape != saved.color.shape:
        raise ContextMismatch("output_grad shape does not match saved render")
    if saved.field_shape != (field.vertex_count, field.dim):
        raise ContextMismatch("saved context belongs to a different field shape")

    grad_field = np.zeros_like(field.features)
    if len(saved.pix_rows) == 0:
        gw = [np.zeros_like(w) for w in dec.weights]
        gb = [np.zeros_like(b) for b in dec.biases]
        return grad_field, gw, gb

    grad_rgb = output_grad[saved.pix_rows, saved.pix_cols]
    gw, gb, grad_encoded = dec.backward(saved.pix_encoded, grad_rgb)
    grad_feats = encode_features_backward(saved.pix_features, grad_encoded, enc)
    # Eq: d(pixel feature)/d(vertex feature) = lambda * identity
    tri_verts = mesh.triangles[saved.pix_tris]              # (P, 3)
    contrib = saved.pix_bary[:, :, None] * grad_feats[:, None, :]  # (P, 3, d)
    np.add.at(grad_field, tri_verts.ravel(),
              contrib.reshape(-1, grad_feats.shape[1]))
    return grad_field, gw, gb
