"""Registration of the generated 3D asset onto the pixel-aligned depth cloud.

Three stages: closed-form-per-iteration ICP with optional scale, gradient-free
mask-reprojection refinement of the 7-DoF transform, and fusion of the two
clouds (depth cloud kept verbatim, aligned asset contributing back-surface and
out-of-mask points, seam band relaxed by Laplacian smoothing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .errors import DegenerateInput, DimensionMismatch, EmptyMask
from .geometry import (
    PinholeCamera,
    PointCloud,
    ProxyMesh,
    SimilarityTransform,
    apply_transform,
    decimate_mesh,
    laplacian_smooth,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_mul,
    quat_to_matrix,
)


@dataclass(frozen=True)
class BinaryMask:
    """Row-major boolean raster; bits[r, c] pairs with image pixel (r, c)."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError("mask bits must be a 2-D raster")
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    convergence_eps: float = 1e-7
    estimate_scale: bool = True
    # None: 10% of the target cloud's bbox diagonal
    max_correspondence_dist: float | None = None
    restarts: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be positive")


def _check_not_degenerate(cloud: PointCloud, name: str):
    pts = cloud.points
    if len(pts) < 3:
        raise DegenerateInput(f"{name} needs >= 3 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] < 1e-12 * max(sv[0], 1.0):
        raise DegenerateInput(f"{name} is collinear")


def _umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool) -> SimilarityTransform:
    """Closed-form least-squares similarity fit src -> dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        scale = float(np.trace(np.diag(d) @ s) / var_s) if var_s > 0 else 1.0
        scale = max(scale, 1e-12)
    else:
        scale = 1.0
    t = mu_d - scale * (r @ mu_s)
    return SimilarityTransform(rotation=quat_from_matrix(r), translation=t, scale=scale)


def _icp_once(src: np.ndarray, tree: cKDTree, tgt: np.ndarray,
              init: SimilarityTransform, cfg: IcpConfig, max_dist: float):
    current = init
    prev_err = np.inf
    err = np.inf
    for _ in range(cfg.max_iterations):
        moved = current.apply(src)
        dist, idx = tree.query(moved)
        use = dist <= max_dist
        if use.sum() < 3:
            use = np.ones(len(src), dtype=bool)
        err = float((dist[use] ** 2).mean())
        if abs(prev_err - err) < cfg.convergence_eps:
            break
        prev_err = err
        step = _umeyama(moved[use], tgt[idx[use]], cfg.estimate_scale)
        current = step.compose(current)
    moved = current.apply(src)
    dist, _ = tree.query(moved)
    return current, float((dist ** 2).mean())


def icp_align(source: PointCloud, target: PointCloud,
              cfg: IcpConfig | None = None) -> tuple[SimilarityTransform, float]:
    """Estimate the similarity transform registering source onto target.

    Starts from a centroid/RMS-radius initialization; when that converges to a
    poor local minimum and restarts are enabled, retries from a fixed set of
    axis rotations and keeps the best residual. Returns (transform, final mean
    squared nearest-neighbor distance).
    """
    cfg = cfg or IcpConfig()
    _check_not_degenerate(source, "source")
    _check_not_degenerate(target, "target")
    src = source.points
    tgt = target.points
    tree = cKDTree(tgt)
    diag = target.bbox_diagonal()
    max_dist = cfg.max_correspondence_dist or max(0.1 * diag, 1e-9)

    mu_s, mu_d = src.mean(axis=0), tgt.mean(axis=0)
    rms_s = np.sqrt(((src - mu_s) ** 2).sum(axis=1).mean())
    rms_d = np.sqrt(((tgt - mu_d) ** 2).sum(axis=1).mean())
    s0 = rms_d / rms_s if (cfg.estimate_scale and rms_s > 0) else 1.0
    init = SimilarityTransform(translation=mu_d - s0 * mu_s, scale=s0)

    best, best_err = _icp_once(src, tree, tgt, init, cfg, max_dist)
    if cfg.restarts and best_err > (0.01 * max(diag, 1e-9)) ** 2:
        axes = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        for axis in axes:
            for deg in (20.0, -20.0, 40.0, -40.0):
                q = quat_from_axis_angle(axis, np.radians(deg))
                guess = SimilarityTransform(
                    rotation=q,
                    translation=mu_d - s0 * (quat_to_matrix(q) @ mu_s),
                    scale=s0)
                cand, cand_err = _icp_once(src, tree, tgt, guess, cfg, max_dist)
                if cand_err < best_err:
                    best, best_err = cand, cand_err
                if best_err <= (0.001 * max(diag, 1e-9)) ** 2:
                    break
            else:
                continue
            break
    return best, best_err


def render_point_mask(points: PointCloud, cam: PinholeCamera,
                      splat_radius: float) -> BinaryMask:
    """Splat every projected point as a disc of splat_radius pixels."""
    if splat_radius < 0.5:
        raise ValueError("splat_radius must be >= 0.5")
    h, w = cam.height, cam.width
    bits = np.zeros((h, w), dtype=bool)
    if len(points) == 0:
        return BinaryMask(bits)
    uv, _, valid = cam.project_points(points.points)
    uv = uv[valid]
    r2 = splat_radius * splat_radius
    for u, v in uv:
        c0 = max(int(np.ceil(u - splat_radius)), 0)
        c1 = min(int(np.floor(u + splat_radius)), w - 1)
        r0 = max(int(np.ceil(v - splat_radius)), 0)
        r1 = min(int(np.floor(v + splat_radius)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        du = (cols - u) ** 2
        dv = (rows - v) ** 2
        bits[r0:r1 + 1, c0:c1 + 1] |= (dv[:, None] + du[None, :]) <= r2
    return BinaryMask(bits)


def mask_error(a: BinaryMask, b: BinaryMask) -> float:
    """Symmetric pixel disagreement normalized by the reference support |a|."""
    if a.bits.shape != b.bits.shape:
        raise DimensionMismatch(
            f"mask dims {a.bits.shape} vs {b.bits.shape}")
    support = a.count()
    if support == 0:
        raise EmptyMask("reference mask has no set pixels")
    return float((a.bits ^ b.bits).sum()) / support


def _soft_mask_error(a: np.ndarray, b: np.ndarray, support: int) -> float:
    """Disagreement outside a 1-px tolerance band; avoids flat plateaus."""
    a_d = binary_dilation(a, structure=np.ones((3, 3), bool))
    b_d = binary_dilation(b, structure=np.ones((3, 3), bool))
    miss = (a & ~b_d).sum() + (b & ~a_d).sum()
    return float(miss) / support


_ROT_STEP = np.radians(2.0)


def _params_to_transform(p, base: SimilarityTransform) -> SimilarityTransform:
    """7 refinement parameters applied on top of a base transform."""
    rx, ry, rz, tx, ty, tz, ls = p
    angle = np.linalg.norm([rx, ry, rz])
    q = quat_from_axis_angle([rx, ry, rz], angle) if angle > 0 else np.array([1.0, 0, 0, 0])
    return SimilarityTransform(
        rotation=quat_mul(q, base.rotation),
        translation=base.translation + np.array([tx, ty, tz]),
        scale=base.scale * float(np.exp(ls)),
    )


def refine_transform(initial: SimilarityTransform, fused_src: PointCloud,
                     cam: PinholeCamera, m_obj: BinaryMask,
                     splat_radius: float = 1.5,
                     max_evals: int = 200) -> SimilarityTransform:
    """Derivative-free mask-error refinement over all 7 transform DoF.

    Nelder-Mead on the strict error plus a 1-px-tolerant term: the tolerant
    term gives the simplex signal on the flat far-field, the strict term keeps
    it descending once inside the tolerance band. The returned transform is
    the evaluated candidate with the lowest strict error, so refinement never
    loses to the initial transform.
    """
    if m_obj.count() == 0:
        raise EmptyMask("object mask has no set pixels")
    support = m_obj.count()
    obj = m_obj.bits

    strict_initial = mask_error(m_obj, render_point_mask(
        apply_transform(initial, fused_src), cam, splat_radius))
    best = {"err": strict_initial, "transform": initial}

    def objective(p):
        t = _params_to_transform(p, initial)
        proj = render_point_mask(apply_transform(t, fused_src), cam, splat_radius)
        strict = float((obj ^ proj.bits).sum()) / support
        if strict < best["err"]:
            best["err"] = strict
            best["transform"] = t
        return strict + _soft_mask_error(obj, proj.bits, support)

    bbox = fused_src.bbox_diagonal()
    steps = np.array([_ROT_STEP, _ROT_STEP, _ROT_STEP,
                      0.01 * bbox, 0.01 * bbox, 0.01 * bbox,
                      np.log(1.02)])
    x0 = np.zeros(7)
    simplex = np.vstack([x0] + [x0 + steps[i] * np.eye(7)[i] for i in range(7)])
    minimize(objective, x0, method="Nelder-Mead",
             options={"initial_simplex": simplex, "maxfev": max_evals,
                      "xatol": 1e-6, "fatol": 1e-9})
    return best["transform"]


def depth_lookup_tree(points: PointCloud, cam: PinholeCamera):
    """2-D KD-tree over projected pixel positions with per-point depths."""
    uv, z, valid = cam.project_points(points.points)
    uv, z = uv[valid], z[valid]
    if len(uv) == 0:
        return None, None
    return cKDTree(uv), z


def fuse_points(p_vggt: PointCloud, p_hy_aligned: PointCloud, cam: PinholeCamera,
                m_obj: BinaryMask, seam_tau: float | None = None,
                pixel_radius: float = 3.0, return_info: bool = False):
    """Merge the pixel-aligned cloud with the aligned generated cloud.

    The pixel-aligned points are kept verbatim as a prefix of the output. An
    aligned point survives when it projects outside the object mask, or when
    it is occluded (deeper than the pixel-aligned surface at its pixel by more
    than seam_tau), or when no pixel-aligned depth exists near its pixel.
    Surviving points within seam_tau of a pixel-aligned point form the seam
    band and are relaxed by Laplacian smoothing; everything else is returned
    bit-identical.

    With return_info=True also returns (keep mask over p_hy_aligned, seam mask
    over the merged cloud).
    """
    if len(p_vggt) == 0:
        raise ValueError("p_vggt must be non-empty")
    if len(p_hy_aligned) == 0:
        out = PointCloud(p_vggt.points.copy())
        if return_info:
            return out, np.zeros(0, dtype=bool), np.zeros(len(out), dtype=bool)
        return out
    if seam_tau is None:
        seam_tau = 0.02 * p_vggt.bbox_diagonal()

    tree2d, depths = depth_lookup_tree(p_vggt, cam)
    uv, z, valid = cam.project_points(p_hy_aligned.points)
    h, w = m_obj.height, m_obj.width

    keep = np.zeros(len(p_hy_aligned), dtype=bool)
    for i in range(len(p_hy_aligned)):
        if not valid[i]:
            keep[i] = True  # behind the camera: cannot duplicate the front surface
            continue
        u, v = uv[i]
        c, r = int(round(u)), int(round(v))
        inside = 0 <= r < h and 0 <= c < w and m_obj.bits[r, c]
        if not inside:
            keep[i] = True
            continue
        if tree2d is None:
            keep[i] = True
            continue
        dist, j = tree2d.query(uv[i])
        if dist > pixel_radius:
            keep[i] = True  # no reference depth nearby
        else:
            keep[i] = z[i] > depths[j] + seam_tau

    merged = np.concatenate([p_vggt.points, p_hy_aligned.points[keep]])
    n_base = len(p_vggt)
    kept_pts = p_hy_aligned.points[keep]
    seam_full = np.zeros(len(merged), dtype=bool)
    if len(kept_pts):
        tree3d = cKDTree(p_vggt.points)
        seam_full[n_base:] = tree3d.query(kept_pts)[0] <= seam_tau
    out = PointCloud(merged)
    if seam_full.any():
        out = laplacian_smooth(out, 8, 0.5, 10, seam_full)
    if return_info:
        return out, keep, seam_full
    return out


def build_proxy_mesh(fused: PointCloud, aligned_asset_mesh: ProxyMesh,
                     target_vertices: int) -> ProxyMesh:
    """Proxy connectivity from the decimated asset mesh, geometry from fusion.

    Decimates the aligned asset mesh, then snaps each surviving vertex to its
    nearest fused point so the proxy conforms to the pixel-aligned surface.
    """
    coarse = decimate_mesh(aligned_asset_mesh, target_vertices)
    tree = cKDTree(fused.points)
    _, idx = tree.query(coarse.vertices)
    return ProxyMesh(fused.points[idx], coarse.triangles)
