"""Animating the proxy geometry.

Interactive mode: position-based dynamics over the proxy graph with handle
projections, edge-length constraints, and per-vertex 1-ring shape matching,
solved by sequential Gauss-Seidel sweeps in a fixed order for determinism.

Generative mode: skeleton forward kinematics driving linear blend skinning,
with name-mapped motion-clip retargeting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidVertexIndex,
    JointMismatch,
    UnknownJointName,
    WeightMismatch,
)
from .geometry import ProxyMesh, SimilarityTransform, quat_identity


# ---------------------------------------------------------------------------
# position-based dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HandleConstraint:
    vertex_index: int
    target_position: np.ndarray
    stiffness: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target_position",
                           np.asarray(self.target_position, dtype=float).reshape(3))
        if not 0.0 < self.stiffness <= 1.0:
            raise ValueError("stiffness must be in (0, 1]")


@dataclass(frozen=True)
class PbdConfig:
    solver_iterations: int = 20
    substeps: int = 4
    damping: float = 0.02
    rigidity_stiffness: float = 0.3
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class PbdSystem:
    rest_mesh: ProxyMesh
    positions: np.ndarray
    prev_positions: np.ndarray
    inverse_masses: np.ndarray
    edges: np.ndarray          # (E, 2) int
    rest_lengths: np.ndarray   # (E,)
    rings: list[np.ndarray]    # per-vertex group: the vertex itself + 1-ring
    rest_ring_centered: list[np.ndarray]
    config: PbdConfig = field(default_factory=PbdConfig)

    def __post_init__(self):
        self._build_solver_caches()

    def _build_solver_caches(self):
        # edge coloring: batches with no shared vertex, so each batch applies
        # as a vectorized slice of an ordinary Gauss-Seidel sweep
        vertex_used: dict[int, set[int]] = {}
        batches: list[list[int]] = []
        for e, (i, j) in enumerate(self.edges):
            used = vertex_used.setdefault(int(i), set()) | vertex_used.setdefault(int(j), set())
            c = 0
            while c in used:
                c += 1
            if c == len(batches):
                batches.append([])
            batches[c].append(e)
            vertex_used[int(i)].add(c)
            vertex_used[int(j)].add(c)
        self._edge_batches = [np.array(b, dtype=np.int64) for b in batches]

        n = len(self.positions)
        if self.rings:
            kmax = max(len(g) for g in self.rings)
            self._ring_idx = np.zeros((n, kmax), dtype=np.int64)
            self._ring_mask = np.zeros((n, kmax))
            self._ring_rest = np.zeros((n, kmax, 3))
            for i, (group, rest) in enumerate(zip(self.rings, self.rest_ring_centered)):
                k = len(group)
                self._ring_idx[i, :k] = group
                self._ring_mask[i, :k] = 1.0
                self._ring_rest[i, :k] = rest
            self._ring_counts = self._ring_mask.sum(axis=1)
        else:
            self._ring_idx = None
        # warm-start rotations for the shape-matching extraction
        self._ring_quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))

    def pin(self, vertex_indices):
        for i in np.atleast_1d(vertex_indices):
            if not 0 <= i < len(self.inverse_masses):
                raise InvalidVertexIndex(f"vertex {i} out of range")
            self.inverse_masses[int(i)] = 0.0

    def reset(self):
        self.positions = self.rest_mesh.vertices.copy()
        self.prev_positions = self.rest_mesh.vertices.copy()
        self._ring_quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(self.positions), 1))

    def copy(self) -> "PbdSystem":
        dup = PbdSystem(self.rest_mesh, self.positions.copy(),
                        self.prev_positions.copy(), self.inverse_masses.copy(),
                        self.edges, self.rest_lengths,
                        self.rings, self.rest_ring_centered, self.config)
        dup._ring_quats = self._ring_quats.copy()
        return dup


def build_pbd_system(mesh: ProxyMesh, config: PbdConfig | None = None) -> PbdSystem:
    """One distance constraint per unique mesh edge, a shape-matching group
    per vertex (itself plus its 1-ring), unit masses."""
    config = config or PbdConfig()
    edges = mesh.unique_edges()
    rest = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    if np.any(rest <= 0):
        raise ValueError("mesh has zero-length edges")
    rings = []
    rest_centered = []
    neighbor_sets = mesh.vertex_rings()
    for i in range(mesh.vertex_count):
        group = np.concatenate(([i], neighbor_sets[i]))
        rings.append(group)
        rest_pts = mesh.vertices[group]
        rest_centered.append(rest_pts - rest_pts.mean(axis=0))
    return PbdSystem(
        rest_mesh=mesh,
        positions=mesh.vertices.copy(),
        prev_positions=mesh.vertices.copy(),
        inverse_masses=np.ones(mesh.vertex_count),
        edges=edges,
        rest_lengths=rest,
        rings=rings,
        rest_ring_centered=rest_centered,
        config=config,
    )


def _quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _extract_rotations(a: np.ndarray, q: np.ndarray, iterations: int = 4) -> np.ndarray:
    """Batched rotation-only polar factor via warm-started quaternion iteration.

    The classic shape-matching extraction: rotate the current estimate toward
    the target matrix by the torque-like axis between their column frames.
    With warm starts a few iterations track frame-to-frame rotations tightly,
    and a zero target keeps the current estimate (rest pose stays exact).
    """
    for _ in range(iterations):
        r = _quats_to_matrices(q)
        num = np.cross(r[:, :, 0], a[:, :, 0]) \
            + np.cross(r[:, :, 1], a[:, :, 1]) \
            + np.cross(r[:, :, 2], a[:, :, 2])
        den = np.abs(np.einsum("nij,nij->n", r, a)) + 1e-9
        omega = num / den[:, None]
        angle = np.linalg.norm(omega, axis=1)
        if angle.max() < 1e-9:
            break
        half = 0.5 * angle
        axis = omega / np.where(angle > 1e-12, angle, 1.0)[:, None]
        dq = np.concatenate([np.cos(half)[:, None], np.sin(half)[:, None] * axis], axis=1)
        # dq * q, batched hamilton product
        w1, x1, y1, z1 = dq[:, 0], dq[:, 1], dq[:, 2], dq[:, 3]
        w2, x2, y2, z2 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        q = np.stack([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ], axis=1)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def _project_handles(pos, inv_mass, handles):
    for hc in handles:
        i = hc.vertex_index
        if inv_mass[i] == 0.0:
            continue
        pos[i] += hc.stiffness * (hc.target_position - pos[i])


def _project_edges(pos, inv_mass, edges, rest_lengths, batches):
    for idx in batches:
        i = edges[idx, 0]
        j = edges[idx, 1]
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        d = pos[i] - pos[j]
        dist = np.linalg.norm(d, axis=1)
        ok = (wsum > 0) & (dist > 1e-12)
        corr = np.where(ok, (dist - rest_lengths[idx]) / np.where(ok, dist, 1.0)
                        / np.where(wsum > 0, wsum, 1.0), 0.0)
        step = corr[:, None] * d
        pos[i] -= wi[:, None] * step
        pos[j] += wj[:, None] * step


def _project_rigidity(sys: "PbdSystem", stiffness: float):
    if stiffness <= 0.0 or sys._ring_idx is None:
        return
    pos = sys.positions
    idx = sys._ring_idx
    mask = sys._ring_mask
    cur = pos[idx]                                        # (N, K, 3)
    centroid = (cur * mask[:, :, None]).sum(axis=1) / sys._ring_counts[:, None]
    centered = (cur - centroid[:, None, :]) * mask[:, :, None]
    a = np.einsum("nki,nkj->nij", centered, sys._ring_rest)
    sys._ring_quats = _extract_rotations(a, sys._ring_quats)
    rot = _quats_to_matrices(sys._ring_quats)
    goals = np.einsum("nij,nkj->nki", rot, sys._ring_rest) + centroid[:, None, :]
    delta = (goals - cur) * mask[:, :, None]
    flat = idx.ravel()
    valid = mask.ravel() > 0
    acc = np.zeros_like(pos)
    cnt = np.zeros(len(pos))
    np.add.at(acc, flat[valid], delta.reshape(-1, 3)[valid])
    np.add.at(cnt, flat[valid], 1.0)
    movable = (sys.inverse_masses > 0) & (cnt > 0)
    pos[movable] += stiffness * acc[movable] / cnt[movable, None]


def pbd_step(sys: PbdSystem, handles: list[HandleConstraint], dt: float) -> None:
    """Advance one frame in place: damped inertial prediction then Gauss-Seidel
    sweeps of handle, edge-length, and shape-matching projections."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    for hc in handles:
        if not 0 <= hc.vertex_index < len(sys.positions):
            raise InvalidVertexIndex(f"handle vertex {hc.vertex_index} out of range")
    cfg = sys.config
    h = dt / cfg.substeps
    gravity = np.asarray(cfg.gravity, dtype=float)
    movable = sys.inverse_masses > 0
    for _ in range(cfg.substeps):
        vel = (sys.positions - sys.prev_positions) / h
        vel *= (1.0 - cfg.damping)
        vel += gravity * h
        sys.prev_positions = sys.positions.copy()
        predicted = sys.positions + vel * h
        sys.positions = np.where(movable[:, None], predicted, sys.positions)
        # handles first so physical constraints can push back; edges last so
        # the step ends on the hard length projection
        for _ in range(cfg.solver_iterations):
            _project_handles(sys.positions, sys.inverse_masses, handles)
            _project_rigidity(sys, cfg.rigidity_stiffness)
            _project_edges(sys.positions, sys.inverse_masses, sys.edges,
                           sys.rest_lengths, sys._edge_batches)


def max_edge_strain(sys: PbdSystem) -> float:
    cur = np.linalg.norm(sys.positions[sys.edges[:, 0]] - sys.positions[sys.edges[:, 1]],
                         axis=1)
    return float(np.max(np.abs(cur - sys.rest_lengths) / sys.rest_lengths))


# ---------------------------------------------------------------------------
# skeletons, kinematics, skinning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None
    rest_local: SimilarityTransform


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]

    def __post_init__(self):
        roots = 0
        for i, j in enumerate(self.joints):
            if j.parent is None:
                roots += 1
            elif not 0 <= j.parent < i:
                raise ValueError("joints must be topologically sorted (parent < child)")
            if abs(j.rest_local.scale - 1.0) > 1e-9:
                raise ValueError("joint rest transforms must be rigid")
        if roots != 1:
            raise ValueError(f"skeleton must have exactly one root, got {roots}")
        object.__setattr__(self, "joints", tuple(self.joints))

    def __len__(self):
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    def index_of(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise UnknownJointName(name)

    def rest_globals(self) -> list[SimilarityTransform]:
        out: list[SimilarityTransform] = []
        for j in self.joints:
            if j.parent is None:
                out.append(j.rest_local)
            else:
                out.append(out[j.parent].compose(j.rest_local))
        return out

    def bone_segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(parent position, child position) per non-root joint, rest pose."""
        globs = self.rest_globals()
        segs = []
        for i, j in enumerate(self.joints):
            if j.parent is not None:
                segs.append((globs[j.parent].translation, globs[i].translation))
        return segs


@dataclass(frozen=True)
class PoseFrame:
    """One animation frame: root translation plus per-joint local rotations."""

    root_translation: np.ndarray
    rotations: np.ndarray  # (J, 4) unit quaternions (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "root_translation",
                           np.asarray(self.root_translation, dtype=float).reshape(3))
        r = np.asarray(self.rotations, dtype=float)
        if r.ndim != 2 or r.shape[1] != 4:
            raise ValueError("rotations must be (J, 4)")
        norms = np.linalg.norm(r, axis=1, keepdims=True)
        object.__setattr__(self, "rotations", r / norms)

    @staticmethod
    def identity(num_joints: int) -> "PoseFrame":
        r = np.tile(quat_identity(), (num_joints, 1))
        return PoseFrame(np.zeros(3), r)


@dataclass(frozen=True)
class MotionClip:
    name: str
    skeleton_names: tuple[str, ...]
    fps: float
    frames: tuple[PoseFrame, ...]

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        for f in self.frames:
            if f.rotations.shape[0] != len(self.skeleton_names):
                raise ValueError("every frame must cover every named joint")
        object.__setattr__(self, "skeleton_names", tuple(self.skeleton_names))
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self):
        return len(self.frames)


def forward_kinematics(skel: Skeleton, frame: PoseFrame) -> list[SimilarityTransform]:
    """Global transform per joint: parent o rest_local o frame rotation, with
    the root translated by the frame's root translation."""
    if frame.rotations.shape[0] != len(skel):
        raise JointMismatch(
            f"frame has {frame.rotations.shape[0]} joints, skeleton {len(skel)}")
    out: list[SimilarityTransform] = []
    for i, joint in enumerate(skel.joints):
        local = joint.rest_local.compose(
            SimilarityTransform(rotation=frame.rotations[i]))
        if joint.parent is None:
            g = SimilarityTransform(translation=frame.root_translation).compose(local)
        else:
            g = out[joint.parent].compose(local)
        out.append(g)
    return out


@dataclass(frozen=True)
class SkinWeights:
    """Per-vertex sparse bone weights: indices (N, K) and weights (N, K)."""

    joint_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ji = np.asarray(self.joint_indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if ji.shape != w.shape or ji.ndim != 2:
            raise ValueError("indices and weights must share an (N, K) shape")
        if ji.shape[1] > 4:
            raise ValueError("at most 4 influences per vertex")
        if np.any(w < -1e-12):
            raise ValueError("weights must be non-negative")
        sums = w.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("per-vertex weights must sum to 1")
        object.__setattr__(self, "joint_indices", ji)
        object.__setattr__(self, "weights", w)

    @property
    def vertex_count(self) -> int:
        return self.joint_indices.shape[0]


def lbs_deform(mesh: ProxyMesh, skel: Skeleton, weights: SkinWeights,
               frame: PoseFrame) -> np.ndarray:
    """Linear blend skinning with rest-pose inverse binding."""
    if weights.vertex_count != mesh.vertex_count:
        raise WeightMismatch("skin weights do not match mesh vertex count")
    if weights.joint_indices.max(initial=-1) >= len(skel):
        raise WeightMismatch("skin weights reference a missing joint")
    globs = forward_kinematics(skel, frame)
    rest = skel.rest_globals()
    mats = np.stack([
        g.compose(r.inverse()).to_matrix() for g, r in zip(globs, rest)
    ])  # (J, 4, 4)
    v_h = np.concatenate([mesh.vertices, np.ones((mesh.vertex_count, 1))], axis=1)
    sel = mats[weights.joint_indices]                      # (N, K, 4, 4)
    per_bone = np.einsum("nkab,nb->nka", sel, v_h)
    return (weights.weights[:, :, None] * per_bone[:, :, :3]).sum(axis=1)


def compute_skin_weights_heuristic(mesh: ProxyMesh, skel: Skeleton,
                                   max_influences: int = 4,
                                   eps: float = 1e-8) -> SkinWeights:
    """Distance-based fallback weights: nearest bone segments, 1/(d+eps)^2."""
    segs = skel.bone_segments()
    if not segs:
        raise ValueError("skeleton has no bone segments")
    v = mesh.vertices
    dists = np.empty((len(v), len(segs)))
    for k, (a, b) in enumerate(segs):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            closest = np.tile(a, (len(v), 1))
        else:
            t = np.clip((v - a) @ ab / denom, 0.0, 1.0)
            closest = a + t[:, None] * ab
        dists[:, k] = np.linalg.norm(v - closest, axis=1)
    k = min(max_influences, len(segs))
    nearest = np.argsort(dists, axis=1)[:, :k]
    rows = np.arange(len(v))[:, None]
    w = 1.0 / (dists[rows, nearest] + eps) ** 2
    w /= w.sum(axis=1, keepdims=True)
    # bone k connects to joint index of the segment's child joint
    child_of_segment = np.array([i for i, j in enumerate(skel.joints)
                                 if j.parent is not None])
    return SkinWeights(child_of_segment[nearest], w)


def retarget_clip(clip: MotionClip, skel: Skeleton, name_map: dict[str, str],
                  source_skel: Skeleton | None = None) -> MotionClip:
    """Bind a clip to a different skeleton by joint-name mapping.

    Mapped joints copy their local rotations; unmapped target joints stay at
    identity. Root translation is scaled by the target/source root-to-hip
    height ratio when a source skeleton is given and both skeletons expose a
    hip joint; otherwise it is copied through.
    """
    target_names = skel.names
    src_index = {n: i for i, n in enumerate(clip.skeleton_names)}
    mapping: dict[int, int] = {}
    for src_name, dst_name in name_map.items():
        if dst_name not in target_names:
            raise UnknownJointName(f"target skeleton has no joint '{dst_name}'")
        if src_name not in src_index:
            raise UnknownJointName(f"clip has no joint '{src_name}'")
        mapping[target_names.index(dst_name)] = src_index[src_name]

    scale = 1.0
    if source_skel is not None:
        src_h = _root_hip_height(source_skel)
        dst_h = _root_hip_height(skel)
        if src_h is not None and dst_h is not None and src_h > 1e-12:
            scale = dst_h / src_h

    frames = []
    for f in clip.frames:
        rot = np.tile(quat_identity(), (len(skel), 1))
        for dst_i, src_i in mapping.items():
            rot[dst_i] = f.rotations[src_i]
        frames.append(PoseFrame(f.root_translation * scale, rot))
    return MotionClip(clip.name, tuple(target_names), clip.fps, tuple(frames))


def _root_hip_height(skel: Skeleton) -> float | None:
    hips = [i for i, j in enumerate(skel.joints) if "hip" in j.name.lower()]
    if not hips:
        return None
    globs = skel.rest_globals()
    root = globs[0].translation
    return float(np.linalg.norm(globs[hips[0]].translation - root))


# ---------------------------------------------------------------------------
# sequence drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InteractiveMode:
    """Per-frame handle lists stepped through PBD."""

    handle_trajectory: tuple[tuple[HandleConstraint, ...], ...]
    dt: float = 1.0 / 30.0
    config: PbdConfig | None = None


@dataclass(frozen=True)
class GenerativeMode:
    """A motion clip driven through FK + LBS."""

    clip: MotionClip
    skeleton: Skeleton
    weights: SkinWeights


def animate_sequence(mode, mesh: ProxyMesh) -> np.ndarray:
    """Produce per-frame vertex positions, shape (frames, N, 3)."""
    if isinstance(mode, InteractiveMode):
        sys = build_pbd_system(mesh, mode.config)
        frames = []
        for handles in mode.handle_trajectory:
            pbd_step(sys, list(handles), mode.dt)
            frames.append(sys.positions.copy())
        return np.array(frames)
    if isinstance(mode, GenerativeMode):
        if list(mode.clip.skeleton_names) != mode.skeleton.names:
            raise JointMismatch("clip is not bound to this skeleton; retarget first")
        frames = [lbs_deform(mesh, mode.skeleton, mode.weights, f)
                  for f in mode.clip.frames]
        return np.array(frames)
    raise TypeError(f"unknown animation mode {type(mode)!r}")
