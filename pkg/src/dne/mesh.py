"""Hand meshes, the procedural articulated template, and position-error metrics."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_JOINTS = 21
RING = 7
# template size in scene units; chosen with the default camera so the hand fills a 32 px grid
HAND_SCALE = 0.3

# (base xy, direction xy, segment lengths, ring radii) per finger, thumb first, in hand units
_FINGERS = (
    ((-0.22, -0.08), (-0.70, 0.71), (0.18, 0.13, 0.10), (0.050, 0.045, 0.040, 0.032)),
    ((-0.15, 0.22), (-0.08, 1.00), (0.20, 0.12, 0.10), (0.045, 0.040, 0.035, 0.030)),
    ((-0.05, 0.24), (0.00, 1.00), (0.22, 0.13, 0.10), (0.045, 0.040, 0.035, 0.030)),
    ((0.05, 0.23), (0.06, 1.00), (0.20, 0.12, 0.09), (0.045, 0.040, 0.035, 0.030)),
    ((0.15, 0.20), (0.14, 1.00), (0.16, 0.10, 0.08), (0.040, 0.035, 0.030, 0.026)),
)


@dataclass(frozen=True)
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray
    joint_groups: tuple

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        groups = tuple(np.array(g, dtype=np.int64).reshape(-1) for g in self.joint_groups)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be N x 3, got {v.shape}")
        n = len(v)
        if f.size and (f.min() < 0 or f.max() >= n):
            raise ValueError("face index out of range")
        seen = set()
        for g in groups:
            if g.size == 0:
                raise ValueError("empty joint group")
            if g.min() < 0 or g.max() >= n:
                raise ValueError("joint group index out of range")
            s = set(g.tolist())
            if len(s) != g.size or seen & s:
                raise ValueError("joint groups must be disjoint")
            seen |= s
        for a in (v, f, *groups):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "joint_groups", groups)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joint_groups)

    def with_vertices(self, vertices) -> "HandMesh":
        """Same topology and joint groups, new coordinates."""
        return HandMesh(vertices, self.faces, self.joint_groups)

    def topology_hash(self) -> str:
        """Stable digest of faces and joint groups (coordinates excluded)."""
        h = hashlib.sha256(self.faces.astype("<i8").tobytes())
        for g in self.joint_groups:
            h.update(b"|" + g.astype("<i8").tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "joint_groups": [g.tolist() for g in self.joint_groups],
        })

    @classmethod
    def from_json(cls, text: str) -> "HandMesh":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError(f"unsupported mesh version {d.get('version')!r}")
        return cls(d["vertices"], d["faces"], d["joint_groups"])


@dataclass(frozen=True)
class JointSet:
    joints: np.ndarray


def joint_matrix(mesh: HandMesh) -> np.ndarray:
    """J x N averaging matrix; ``joint_matrix(m) @ m.vertices`` gives the joints."""
    W = np.zeros((mesh.n_joints, mesh.n_vertices))
    for j, g in enumerate(mesh.joint_groups):
        W[j, g] = 1.0 / len(g)
    return W


def regress_joints(mesh: HandMesh) -> JointSet:
    return JointSet(np.stack([mesh.vertices[g].mean(axis=0) for g in mesh.joint_groups]))


def _as_vertices(x) -> np.ndarray:
    return np.asarray(getattr(x, "vertices", x), dtype=np.float64)


def _mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def mpvpe(pred, gt) -> float:
    """Mean per-vertex Euclidean error. Accepts meshes or N x 3 arrays."""
    return _mean_distance(_as_vertices(pred), _as_vertices(gt))


def mpjpe(pred: HandMesh, gt: HandMesh) -> float:
    """Mean per-joint error; joints of both meshes use the ground-truth joint groups."""
    if pred.n_vertices != gt.n_vertices:
        raise ValueError(f"vertex count mismatch: {pred.n_vertices} vs {gt.n_vertices}")
    W = joint_matrix(gt)
    return _mean_distance(W @ pred.vertices, W @ gt.vertices)


def mpvpe_2d(pred_uv, gt_uv) -> float:
    return _mean_distance(np.asarray(pred_uv, dtype=np.float64), np.asarray(gt_uv, dtype=np.float64))


def concat_hands(meshes: Sequence[HandMesh]) -> HandMesh:
    """Merge hands into one mesh so two-hand metrics average over all vertices."""
    verts, faces, groups, off = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        groups.extend(g + off for g in m.joint_groups)
        off += m.n_vertices
    return HandMesh(np.concatenate(verts), np.concatenate(faces), tuple(groups))


# --- template -----------------------------------------------------------------


def _rot(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def _apply(bone, x):
    R, pivot_rest, pivot_world = bone
    return R @ (x - pivot_rest) + pivot_world


def _template_topology():
    faces = []
    # palm block: 0 wrist centre, 1..7 wrist ring, 8..22 front sheet, 23..37 back sheet
    for k in range(RING):
        faces.append((0, 1 + k, 1 + (k + 1) % RING))
    for base in (8, 23):
        for r in range(2):
            for c in range(4):
                a = base + r * 5 + c
                faces += [(a, a + 1, a + 5), (a + 1, a + 6, a + 5)]
    groups = [list(range(38))]
    start = 38
    for _ in range(5):
        rings = [list(range(start + RING * k, start + RING * (k + 1))) for k in range(4)]
        for k in range(3):
            lo, hi = rings[k], rings[k + 1]
            for i in range(RING):
                j = (i + 1) % RING
                faces += [(lo[i], lo[j], hi[i]), (lo[j], hi[j], hi[i])]
        tip = rings[3]
        faces += [(tip[0], tip[i], tip[i + 1]) for i in range(1, RING - 1)]
        groups.extend(rings)
        start += 4 * RING
    return np.array(faces, dtype=np.int64), tuple(groups)


_FACES, _GROUPS = _template_topology()


def make_template(seed: int = 0, pose=None) -> HandMesh:
    """Procedural five-finger hand with 178 vertices and 21 joint groups.

    ``pose`` holds 21 angles in radians: index 0 twists the whole hand about
    the forearm (y) axis; for finger f, ``1 + 4f + k`` with k = 0, 1, 2 are the
    MCP, PIP and DIP flexions and k = 3 is the MCP abduction. Seed 0 is the
    canonical shape; other seeds jitter segment lengths and palm width.
    """
    pose = np.zeros(N_JOINTS) if pose is None else np.asarray(pose, dtype=np.float64)
    if pose.shape != (N_JOINTS,):
        raise ValueError(f"pose must have {N_JOINTS} angles")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose angles must be finite")
    pose = (pose + np.pi) % (2 * np.pi) - np.pi

    if seed == 0:
        len_scale, width = np.ones(5), 1.0
    else:
        rng = np.random.default_rng(seed)
        len_scale, width = rng.uniform(0.9, 1.1, size=5), rng.uniform(0.95, 1.05)

    zaxis = np.array([0.0, 0.0, 1.0])
    verts = [np.array([0.0, -0.30, 0.0])]
    for k in range(RING):
        t = 2 * np.pi * k / RING
        verts.append(np.array([0.15 * width * np.cos(t), -0.30, 0.06 * np.sin(t)]))
    for z in (-0.05, 0.05):
        for y in np.linspace(-0.22, 0.18, 3):
            for x in np.linspace(-0.18, 0.18, 5):
                verts.append(np.array([x * width, y, z]))

    for f, (base, direction, lengths, radii) in enumerate(_FINGERS):
        d = np.array([direction[0], direction[1], 0.0])
        d /= np.linalg.norm(d)
        side = np.cross(d, zaxis)
        joints = [np.array([base[0] * width, base[1], 0.0])]
        for L in lengths:
            joints.append(joints[-1] + d * L * len_scale[f])

        a = pose[1 + 4 * f: 5 + 4 * f]
        # bone b rotates about its rest pivot: x -> R (x - pivot_rest) + pivot_world
        bones = [(np.eye(3), joints[0], joints[0])]
        R = _rot(zaxis, a[3]) @ _rot(side, a[0])
        bones.append((R, joints[0], joints[0]))
        for k in (1, 2):
            pivot = _apply(bones[-1], joints[k])
            R = R @ _rot(side, a[k])
            bones.append((R, joints[k], pivot))

        for k in range(4):
            # linear blend: rings sit between the two bones meeting at their joint
            w = (0.5, 0.5) if k < 3 else (0.0, 1.0)
            for i in range(RING):
                t = 2 * np.pi * i / RING
                x = joints[k] + radii[k] * (np.cos(t) * side + np.sin(t) * zaxis)
                verts.append(w[0] * _apply(bones[k], x) + w[1] * _apply(bones[min(k + 1, 3)], x))

    V = np.stack(verts) @ _rot(np.array([0.0, 1.0, 0.0]), pose[0]).T
    return HandMesh(V * HAND_SCALE, _FACES, _GROUPS)


def random_pose(rng: np.random.Generator, spread: float = 0.35) -> np.ndarray:
    """Plausible articulation: mostly flexion, small abduction and twist."""
    pose = np.zeros(N_JOINTS)
    pose[0] = rng.uniform(-spread, spread)
    for f in range(5):
        pose[1 + 4 * f: 4 + 4 * f] = rng.uniform(0.0, 2.0 * spread, size=3)
        pose[4 + 4 * f] = rng.uniform(-0.5 * spread, 0.5 * spread)
    return pose
