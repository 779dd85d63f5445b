"""Pose representation, rotation algebra, forward kinematics and motion features.

Poses are flat 147-vectors laid out as ``[root(3), joint0(6), ..., joint23(6)]``
where each joint block is the first two columns of its local rotation matrix.
The world is y-up with the floor at y = 0.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import BadShape, DegenerateRotation, IoFailure, NotARotation, SequenceTooShort

N_JOINTS = 24
POSE_DIM = N_JOINTS * 6 + 3
DEFAULT_FPS = 30
LAYOUT = "root3+rot6d24"
_EPS_DEGENERATE = 1e-8


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray
    left_foot: int
    right_foot: int
    names: tuple[str, ...] = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.shape != (len(parents), 3):
            raise BadShape(f"offsets must be ({len(parents)}, 3), got {offsets.shape}")
        roots = [j for j, p in enumerate(parents) if p < 0]
        if roots != [0]:
            raise ValueError("skeleton must have exactly one root at index 0")
        for j, p in enumerate(parents[1:], start=1):
            # topological order rules out cycles
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if np.any(offsets[0] != 0):
            raise ValueError("root offset must be zero")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_joints(self) -> int:
        return len(self.parents)


def default_skeleton() -> Skeleton:
    """The shipped 24-joint SMPL-convention skeleton (meters, y-up)."""
    raw = json.loads(resources.files("groupchoreo.data").joinpath("smpl_skeleton.json").read_text())
    return Skeleton(
        parents=tuple(raw["parents"]),
        offsets=np.array(raw["offsets"]),
        left_foot=raw["left_foot"],
        right_foot=raw["right_foot"],
        names=tuple(raw["names"]),
    )


# ---------------------------------------------------------------------------
# rotations


def rot6d_to_matrix(r) -> np.ndarray:
    """Map 6D rotation encodings ``(..., 6)`` to rotation matrices ``(..., 3, 3)``.

    Gram-Schmidt on the two 3-vectors, third column by cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise BadShape(f"expected trailing dim 6, got {r.shape}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS_DEGENERATE):
        raise DegenerateRotation("first column of a 6D rotation has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS_DEGENERATE):
        raise DegenerateRotation("6D rotation columns are (near) parallel or zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R, atol: float = 1e-4) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise BadShape(f"expected (..., 3, 3), got {R.shape}")
    gram = np.swapaxes(R, -1, -2) @ R
    if not np.allclose(gram, np.eye(3), atol=atol) or np.any(np.linalg.det(R) < 0):
        raise NotARotation("matrix is not a proper rotation")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrices to unit quaternions in (w, x, y, z) order."""
    R = np.asarray(R, dtype=np.float64)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    return np.roll(xyzw, 1, axis=-1).reshape(R.shape[:-2] + (4,))


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    xyzw = np.roll(q.reshape(-1, 4), -1, axis=-1)
    return Rotation.from_quat(xyzw).as_matrix().reshape(q.shape[:-1] + (3, 3))


def quaternion_slerp(q0, q1, t) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions.

    Broadcasts over leading dimensions; ``t`` may be a scalar or an array
    broadcastable against ``q0[..., 0]``.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    near = dot > 1 - 1e-7
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.where(near, 1.0, np.sin(theta))
    w0 = np.where(near, 1 - t, np.sin((1 - t) * theta) / sin_theta)
    w1 = np.where(near, t, np.sin(t * theta) / sin_theta)
    out = w0 * q0 + w1 * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    rotvec = axis * np.asarray(angle, dtype=np.float64)[..., None]
    return Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(rotvec.shape[:-1] + (3, 3))


# ---------------------------------------------------------------------------
# pose layout


def split_pose(x) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(..., 147)`` into root ``(..., 3)`` and joint 6D blocks ``(..., 24, 6)``."""
    x = np.asarray(x)
    if x.shape[-1] != POSE_DIM:
        raise BadShape(f"expected trailing dim {POSE_DIM}, got {x.shape}")
    return x[..., :3], x[..., 3:].reshape(x.shape[:-1] + (N_JOINTS, 6))


def join_pose(root, rot6d) -> np.ndarray:
    root = np.asarray(root, dtype=np.float64)
    rot6d = np.asarray(rot6d, dtype=np.float64)
    return np.concatenate([root, rot6d.reshape(rot6d.shape[:-2] + (N_JOINTS * 6,))], axis=-1)


def orthogonalize_poses(x) -> np.ndarray:
    """Project every 6D block of ``(..., 147)`` back onto a valid rotation encoding."""
    root, r6 = split_pose(x)
    return join_pose(root, matrix_to_rot6d(rot6d_to_matrix(r6)))


@dataclass
class Pose:
    root_translation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(N_JOINTS, 6)

    def flatten(self) -> np.ndarray:
        return join_pose(self.root_translation, self.joint_rotations)

    @classmethod
    def from_vector(cls, v) -> "Pose":
        root, r6 = split_pose(np.asarray(v, dtype=np.float64))
        return cls(root, r6)

    @classmethod
    def identity(cls, root=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.asarray(root), np.tile([1.0, 0, 0, 0, 1, 0], (N_JOINTS, 1)))


@dataclass
class MotionSequence:
    """One dancer: ``data`` is ``(T, 147)``."""

    data: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != POSE_DIM:
            raise BadShape(f"motion must be (T, {POSE_DIM}), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise BadShape("motion needs at least one frame")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def pose(self, t: int) -> Pose:
        return Pose.from_vector(self.data[t])


@dataclass
class GroupSequence:
    """``N`` aligned dancers; ``data`` is ``(N, T, 147)``."""

    data: np.ndarray
    fps: float = DEFAULT_FPS
    n_max: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] != POSE_DIM:
            raise BadShape(f"group must be (N, T, {POSE_DIM}), got {self.data.shape}")
        n, t = self.data.shape[:2]
        if n < 1 or t < 1:
            raise BadShape("group needs at least one dancer and one frame")
        if self.n_max is not None and n > self.n_max:
            raise BadShape(f"{n} dancers exceeds N_max={self.n_max}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_dancers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def dancers(self) -> list[MotionSequence]:
        return [MotionSequence(d, self.fps) for d in self.data]

    @classmethod
    def from_dancers(cls, dancers: list[MotionSequence]) -> "GroupSequence":
        if not dancers:
            raise BadShape("group needs at least one dancer")
        fps = dancers[0].fps
        T = dancers[0].n_frames
        if any(d.fps != fps or d.n_frames != T for d in dancers):
            raise BadShape("dancers must share frame count and fps")
        return cls(np.stack([d.data for d in dancers]), fps)


def pack_group(group: GroupSequence) -> np.ndarray:
    return group.data.copy()


def unpack_group(array, fps: float = DEFAULT_FPS) -> GroupSequence:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3 or array.shape[-1] != POSE_DIM:
        raise BadShape(f"expected (N, T, {POSE_DIM}), got {array.shape}")
    return GroupSequence(array.copy(), fps)


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(poses, skeleton: Skeleton | None = None) -> np.ndarray:
    """Global joint positions ``(..., 24, 3)`` for poses ``(..., 147)``."""
    skeleton = skeleton or default_skeleton()
    root, r6 = split_pose(np.asarray(poses, dtype=np.float64))
    local = rot6d_to_matrix(r6)
    glob = [local[..., 0, :, :]]
    pos = [root]
    for j in range(1, skeleton.n_joints):
        p = skeleton.parents[j]
        pos.append(pos[p] + glob[p] @ skeleton.offsets[j])
        glob.append(glob[p] @ local[..., j, :, :])
    return np.stack(pos, axis=-2)


def kinetic_features_from_positions(positions, fps: float) -> np.ndarray:
    """Per-joint mean squared velocity (m^2/s^2) of ``(T, J, 3)`` positions."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise SequenceTooShort("kinetic features need T >= 2")
    step = np.diff(positions, axis=0)
    return np.sum(step**2, axis=-1).mean(axis=0) * fps**2


def kinetic_features(seq: MotionSequence, skeleton: Skeleton | None = None) -> np.ndarray:
    if seq.n_frames < 2:
        raise SequenceTooShort("kinetic features need T >= 2")
    return kinetic_features_from_positions(forward_kinematics(seq.data, skeleton), seq.fps)


def detect_foot_contacts(
    positions,
    skeleton: Skeleton | None = None,
    height_thresh: float = 0.08,
    speed_thresh: float = 0.15,
    fps: float = DEFAULT_FPS,
) -> np.ndarray:
    """Boolean ``(T, 2)`` contact flags (left, right) from ``(T, 24, 3)`` positions."""
    skeleton = skeleton or default_skeleton()
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise SequenceTooShort("contact detection needs T >= 2")
    feet = positions[:, [skeleton.left_foot, skeleton.right_foot]]
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=-1) * fps
    contact = (feet[:-1, :, 1] < height_thresh) & (speed < speed_thresh)
    return np.concatenate([contact, contact[-1:]], axis=0)


# ---------------------------------------------------------------------------
# differentiable (torch) counterparts used by the training losses


def rot6d_to_matrix_torch(r: torch.Tensor) -> torch.Tensor:
    a1, a2 = r[..., :3], r[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(_EPS_DEGENERATE)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(_EPS_DEGENERATE)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def forward_kinematics_torch(poses: torch.Tensor, skeleton: Skeleton | None = None) -> torch.Tensor:
    skeleton = skeleton or default_skeleton()
    root = poses[..., :3]
    # unbind once: per-joint indexing would backpropagate through a full-size zero tensor per joint
    local = rot6d_to_matrix_torch(poses[..., 3:].reshape(poses.shape[:-1] + (N_JOINTS, 6))).unbind(-3)
    offsets = torch.as_tensor(skeleton.offsets, dtype=poses.dtype, device=poses.device)
    glob = [local[0]]
    pos = [root]
    for j in range(1, skeleton.n_joints):
        p = skeleton.parents[j]
        pos.append(pos[p] + glob[p] @ offsets[j])
        glob.append(glob[p] @ local[j])
    return torch.stack(pos, dim=-2)


# ---------------------------------------------------------------------------
# motion container IO

_MAGIC = b"GCDM"
_BIN_VERSION = 1


def motion_to_dict(group: GroupSequence) -> dict:
    return {
        "fps": int(round(group.fps)) if float(group.fps).is_integer() else group.fps,
        "n_dancers": group.n_dancers,
        "n_frames": group.n_frames,
        "layout": LAYOUT,
        "data": group.data.tolist(),
    }


def motion_from_dict(obj: dict) -> GroupSequence:
    try:
        if obj.get("layout", LAYOUT) != LAYOUT:
            raise BadShape(f"unsupported layout {obj['layout']!r}")
        data = np.asarray(obj["data"], dtype=np.float64)
        if data.ndim != 3 or data.shape[:2] != (obj["n_dancers"], obj["n_frames"]):
            raise BadShape("container header disagrees with data shape")
        return unpack_group(data, obj["fps"])
    except KeyError as exc:
        raise BadShape(f"motion container missing key {exc}") from exc


def save_motion(group: GroupSequence, path, binary: bool | None = None) -> Path:
    """Write a motion container; binary form is chosen for ``.gcdm`` paths."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".gcdm"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if binary:
            n, t, d = group.data.shape
            header = _MAGIC + struct.pack("<IIII", _BIN_VERSION, n, t, d)
            path.write_bytes(header + group.data.astype("<f4").tobytes())
        else:
            path.write_text(json.dumps(motion_to_dict(group)))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load_motion(path, fps: float = DEFAULT_FPS) -> GroupSequence:
    """Read either container form. Binary files carry no fps, so ``fps`` is used."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:4] == _MAGIC:
        version, n, t, d = struct.unpack("<IIII", raw[4:20])
        if version != _BIN_VERSION:
            raise BadShape(f"unsupported binary container version {version}")
        if d != POSE_DIM:
            raise BadShape(f"binary container has D={d}, expected {POSE_DIM}")
        body = np.frombuffer(raw[20:], dtype="<f4")
        if body.size != n * t * d:
            raise BadShape("binary container is truncated")
        return unpack_group(body.reshape(n, t, d).astype(np.float64), fps)
    try:
        obj = json.loads(raw)
    except ValueError as exc:
        raise BadShape(f"{path} is neither a JSON nor a binary motion container") from exc
    return motion_from_dict(obj)
