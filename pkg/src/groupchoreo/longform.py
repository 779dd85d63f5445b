"""Long-duration generation from overlapping windows denoised in lockstep."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import AudioTooShort, BadMatrix, ShapeMismatch, TooManyDancers
from .model import GCDModel
from .motion import (
    GroupSequence,
    matrix_to_quat,
    orthogonalize_poses,
    quat_to_matrix,
    quaternion_slerp,
    rot6d_to_matrix,
    split_pose,
    join_pose,
    matrix_to_rot6d,
)
from .sampling import draw_initial, reverse_chain, sample_group_dance, seeded_generators
from .synth import AudioFeatureSequence


@dataclass(frozen=True)
class ChunkPlan:
    windows: tuple[tuple[int, int], ...]
    overlap_frames: int
    total_frames: int

    @property
    def hop(self) -> int:
        return self.windows[1][0] - self.windows[0][0] if len(self.windows) > 1 else self.overlap_frames

    def __len__(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class DancerAssignment:
    permutation: tuple[int, ...]
    cost: float


def chunk_schedule(total_frames: int, window_frames: int) -> ChunkPlan:
    """Windows of ``window_frames`` advancing by half a window until ``total_frames`` is covered."""
    if window_frames < 2 or window_frames % 2:
        raise ValueError(f"window_frames must be even and >= 2, got {window_frames}")
    if total_frames < window_frames:
        raise AudioTooShort(f"{total_frames} frames is shorter than one window of {window_frames}")
    hop = window_frames // 2
    n = math.ceil((total_frames - window_frames) / hop) + 1
    windows = tuple((k * hop, k * hop + window_frames) for k in range(n))
    return ChunkPlan(windows, hop, total_frames)


# ---------------------------------------------------------------------------
# assignment


def _check_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise BadMatrix(f"cost must be a non-empty square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise BadMatrix("cost entries must be finite and nonnegative")
    return c


def assignment_cost(cost, perm) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[i, j] for i, j in enumerate(perm)))


def match_dancers_hungarian(cost) -> DancerAssignment:
    """Minimum-cost perfect matching by the shortest augmenting path method with potentials.

    ``permutation[i]`` is the column assigned to row ``i``.
    """
    c = _check_cost(cost)
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # match_col[j] = row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta, j1 = np.inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j], way[j] = cur, j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[match_col[j] - 1] = j - 1
    return DancerAssignment(tuple(perm), assignment_cost(c, perm))


def match_dancers_bruteforce(cost) -> DancerAssignment:
    c = _check_cost(cost)
    best = min(itertools.permutations(range(c.shape[0])), key=lambda p: assignment_cost(c, p))
    return DancerAssignment(tuple(best), assignment_cost(c, best))


def overlap_cost(tail: np.ndarray, head: np.ndarray) -> np.ndarray:
    """``cost[i, j]`` = mean per-frame distance between dancer ``i`` of ``tail`` and dancer ``j`` of ``head``."""
    tail, head = np.asarray(tail, dtype=np.float64), np.asarray(head, dtype=np.float64)
    if tail.shape != head.shape:
        raise ShapeMismatch(f"{tail.shape} vs {head.shape}")
    diff = tail[:, None] - head[None, :]
    return np.linalg.norm(diff, axis=-1).mean(axis=-1)


# ---------------------------------------------------------------------------
# blending


def crossfade_weights(n: int) -> np.ndarray:
    """Weight of the earlier chunk, falling linearly from 1 to 0 across ``n`` frames."""
    return np.ones(1) if n == 1 else np.linspace(1.0, 0.0, n)


def blend_overlap(seq_a_tail, seq_b_head) -> np.ndarray:
    """SLERP joint rotations and lerp root translation from ``a`` to ``b``; shapes ``(..., O, 147)``."""
    a, b = np.asarray(seq_a_tail, dtype=np.float64), np.asarray(seq_b_head, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    w = crossfade_weights(a.shape[-2])
    root_a, rot_a = split_pose(a)
    root_b, rot_b = split_pose(b)
    root = w[:, None] * root_a + (1 - w[:, None]) * root_b
    qa = matrix_to_quat(rot6d_to_matrix(rot_a))
    qb = matrix_to_quat(rot6d_to_matrix(rot_b))
    q = quaternion_slerp(qa, qb, (1 - w)[:, None])
    out = join_pose(root, matrix_to_rot6d(quat_to_matrix(q)))
    # exact endpoints, free of conversion round-off
    out[..., 0, :] = a[..., 0, :]
    out[..., -1, :] = b[..., -1, :]
    return out


def seam_frames(plan: ChunkPlan) -> list[int]:
    """Frame indices ``t`` whose transition ``t-1 -> t`` crosses a window edge."""
    edges = set()
    for start, stop in plan.windows:
        for t in (start, stop):
            if 0 < t < plan.total_frames:
                edges.add(t)
    return sorted(edges)


def rotation_jumps(group: GroupSequence | np.ndarray) -> np.ndarray:
    """Largest per-joint rotation angle between consecutive frames, shape ``(T - 1,)``."""
    x = group.data if isinstance(group, GroupSequence) else np.asarray(group)
    q = matrix_to_quat(rot6d_to_matrix(split_pose(x)[1]))
    dots = np.abs(np.sum(q[..., 1:, :, :] * q[..., :-1, :, :], axis=-1)).clip(0.0, 1.0)
    angle = 2 * np.arccos(dots)
    return angle.reshape(-1, *angle.shape[-2:]).max(axis=(0, 2))


# ---------------------------------------------------------------------------
# generation


def _assemble(chunks: np.ndarray, plan: ChunkPlan) -> np.ndarray:
    """Stitch ``(K, N, W, D)`` chunks; overlaps are SLERP-blended and the tail is truncated."""
    K, N, W, D = chunks.shape
    O = plan.overlap_frames
    out = np.zeros((N, plan.windows[-1][1], D))
    out[:, :W] = chunks[0]
    for k in range(1, K):
        s = plan.windows[k][0]
        out[:, s:s + O] = blend_overlap(out[:, s:s + O], chunks[k, :, :O])
        out[:, s + O:s + W] = chunks[k, :, O:]
    return out[:, :plan.total_frames]


def generate_long(
    model: GCDModel,
    audio: AudioFeatureSequence,
    n_dancers: int,
    window_frames: int = 150,
    sampler: str = "ddim",
    n_ddim_steps: int = 50,
    gamma: float = 0.0,
    seed: int = 0,
    return_plan: bool = False,
):
    """Generate a dance for the whole track.

    All windows run through one batched reverse chain. After every step the
    overlap of each adjacent pair is replaced by a linear crossfade of the two
    chunks. At the first step each chunk's dancer order is aligned to its
    predecessor by matching their clean-pose estimates over the overlap, and
    that order is kept for the rest of the chain. The final poses are stitched
    with rotation SLERP across the overlaps.
    """
    cfg = model.cfg
    if not 1 <= n_dancers <= cfg.N_max:
        raise TooManyDancers(f"n_dancers={n_dancers} outside [1, {cfg.N_max}]")
    total = audio.n_frames
    plan = chunk_schedule(total, window_frames)
    if len(plan) == 1:
        group = sample_group_dance(model, audio.crop(0, window_frames), n_dancers, window_frames,
                                   sampler, n_ddim_steps, gamma, seed)
        group = GroupSequence(group.data[:, :total], audio.fps)
        return (group, plan) if return_plan else group

    K, W, O = len(plan), window_frames, plan.overlap_frames
    gen = seeded_generators([seed])
    x, z = draw_initial(gen * K, (n_dancers, W, cfg.pose_dim), cfg.d)
    # every chunk draws from the same generator in turn; z is taken from the first draw
    z = z[:1].expand(K, -1)
    feats = torch.stack([
        torch.as_tensor(audio.crop(s, e).features, dtype=torch.float32) for s, e in plan.windows
    ])
    model.eval()
    with torch.no_grad():
        tokens = model.denoiser.encode_music(feats)
        w = model.denoiser.group_embedding(tokens, n_dancers, z)
    fade = torch.as_tensor(crossfade_weights(O), dtype=torch.float32)[:, None]
    perm: list = []

    def crossfade(x_next):
        for k in range(1, K):
            mixed = fade * x_next[k - 1, :, W - O:] + (1 - fade) * x_next[k, :, :O]
            x_next[k - 1, :, W - O:] = mixed
            x_next[k, :, :O] = mixed
        return x_next

    def after_step(x_next, x0_hat, m_prev):
        if not perm:
            # align dancer slots once, at the first step, then keep that order
            order = [list(range(n_dancers))]
            est = model.denormalize(x0_hat).double().numpy()
            for k in range(1, K):
                prev = est[k - 1][order[-1]]
                order.append(list(match_dancers_hungarian(overlap_cost(prev[:, W - O:], est[k][:, :O])).permutation))
            perm.extend(order)
            x_next = torch.stack([x_next[k, order[k]] for k in range(K)])
        return crossfade(x_next.clone())

    x0 = reverse_chain(model, x, tokens, w, sampler, n_ddim_steps, gamma, gen * K, after_step=after_step)
    chunks = orthogonalize_poses(model.denormalize(x0).double().numpy())
    group = GroupSequence(orthogonalize_poses(_assemble(chunks, plan)), audio.fps)
    return (group, plan) if return_plan else group
