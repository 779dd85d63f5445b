"""Single-dancer and group evaluation metrics plus the motion-change curve.

Formulas are pinned so that scores are comparable within this package only;
absolute values are not comparable with numbers computed by other toolkits.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoBeats, NumericalFailure, SequenceTooShort, TooFewDancers, TooFewSamples
from .motion import (
    GroupSequence,
    MotionSequence,
    Skeleton,
    default_skeleton,
    forward_kinematics,
    kinetic_features,
    kinetic_features_from_positions,
)

MMC_SIGMA = 3.0
COLLISION_RADIUS = 0.25


# ---------------------------------------------------------------------------
# Frechet distance


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_from_stats(mu1, cov1, mu2, cov2, neg_tol: float = 1e-8) -> float:
    """``|mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2})``.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix ``C1^{1/2} C2 C1^{1/2}``, which shares its spectrum with
    ``C1 C2``.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    s1 = _sqrtm_psd(cov1)
    prod = s1 @ cov2 @ s1
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if np.any(vals < -neg_tol * scale):
        raise NumericalFailure(f"covariance product has negative eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt, 0.0))


def frechet_distance(feats_a, feats_b) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise TooFewSamples("Frechet distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_from_stats(a.mean(0), cov_a, b.mean(0), cov_b)


# ---------------------------------------------------------------------------
# kinetic velocity and beats


def kinetic_velocity(positions, fps: float) -> np.ndarray:
    """Sum over joints of joint speed (m/s), central differences, for ``(T, J, 3)``."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise SequenceTooShort("kinetic velocity needs T >= 2")
    vel = np.gradient(positions, axis=0) * fps
    return np.linalg.norm(vel, axis=-1).sum(axis=-1)


def smooth(x, window: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def local_minima(x, rel_tol: float = 1e-9) -> np.ndarray:
    """Interior frames strictly below the previous frame and not above the next.

    Differences smaller than ``rel_tol`` times the series scale count as ties,
    so round-off on a flat series does not produce minima.
    """
    x = np.asarray(x, dtype=np.float64)
    tol = rel_tol * max(float(np.abs(x).max(initial=0.0)), 1.0)
    mid = x[1:-1]
    idx = np.flatnonzero((mid < x[:-2] - tol) & (mid <= x[2:] + tol))
    return idx + 1


def motion_beats(motion: MotionSequence, skeleton: Skeleton | None = None) -> np.ndarray:
    kv = kinetic_velocity(forward_kinematics(motion.data, skeleton), motion.fps)
    return local_minima(smooth(kv, 5))


def beat_alignment_score(motion_beat_frames, music_beat_frames, sigma: float = MMC_SIGMA) -> float:
    motion_b = np.asarray(motion_beat_frames, dtype=np.float64)
    music_b = np.asarray(music_beat_frames, dtype=np.float64)
    if music_b.size == 0:
        raise NoBeats("no music beats given")
    if motion_b.size == 0:
        return 0.0
    dist = np.abs(motion_b[:, None] - music_b[None, :]).min(axis=1)
    return float(np.mean(np.exp(-(dist**2) / (2 * sigma**2))))


def mmc_beat_alignment(
    motion: MotionSequence,
    beat_frames,
    sigma_frames: float = MMC_SIGMA,
    skeleton: Skeleton | None = None,
) -> float:
    if len(beat_frames) == 0:
        raise NoBeats("no music beats given")
    if motion.n_frames < 5:
        raise SequenceTooShort("beat alignment needs T >= 5")
    return beat_alignment_score(motion_beats(motion, skeleton), beat_frames, sigma_frames)


# ---------------------------------------------------------------------------
# single-dancer metrics


def _pairwise_mean_distance(feats: np.ndarray) -> float:
    pairs = list(itertools.combinations(range(len(feats)), 2))
    return float(np.mean([np.linalg.norm(feats[i] - feats[j]) for i, j in pairs]))


def generation_diversity(motions, skeleton: Skeleton | None = None) -> float:
    """Mean pairwise L2 distance between kinetic feature vectors."""
    if len(motions) < 2:
        raise TooFewSamples("diversity needs at least 2 motions")
    feats = np.stack([kinetic_features(m, skeleton) for m in motions])
    return _pairwise_mean_distance(feats)


ACC_FLOOR = 1e-6  # m/s^2, COM accelerations below this are round-off


def pfc(motion: MotionSequence, skeleton: Skeleton | None = None, eps: float = 1e-8) -> float:
    skeleton = skeleton or default_skeleton()
    if motion.n_frames < 3:
        raise SequenceTooShort("PFC needs T >= 3")
    pos = forward_kinematics(motion.data, skeleton)
    fps = motion.fps
    com = pos.mean(axis=1)
    acc = np.linalg.norm(com[2:] - 2 * com[1:-1] + com[:-2], axis=-1) * fps**2
    acc[acc < ACC_FLOOR] = 0.0
    feet = pos[:, [skeleton.left_foot, skeleton.right_foot]]
    foot_speed = np.linalg.norm(feet[2:] - feet[:-2], axis=-1) * fps / 2
    s = acc * foot_speed[:, 0] * foot_speed[:, 1]
    return float(s.sum() / (len(s) * acc.max() + eps))


# ---------------------------------------------------------------------------
# group metrics


def _dancer_velocities(group: GroupSequence, skeleton: Skeleton | None) -> np.ndarray:
    pos = forward_kinematics(group.data, skeleton)
    return np.stack([kinetic_velocity(p, group.fps) for p in pos])


def gmc_from_velocity(series) -> float:
    """Mean lag-0 Pearson correlation over dancer pairs, in percent."""
    series = np.asarray(series, dtype=np.float64)
    if series.shape[0] < 2:
        raise TooFewDancers("GMC needs at least 2 dancers")
    centered = series - series.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    corrs = []
    for i, j in itertools.combinations(range(series.shape[0]), 2):
        denom = norms[i] * norms[j]
        corrs.append(0.0 if denom <= 1e-12 else float(centered[i] @ centered[j] / denom))
    return 100.0 * float(np.mean(corrs))


def gmc(group: GroupSequence, skeleton: Skeleton | None = None) -> float:
    if group.n_dancers < 2:
        raise TooFewDancers("GMC needs at least 2 dancers")
    if group.n_frames < 2:
        raise SequenceTooShort("GMC needs T >= 2")
    return gmc_from_velocity(_dancer_velocities(group, skeleton))


def tif(group: GroupSequence, collision_radius: float = COLLISION_RADIUS) -> float:
    """Fraction of frames in which any pair of roots is closer than two radii (x-z plane)."""
    if group.n_dancers < 2:
        raise TooFewDancers("TIF needs at least 2 dancers")
    ground = group.data[:, :, [0, 2]]
    hit = np.zeros(group.n_frames, dtype=bool)
    for i, j in itertools.combinations(range(group.n_dancers), 2):
        hit |= np.linalg.norm(ground[i] - ground[j], axis=-1) < 2 * collision_radius
    return float(hit.mean())


def group_features(group: GroupSequence, skeleton: Skeleton | None = None) -> np.ndarray:
    """51-dim group descriptor: kinetic-feature mean and std over dancers, root distance stats."""
    pos = forward_kinematics(group.data, skeleton)
    kf = np.stack([kinetic_features_from_positions(p, group.fps) for p in pos])
    if group.n_dancers >= 2:
        roots = group.data[:, :, :3]
        d = np.concatenate(
            [np.linalg.norm(roots[i] - roots[j], axis=-1) for i, j in itertools.combinations(range(group.n_dancers), 2)]
        )
        dist = [d.mean(), d.min(), d.max()]
    else:
        dist = [0.0, 0.0, 0.0]
    return np.concatenate([kf.mean(0), kf.std(0), dist])


def gmr(groups_a, groups_b, skeleton: Skeleton | None = None) -> float:
    if len(groups_a) < 2 or len(groups_b) < 2:
        raise TooFewSamples("GMR needs at least 2 groups per set")
    fa = np.stack([group_features(g, skeleton) for g in groups_a])
    fb = np.stack([group_features(g, skeleton) for g in groups_b])
    return frechet_distance(fa, fb)


def motion_change_curve(group: GroupSequence, window_frames: int, skeleton: Skeleton | None = None) -> np.ndarray:
    """Per-frame change of windowed kinetic features, averaged over dancers.

    Entry ``t`` compares the kinetic features of frames ``[t, t+W)`` and
    ``[t+1, t+1+W)``; the series has ``T - W`` entries.
    """
    T = group.n_frames
    if window_frames < 2:
        raise ValueError("window_frames must be >= 2")
    if T < window_frames + 1:
        raise SequenceTooShort(f"need T > window ({window_frames}), got T={T}")
    pos = forward_kinematics(group.data, skeleton)
    sq = np.sum(np.diff(pos, axis=1) ** 2, axis=-1) * group.fps**2
    csum = np.concatenate([np.zeros_like(sq[:, :1]), np.cumsum(sq, axis=1)], axis=1)
    n_steps = window_frames - 1
    windows = (csum[:, n_steps:] - csum[:, :-n_steps]) / n_steps
    change = np.linalg.norm(np.diff(windows, axis=1), axis=-1)
    return change.mean(axis=0)[: T - window_frames]


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    fid: float | None = None
    mmc: float | None = None
    gendiv: float | None = None
    pfc: float | None = None
    gmr: float | None = None
    gmc: float | None = None
    tif: float | None = None
    motion_change: list[float] = field(default_factory=list)
    notes: dict[str, str] = field(default_factory=dict)

    def scores(self) -> dict:
        keys = ("fid", "mmc", "gendiv", "pfc", "gmr", "gmc", "tif")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}

    def to_json(self) -> dict:
        out = self.scores()
        out["motion_change_length"] = len(self.motion_change)
        if self.notes:
            out["notes"] = dict(self.notes)
        return out

    def summary_line(self) -> str:
        return " | ".join(f"{k}={v:.4f}" for k, v in self.scores().items())

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame", "motion_change"])
                w.writerows(enumerate(self.motion_change))


def evaluate(
    generated: list[GroupSequence],
    reference: list[GroupSequence],
    beats: list | None = None,
    skeleton: Skeleton | None = None,
    window_frames: int = 30,
) -> MetricReport:
    """Score generated groups against reference groups.

    ``beats`` holds one list of music beat frames per generated group; when it
    is ``None`` MMC is skipped. Group metrics are skipped when a generated
    group has fewer than two dancers.
    """
    skeleton = skeleton or default_skeleton()
    report = MetricReport()
    gen_dancers = [d for g in generated for d in g.dancers]
    ref_dancers = [d for g in reference for d in g.dancers]
    feats_gen = np.stack([kinetic_features(d, skeleton) for d in gen_dancers])
    feats_ref = np.stack([kinetic_features(d, skeleton) for d in ref_dancers])
    report.fid = frechet_distance(feats_gen, feats_ref)
    report.gendiv = _pairwise_mean_distance(feats_gen) if len(feats_gen) >= 2 else 0.0
    report.pfc = float(np.mean([pfc(d, skeleton) for d in gen_dancers]))
    if beats is None:
        report.notes["mmc"] = "omitted: no audio given"
    else:
        scores = [
            mmc_beat_alignment(d, b, skeleton=skeleton)
            for g, b in zip(generated, beats)
            if len(b) > 0
            for d in g.dancers
        ]
        if scores:
            report.mmc = float(np.mean(scores))
        else:
            report.notes["mmc"] = "omitted: audio has no beats"
    report.gmr = gmr(generated, reference, skeleton)
    if min(g.n_dancers for g in generated) < 2:
        report.notes["gmc"] = report.notes["tif"] = "n_dancers < 2"
    else:
        report.gmc = float(np.mean([gmc(g, skeleton) for g in generated]))
        report.tif = float(np.mean([tif(g) for g in generated]))
    curves = [motion_change_curve(g, window_frames, skeleton) for g in generated if g.n_frames > window_frames]
    if curves:
        n = min(len(c) for c in curves)
        report.motion_change = np.mean([c[:n] for c in curves], axis=0).tolist()
    return report
