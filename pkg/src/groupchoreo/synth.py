"""Deterministic synthetic music features and beat-locked group dances.

Stands in for real audio embeddings and captured group motion so the whole
pipeline can be trained and checked against known ground truth.

Music feature channels (``d_a`` >= 8):

* 0: beat pulse, 1.0 on beat frames and 0.0 elsewhere
* 1: onset decay since the last beat
* 2, 3: sin / cos of the beat phase
* 4, 5: sin / cos of the bar phase (4 beats per bar)
* 6..: smooth band envelopes plus seeded noise
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import BadDuration, IoFailure, SequenceTooShort
from .motion import (
    DEFAULT_FPS,
    N_JOINTS,
    GroupSequence,
    axis_angle_to_matrix,
    join_pose,
    matrix_to_rot6d,
    save_motion,
)

D_AUDIO = 32
PULSE_CHANNEL = 0
ROOT_HEIGHT = 0.975
FORMATION_RADIUS = 1.5

# per-joint amplitude scale (radians) of the synthetic move vocabulary
_JOINT_SCALE = np.array(
    [0.0, 0.35, 0.35, 0.15, 0.45, 0.45, 0.12, 0.2, 0.2, 0.1, 0.1, 0.1,
     0.2, 0.15, 0.15, 0.25, 0.6, 0.6, 0.8, 0.8, 0.4, 0.4, 0.2, 0.2]
)


@dataclass
class AudioFeatureSequence:
    features: np.ndarray
    fps: float = DEFAULT_FPS
    beat_frames: list[int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be (T, D_a), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("audio features must be finite")
        T = self.features.shape[0]
        beats = sorted(int(b) for b in (self.beat_frames or []))
        if any(not 0 <= b < T for b in beats):
            raise ValueError("beat frames must lie in [0, T)")
        self.beat_frames = beats

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def d_a(self) -> int:
        return self.features.shape[1]

    def crop(self, start: int, stop: int) -> "AudioFeatureSequence":
        """Frames ``[start, stop)``; frames past the end repeat the last frame."""
        idx = np.minimum(np.arange(start, stop), self.n_frames - 1)
        beats = [b - start for b in self.beat_frames if start <= b < min(stop, self.n_frames)]
        return AudioFeatureSequence(self.features[idx], self.fps, beats)

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "d_a": self.d_a,
            "beat_frames": list(self.beat_frames),
            "features": np.round(self.features, 6).tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AudioFeatureSequence":
        feats = np.asarray(obj["features"], dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != obj.get("d_a", feats.shape[1]):
            raise ValueError("audio file d_a disagrees with feature width")
        return cls(feats, obj.get("fps", DEFAULT_FPS), obj.get("beat_frames", []))


def save_audio(audio: AudioFeatureSequence, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(audio.to_dict()))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load_audio(path) -> AudioFeatureSequence:
    try:
        return AudioFeatureSequence.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IoFailure(f"cannot read audio {path}: {exc}") from exc


def _n_frames(duration_s: float, fps: float) -> int:
    T = duration_s * fps
    if abs(T - round(T)) > 1e-9:
        raise BadDuration(f"duration {duration_s}s at {fps} fps is not a whole number of frames")
    if round(T) < 1:
        raise BadDuration("duration yields zero frames")
    return int(round(T))


def beat_grid(bpm: float, n_frames: int, fps: float, extra: int = 0) -> np.ndarray:
    """Beat frames ``round(k * fps * 60 / bpm)``; ``extra`` beats past the end are kept."""
    period = fps * 60.0 / bpm
    k = np.arange(int(np.ceil(n_frames / period)) + extra + 1)
    grid = np.floor(k * period + 0.5).astype(int)
    inside = grid[grid < n_frames]
    outside = grid[grid >= n_frames][:extra]
    return np.concatenate([inside, outside])


def beat_phase(n_frames: int, beats) -> tuple[np.ndarray, np.ndarray]:
    """Fractional position inside the current beat and the beat index, per frame.

    ``beats`` must cover the whole range, i.e. include a beat at or before
    frame 0 and one past the last frame. Fractional frames are allowed.
    """
    beats = np.asarray(beats, dtype=np.float64)
    t = np.arange(n_frames, dtype=np.float64) if np.isscalar(n_frames) else np.asarray(n_frames)
    k = np.searchsorted(beats, t, side="right") - 1
    k = np.clip(k, 0, len(beats) - 2)
    frac = (t - beats[k]) / (beats[k + 1] - beats[k])
    return frac, k


def generate_music_track(
    bpm: float,
    duration_s: float,
    fps: float = DEFAULT_FPS,
    seed: int = 0,
    d_a: int = D_AUDIO,
) -> AudioFeatureSequence:
    if bpm <= 0:
        raise ValueError("bpm must be positive")
    if d_a < 8:
        raise ValueError("synthetic tracks need d_a >= 8")
    T = _n_frames(duration_s, fps)
    rng = np.random.default_rng(seed)
    grid = beat_grid(bpm, T, fps, extra=2)
    beats = grid[grid < T]
    t = np.arange(T, dtype=np.float64)

    feats = np.zeros((T, d_a))
    feats[beats, PULSE_CHANNEL] = 1.0
    frac, k = beat_phase(T, grid)
    period = fps * 60.0 / bpm
    feats[:, 1] = np.exp(-frac * period / 4.0)
    feats[:, 2] = np.sin(2 * np.pi * frac)
    feats[:, 3] = np.cos(2 * np.pi * frac)
    bar = ((k % 4) + frac) / 4.0
    feats[:, 4] = np.sin(2 * np.pi * bar)
    feats[:, 5] = np.cos(2 * np.pi * bar)

    n_bands = d_a - 6
    harmonics = rng.choice([0.125, 0.25, 0.5, 1.0, 2.0], size=n_bands)
    phases = rng.uniform(0, 2 * np.pi, size=n_bands)
    gains = rng.uniform(0.3, 1.0, size=n_bands)
    bands = 0.5 + 0.5 * np.sin(2 * np.pi * np.outer(t / period, harmonics) + phases)
    feats[:, 6:] = gains * bands + 0.05 * rng.standard_normal((T, n_bands))
    return AudioFeatureSequence(feats, fps, beats.tolist())


def extract_music_beats(audio: AudioFeatureSequence, channel: int = PULSE_CHANNEL) -> list[int]:
    """Re-detect beats from the pulse channel by onset envelope and peak picking.

    The onset envelope is the half-wave rectified first difference; a frame is
    a beat when it is the first maximum of a 3-frame window and reaches half the
    envelope's global maximum.
    """
    if audio.n_frames < 2:
        raise SequenceTooShort("beat extraction needs T >= 2")
    x = audio.features[:, channel]
    onset = np.maximum(np.diff(x, prepend=0.0), 0.0)
    peak = onset.max()
    if peak <= 0:
        return []
    padded = np.concatenate([[-np.inf], onset, [-np.inf]])
    left, mid, right = padded[:-2], padded[1:-1], padded[2:]
    is_peak = (mid > left) & (mid >= right) & (mid >= 0.5 * peak)
    return np.flatnonzero(is_peak).tolist()


def _beat_profile(frac: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Rises 0 -> 1 over even beats and falls back over odd ones; speed is zero on beats."""
    rise = frac - np.sin(2 * np.pi * frac) / (2 * np.pi)
    return np.where(k % 2 == 0, rise, 1.0 - rise)


def _random_move(rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((N_JOINTS, 3)) * _JOINT_SCALE[:, None] / np.sqrt(3)


def _formation(n_dancers: int) -> np.ndarray:
    if n_dancers == 1:
        return np.zeros((1, 3))
    ang = 2 * np.pi * np.arange(n_dancers) / n_dancers
    return np.stack([FORMATION_RADIUS * np.cos(ang), np.zeros(n_dancers), FORMATION_RADIUS * np.sin(ang)], -1)


def generate_group_dance(
    audio: AudioFeatureSequence,
    n_dancers: int,
    consistency: float,
    seed: int = 0,
) -> GroupSequence:
    """Beat-locked group motion whose synchrony is controlled by ``consistency``.

    Every dancer drives each joint along a fixed rotation axis by a shared
    beat profile. Lower consistency blends in a personal move and a personal
    phase offset of up to half a beat.
    """
    if n_dancers < 1:
        raise ValueError("n_dancers must be >= 1")
    if not 0.0 <= consistency <= 1.0:
        raise ValueError("consistency must be in [0, 1]")
    rng = np.random.default_rng(seed)
    T, fps = audio.n_frames, audio.fps
    beats = np.asarray(audio.beat_frames, dtype=np.float64)
    if len(beats) >= 2:
        period = float(np.median(np.diff(beats)))
    else:
        period = fps / 2.0
        beats = np.array([0.0]) if len(beats) == 0 else beats
    # extend the grid so that every (phase shifted) frame has a surrounding beat
    before = beats[0] - period * np.arange(int(T / period) + 3, 0, -1)
    after = beats[-1] + period * np.arange(1, int(T / period) + 4)
    grid = np.concatenate([before, beats, after])

    base_move = _random_move(rng)
    sway = rng.uniform(0.05, 0.15)
    spread = 1.0 - consistency
    offsets = _formation(n_dancers)
    t = np.arange(T, dtype=np.float64)
    data = np.empty((n_dancers, T, 3 + N_JOINTS * 6))
    for i in range(n_dancers):
        own_move = _random_move(rng)
        shift = spread * rng.uniform(-0.5, 0.5) * period
        move = consistency * base_move + spread * own_move
        frac, k = beat_phase(t - shift, grid)
        # align parity to the unshifted grid so consistent dancers agree
        s = _beat_profile(frac, k - len(before))
        angle = np.linalg.norm(move, axis=-1)
        axis = np.where(angle[:, None] > 0, move / np.maximum(angle[:, None], 1e-12), [1.0, 0, 0])
        R = axis_angle_to_matrix(np.broadcast_to(axis, (T, N_JOINTS, 3)), s[:, None] * angle[None, :])
        root = np.zeros((T, 3))
        root[:, 0] = sway * s
        root[:, 1] = ROOT_HEIGHT
        root += offsets[i]
        data[i] = join_pose(root, matrix_to_rot6d(R))
    return GroupSequence(data, fps)


@dataclass
class SynthDatasetSpec:
    n_sequences: int = 500
    n_dancers_range: tuple[int, int] = (2, 4)
    bpm_range: tuple[float, float] = (90.0, 150.0)
    duration_s: float = 5.0
    consistency_range: tuple[float, float] = (0.7, 1.0)
    seed: int = 0
    fps: float = DEFAULT_FPS
    d_a: int = D_AUDIO

    def __post_init__(self):
        lo, hi = self.n_dancers_range
        if not 1 <= lo <= hi:
            raise ValueError("n_dancers_range must satisfy 1 <= lo <= hi")
        if not 0 < self.bpm_range[0] <= self.bpm_range[1]:
            raise ValueError("bpm_range must be positive and ordered")
        c0, c1 = self.consistency_range
        if not 0.0 <= c0 <= c1 <= 1.0:
            raise ValueError("consistency_range must lie in [0, 1] and be ordered")
        if self.n_sequences < 0:
            raise ValueError("n_sequences must be >= 0")
        _n_frames(self.duration_s, self.fps)


def build_dataset(spec: SynthDatasetSpec, out_dir, binary_motion: bool = True) -> list[dict]:
    """Write paired audio / motion files plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rng = np.random.default_rng(spec.seed)
    suffix = ".gcdm" if binary_motion else ".json"
    manifest = []
    for i in range(spec.n_sequences):
        bpm = float(np.round(rng.uniform(*spec.bpm_range), 3))
        n = int(rng.integers(spec.n_dancers_range[0], spec.n_dancers_range[1] + 1))
        consistency = float(np.round(rng.uniform(*spec.consistency_range), 4))
        audio_seed, dance_seed = (int(s) for s in rng.integers(0, 2**31, size=2))
        audio = generate_music_track(bpm, spec.duration_s, spec.fps, audio_seed, spec.d_a)
        group = generate_group_dance(audio, n, consistency, dance_seed)
        audio_name, motion_name = f"audio_{i:05d}.json", f"motion_{i:05d}{suffix}"
        save_audio(audio, out / audio_name)
        save_motion(group, out / motion_name, binary=binary_motion)
        manifest.append(
            {"audio": audio_name, "motion": motion_name, "bpm": bpm, "n_dancers": n, "consistency": consistency}
        )
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
        (out / "dataset_spec.json").write_text(json.dumps(asdict(spec)))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest
