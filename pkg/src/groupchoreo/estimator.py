"""scikit-learn style wrappers around training, sampling and kinetic features."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .errors import BadShape, ShapeMismatch
from .metrics import gmc, generation_diversity
from .motion import DEFAULT_FPS, POSE_DIM, GroupSequence, MotionSequence, default_skeleton, kinetic_features
from .sampling import sample_batch, score_samples
from .synth import AudioFeatureSequence
from .training import TrainConfig, Trainer


def check_group_array(x, allow_batch: bool = True) -> np.ndarray:
    """Validate a packed group ``(N, T, 147)`` or batch ``(B, N, T, 147)``; returns float64."""
    arr = np.asarray(x, dtype=np.float64)
    ok_ndim = (3, 4) if allow_batch else (3,)
    if arr.ndim not in ok_ndim or arr.shape[-1] != POSE_DIM:
        raise BadShape(f"expected (..., N, T, {POSE_DIM}) with ndim in {ok_ndim}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise BadShape("motion contains non-finite values")
    return arr


def check_paired(groups, audios) -> list[tuple[AudioFeatureSequence, GroupSequence]]:
    """Pair groups with their music tracks, checking counts and frame lengths."""
    groups = [g if isinstance(g, GroupSequence) else GroupSequence(check_group_array(g, allow_batch=False)) for g in groups]
    audios = list(audios)
    if len(groups) != len(audios):
        raise ShapeMismatch(f"{len(groups)} groups but {len(audios)} audio tracks")
    for g, a in zip(groups, audios):
        if a.n_frames < g.n_frames:
            raise ShapeMismatch(f"audio has {a.n_frames} frames, motion has {g.n_frames}")
    return list(zip(audios, groups))


class KineticFeatures(BaseEstimator, TransformerMixin):
    """Maps single-dancer motions ``(T, 147)`` to their 24-dim kinetic features."""

    def __init__(self, fps: float = DEFAULT_FPS):
        self.fps = fps

    def fit(self, X, y=None):
        self.n_features_out_ = 24
        return self

    def transform(self, X):
        skel = default_skeleton()
        out = []
        for seq in X:
            seq = seq if isinstance(seq, MotionSequence) else MotionSequence(np.asarray(seq, dtype=np.float64), self.fps)
            out.append(kinetic_features(seq, skel))
        return np.stack(out)


class GroupChoreographer(BaseEstimator):
    """Fit on (group, music) pairs and sample new group dances for music.

    ``gamma`` trades group consistency (positive) against per-dancer
    diversity (negative) at sampling time.
    """

    def __init__(self, iterations: int = 2000, learning_rate: float = 5e-4, batch_size: int = 8,
                 crop_frames: int = 60, gamma: float = 0.0, n_ddim_steps: int = 50,
                 use_geo: bool = True, use_nce: bool = True, use_group_attention: bool = True,
                 random_state: int = 0):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.crop_frames = crop_frames
        self.gamma = gamma
        self.n_ddim_steps = n_ddim_steps
        self.use_geo = use_geo
        self.use_nce = use_nce
        self.use_group_attention = use_group_attention
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, iterations=self.iterations,
            T=self.crop_frames, seed=self.random_state, use_geo=self.use_geo, use_nce=self.use_nce,
            use_group_attention=self.use_group_attention,
        )

    def fit(self, X, y):
        """``X``: groups (GroupSequence or ``(N, T, 147)`` arrays); ``y``: their music tracks."""
        trainer = Trainer(self._train_config(), check_paired(X, y))
        trainer.run()
        self.model_ = trainer.model
        self.history_ = trainer.history
        return self

    def sample(self, audio: AudioFeatureSequence, n_dancers: int, n_frames: int | None = None, seeds=(0,)):
        check_is_fitted(self, "model_")
        n_frames = n_frames or audio.n_frames
        return sample_batch(self.model_, audio, n_dancers, n_frames, "ddim", self.n_ddim_steps, self.gamma, seeds)

    def predict(self, audios, n_dancers: int, seed: int = 0) -> list[GroupSequence]:
        return [self.sample(a, n_dancers, seeds=[seed + i])[0] for i, a in enumerate(audios)]

    def score(self, X, y=None) -> float:
        """Mean group motion correlation of ``X`` (a higher score means more synchronous groups)."""
        groups = [g if isinstance(g, GroupSequence) else GroupSequence(check_group_array(g, allow_batch=False)) for g in X]
        return float(np.mean([gmc(g) for g in groups]))

    def contrastive_scores(self, groups, audio: AudioFeatureSequence, seeds) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("GroupChoreographer is not fitted")
        return score_samples(self.model_, groups, audio, seeds)

    @staticmethod
    def diversity(groups) -> float:
        return generation_diversity([d for g in groups for d in g.dancers])
