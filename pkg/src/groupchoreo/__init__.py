"""Music-driven group dance generation with contrastive diffusion guidance."""
from __future__ import annotations

from .errors import GroupChoreoError
from .estimator import GroupChoreographer, KineticFeatures
from .longform import chunk_schedule, generate_long, match_dancers_hungarian
from .metrics import MetricReport, evaluate
from .model import GCDModel
from .motion import GroupSequence, MotionSequence, default_skeleton, load_motion, save_motion
from .network import ModelConfig
from .sampling import sample_group_dance
from .synth import AudioFeatureSequence, SynthDatasetSpec, build_dataset, generate_group_dance, generate_music_track
from .training import LossWeights, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AudioFeatureSequence",
    "GCDModel",
    "GroupChoreoError",
    "GroupChoreographer",
    "GroupSequence",
    "KineticFeatures",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "MotionSequence",
    "SynthDatasetSpec",
    "TrainConfig",
    "Trainer",
    "build_dataset",
    "chunk_schedule",
    "default_skeleton",
    "evaluate",
    "generate_group_dance",
    "generate_long",
    "generate_music_track",
    "load_motion",
    "match_dancers_hungarian",
    "sample_group_dance",
    "save_motion",
    "train",
]
