"""The trainable bundle: denoiser, contrastive encoder and their noise schedule."""
from __future__ import annotations

from functools import cached_property

import numpy as np
import torch
from torch import nn

from .contrastive import ContrastiveEncoder
from .diffusion import NoiseSchedule, build_cosine_schedule
from .network import DenoiserNet, ModelConfig


STD_FLOOR = 1e-2


class GCDModel(nn.Module):
    """Denoiser and contrastive encoder working on standardized poses.

    Diffusion runs on ``(x - pose_mean) / pose_std``. The statistics default
    to the identity map and are fitted on the training set by the trainer.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig.toy()
        if seed is not None:
            torch.manual_seed(seed)
        self.denoiser = DenoiserNet(self.cfg)
        self.encoder = ContrastiveEncoder(self.cfg)
        self.register_buffer("pose_mean", torch.zeros(self.cfg.pose_dim))
        self.register_buffer("pose_std", torch.ones(self.cfg.pose_dim))

    def fit_normalizer(self, poses, std_floor: float = STD_FLOOR) -> None:
        """Per-channel mean and std over every frame of ``poses`` (iterable of ``(..., D)`` arrays)."""
        flat = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, self.cfg.pose_dim) for p in poses])
        self.pose_mean.copy_(torch.as_tensor(flat.mean(0)))
        self.pose_std.copy_(torch.as_tensor(np.maximum(flat.std(0), std_floor)))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.pose_mean.to(x.dtype)) / self.pose_std.to(x.dtype)

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.pose_std.to(x.dtype) + self.pose_mean.to(x.dtype)

    @cached_property
    def schedule(self) -> NoiseSchedule:
        return build_cosine_schedule(self.cfg.M)

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Arrays keyed ``denoiser/...``, ``contrastive/...`` and ``normalizer/...``."""
        out = {f"denoiser/{k}": v for k, v in self.denoiser.state_dict().items()}
        out.update({f"contrastive/{k}": v for k, v in self.encoder.state_dict().items()})
        out["normalizer/mean"] = self.pose_mean
        out["normalizer/std"] = self.pose_std
        return out

    def load_named_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        den = {k[len("denoiser/"):]: v for k, v in arrays.items() if k.startswith("denoiser/")}
        enc = {k[len("contrastive/"):]: v for k, v in arrays.items() if k.startswith("contrastive/")}
        self.denoiser.load_state_dict(den)
        self.encoder.load_state_dict(enc)
        if "normalizer/mean" in arrays:
            self.pose_mean.copy_(arrays["normalizer/mean"])
            self.pose_std.copy_(arrays["normalizer/std"])
