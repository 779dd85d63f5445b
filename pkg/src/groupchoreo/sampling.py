"""Reverse-chain sampling of group dances with optional contrastive guidance."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .diffusion import (
    GuidanceConfig,
    ddim_timesteps,
    guidance_shift,
    reverse_step_ddim,
    reverse_step_ddpm,
)
from .errors import MissingEncoder, TooManyDancers, UntrainedModel
from .model import GCDModel
from .motion import GroupSequence, orthogonalize_poses
from .synth import AudioFeatureSequence


def seeded_generators(seeds) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(int(s) % 2**63) for s in seeds]


def draw_initial(gens, shape, d: int, dtype=torch.float32):
    """Initial noise ``x_M`` and group-identity draw ``z``, one generator per row."""
    x = torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])
    z = torch.stack([torch.randn(d, generator=g, dtype=dtype) for g in gens])
    return x, z


def audio_tensor(audio: AudioFeatureSequence, n_frames: int, start: int = 0) -> torch.Tensor:
    return torch.as_tensor(audio.crop(start, start + n_frames).features, dtype=torch.float32)


def make_guidance(model: GCDModel, w: torch.Tensor, gamma: float) -> GuidanceConfig:
    if gamma == 0:
        return GuidanceConfig(0.0)
    if model.encoder is None:
        raise MissingEncoder("guidance needs a contrastive encoder")
    return GuidanceConfig(gamma, lambda x, m: model.encoder(x, w, m))


def reverse_chain(
    model: GCDModel,
    x: torch.Tensor,
    tokens: torch.Tensor,
    w: torch.Tensor,
    sampler: str = "ddim",
    n_ddim_steps: int = 50,
    gamma: float = 0.0,
    gens=None,
    after_step: Callable | None = None,
) -> torch.Tensor:
    """Run the reverse process from ``x = x_M`` down to ``x_0``, in normalized pose space.

    ``after_step(x, x0_hat, m_prev)`` may return a replacement for ``x`` after
    every step; long-form generation uses it to blend chunk overlaps.
    """
    sched = model.schedule
    guidance = make_guidance(model, w, gamma)
    den = model.denoiser
    if sampler == "ddpm":
        pairs = [(m, m - 1) for m in range(sched.M, 0, -1)]
    elif sampler == "ddim":
        grid = ddim_timesteps(sched.M, n_ddim_steps)
        pairs = list(zip(grid[:-1], grid[1:]))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    for m, m_prev in pairs:
        with torch.no_grad():
            x0_hat = den(x, m, tokens, w)
        if sampler == "ddpm":
            x_next = reverse_step_ddpm(x, x0_hat, m, sched, guidance, rng=gens)
        else:
            x_next = reverse_step_ddim(x, x0_hat, m, m_prev, sched)
            if guidance.active:
                x_next = x_next + guidance.gamma * sched.jump_variance(m, m_prev) * guidance_shift(x, m, guidance)
        if after_step is not None:
            x_next = after_step(x_next, x0_hat, m_prev)
        x = x_next.detach()
    return x


def sample_batch(
    model: GCDModel | None,
    audio: AudioFeatureSequence,
    n_dancers: int,
    n_frames: int,
    sampler: str = "ddim",
    n_ddim_steps: int = 50,
    gamma: float = 0.0,
    seeds=(0,),
    return_array: bool = False,
):
    """One sample per seed, sharing the music; rows are independent given their seed."""
    if model is None:
        raise UntrainedModel("no trained model given")
    cfg = model.cfg
    if not 1 <= n_dancers <= cfg.N_max:
        raise TooManyDancers(f"n_dancers={n_dancers} outside [1, {cfg.N_max}]")
    gens = seeded_generators(seeds)
    x, z = draw_initial(gens, (n_dancers, n_frames, cfg.pose_dim), cfg.d)
    feats = audio_tensor(audio, n_frames).unsqueeze(0).expand(len(gens), -1, -1)
    model.eval()
    with torch.no_grad():
        tokens = model.denoiser.encode_music(feats)
        w = model.denoiser.group_embedding(tokens, n_dancers, z)
    x0 = reverse_chain(model, x, tokens, w, sampler, n_ddim_steps, gamma, gens)
    out = model.denormalize(x0).double().numpy()
    if return_array:
        return out
    return [GroupSequence(orthogonalize_poses(a), audio.fps) for a in out]


def sample_group_dance(
    model: GCDModel | None,
    audio: AudioFeatureSequence,
    n_dancers: int,
    n_frames: int,
    sampler: str = "ddim",
    n_ddim_steps: int = 50,
    gamma: float = 0.0,
    seed: int = 0,
) -> GroupSequence:
    return sample_batch(model, audio, n_dancers, n_frames, sampler, n_ddim_steps, gamma, seeds=[seed])[0]


def score_samples(model: GCDModel, groups, audio: AudioFeatureSequence, z_seeds) -> np.ndarray:
    """Contrastive score at step 0 of finished samples under the group embedding their seed implies."""
    cfg = model.cfg
    gens = seeded_generators(z_seeds)
    arr = np.stack([g.data for g in groups])
    _, z = draw_initial(gens, arr.shape[1:], cfg.d)
    with torch.no_grad():
        feats = audio_tensor(audio, arr.shape[2]).unsqueeze(0).expand(len(gens), -1, -1)
        tokens = model.denoiser.encode_music(feats)
        w = model.denoiser.group_embedding(tokens, arr.shape[1], z)
        x = model.normalize(torch.as_tensor(arr, dtype=torch.float32))
        return model.encoder(x, w, 0).numpy()
