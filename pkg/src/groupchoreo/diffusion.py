"""Noise schedule, closed-form noising, posterior and reverse steps.

The step functions work on numpy arrays and torch tensors alike. The step
index ``m`` may be an int or a per-sample integer array/tensor of shape
``(B,)``, in which case coefficients broadcast over the trailing dims.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import BadStep, BadStepPair, BadSteps, MissingEncoder, ShapeMismatch


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step ``m`` in ``[0, M]``; index 0 is the clean data."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def M(self) -> int:
        return len(self.beta) - 1

    def posterior_variance(self, m):
        m = np.asarray(m)
        prev = self.alpha_bar[np.maximum(m - 1, 0)]
        return (1 - prev) / (1 - self.alpha_bar[m]) * self.beta[m]

    def jump_variance(self, m: int, m_prev: int) -> float:
        """Posterior variance of ``x_{m_prev}`` given ``x_m`` and ``x_0``."""
        ab, ab_prev = self.alpha_bar[m], self.alpha_bar[m_prev]
        return float((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))


def build_cosine_schedule(M: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if M < 1:
        raise BadSteps(f"schedule needs M >= 1, got {M}")
    steps = np.arange(M + 1, dtype=np.float64)
    f = np.cos(((steps / M + s) / (1 + s)) * np.pi / 2) ** 2
    target = f / f[0]
    beta = np.clip(1 - target[1:] / target[:-1], 0.0, max_beta)
    beta = np.concatenate([[0.0], beta])
    alpha = 1 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_step(m, sched: NoiseSchedule, lo: int = 0):
    arr = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    if arr.size and (arr.min() < lo or arr.max() > sched.M):
        raise BadStep(f"step index must lie in [{lo}, {sched.M}]")


def _coef(table: np.ndarray, m, like):
    """Gather ``table[m]`` shaped to broadcast against ``like``."""
    if np.ndim(m) == 0 and not isinstance(m, torch.Tensor):
        return float(table[int(m)])
    if isinstance(like, torch.Tensor):
        idx = m if isinstance(m, torch.Tensor) else torch.as_tensor(np.asarray(m))
        vals = torch.as_tensor(table, dtype=like.dtype, device=like.device)[idx.long().to(like.device)]
        return vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))
    vals = table[np.asarray(m)]
    return vals.reshape(vals.shape + (1,) * (np.ndim(like) - vals.ndim))


def q_sample(x0, m, eps, sched: NoiseSchedule):
    """``x_m = sqrt(abar_m) x0 + sqrt(1 - abar_m) eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_step(m, sched)
    return _coef(np.sqrt(sched.alpha_bar), m, x0) * x0 + _coef(np.sqrt(1 - sched.alpha_bar), m, x0) * eps


def posterior_coefficients(sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step coefficients of ``x0`` and ``x_m`` in the posterior mean, and its variance."""
    ab = sched.alpha_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    denom = np.where(1 - ab > 0, 1 - ab, 1.0)
    c0 = np.sqrt(ab_prev) * sched.beta / denom
    cm = np.sqrt(sched.alpha) * (1 - ab_prev) / denom
    var = (1 - ab_prev) / denom * sched.beta
    return c0, cm, var


def posterior_mean_variance(x0, x_m, m, sched: NoiseSchedule):
    """Mean and variance of ``q(x_{m-1} | x_m, x0)``; the variance is a float or per-sample array."""
    if tuple(x0.shape) != tuple(x_m.shape):
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs x_m {tuple(x_m.shape)}")
    _check_step(m, sched, lo=1)
    c0, cm, var = posterior_coefficients(sched)
    mean = _coef(c0, m, x0) * x0 + _coef(cm, m, x0) * x_m
    return mean, _coef(var, m, x0)


@dataclass
class GuidanceConfig:
    """Mean-shift guidance ``gamma * Sigma * grad log f``.

    ``encoder`` maps ``(x, m)`` to per-sample log-scores ``(B,)``; ``x`` is a
    torch tensor that requires grad.
    """

    gamma: float = 0.0
    encoder: Callable | None = None

    def __post_init__(self):
        if self.gamma != 0 and self.encoder is None:
            raise MissingEncoder("guidance with gamma != 0 needs an encoder")

    @property
    def active(self) -> bool:
        return self.gamma != 0 and self.encoder is not None


def guidance_shift(x_m: torch.Tensor, m, guidance: GuidanceConfig) -> torch.Tensor:
    """Gradient of the summed log-scores with respect to ``x_m``."""
    with torch.enable_grad():
        x = x_m.detach().requires_grad_(True)
        score = guidance.encoder(x, m)
        (grad,) = torch.autograd.grad(score.sum(), x)
    return grad.detach()


def reverse_step_ddpm(x_m, x0_hat, m: int, sched: NoiseSchedule, guidance: GuidanceConfig | None = None, rng=None):
    """Ancestral step ``x_m -> x_{m-1}`` with x0-parameterisation and optional guidance.

    ``rng`` is a ``torch.Generator`` (or a list of them, one per batch row).
    """
    guidance = guidance or GuidanceConfig()
    if guidance.gamma != 0 and guidance.encoder is None:
        raise MissingEncoder("guidance with gamma != 0 needs an encoder")
    mean, var = posterior_mean_variance(x0_hat, x_m, m, sched)
    if guidance.active:
        mean = mean + guidance.gamma * var * guidance_shift(x_m, m, guidance)
    if m == 1:
        return mean
    return mean + np.sqrt(var) * _standard_normal(x_m, rng)


def _standard_normal(like: torch.Tensor, rng) -> torch.Tensor:
    if isinstance(rng, (list, tuple)):
        return torch.stack(
            [torch.randn(like.shape[1:], generator=g, dtype=like.dtype, device=like.device) for g in rng]
        )
    return torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device)


def reverse_step_ddim(x_m, x0_hat, m: int, m_prev: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) DDIM jump from step ``m`` to ``m_prev``."""
    if not 0 <= m_prev <= m <= sched.M:
        raise BadStepPair(f"need 0 <= m_prev <= m <= M, got m={m}, m_prev={m_prev}")
    if m_prev == m:
        return x_m
    ab, ab_prev = sched.alpha_bar[m], sched.alpha_bar[m_prev]
    eps_hat = (x_m - np.sqrt(ab) * x0_hat) / np.sqrt(1 - ab)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1 - ab_prev) * eps_hat


def ddim_timesteps(M: int, n_steps: int) -> list[int]:
    """Uniform grid over ``[1, M]`` in decreasing order, with 0 appended."""
    n_steps = max(1, min(n_steps, M))
    grid = np.unique(np.round(np.linspace(1, M, n_steps)).astype(int))[::-1]
    return grid.tolist() + [0]
