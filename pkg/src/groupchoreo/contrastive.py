"""Contrastive encoder, negative construction and the InfoNCE objective.

The encoder outputs a raw score ``g(x, w, m)`` and the density ratio is
``f = exp(g)``, so ``log f`` is the raw score and guidance uses its gradient.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, posterior_mean_variance, q_sample
from .errors import InsufficientDonors, ShapeMismatch
from .motion import GroupSequence
from .network import (
    FeedForward,
    GroupGlobalBlock,
    MaskedSelfAttention,
    ModelConfig,
    TimestepEmbedding,
    local_mask,
    sinusoidal_embedding,
)

REPLACE_PROB = 0.5
N_NEGATIVES = 10


class ContrastiveEncoder(nn.Module):
    """Denoiser-shaped transformer without music cross-attention, pooled to one unit.

    The timestep embedding is appended as an extra token that every motion
    token can see; the mean over all tokens feeds a single-unit output layer.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Linear(cfg.pose_dim, cfg.d)
        self.timestep = TimestepEmbedding(cfg.d, cfg.mlp_hidden, cfg.timestep_hidden_layers, cfg.M)
        self.local_attn = nn.ModuleList(MaskedSelfAttention(cfg.d, cfg.n_heads) for _ in range(cfg.L))
        self.local_ff = nn.ModuleList(FeedForward(cfg.d, cfg.ff_size) for _ in range(cfg.L))
        self.group_blocks = nn.ModuleList(GroupGlobalBlock(cfg) for _ in range(cfg.L))
        self.head = nn.Linear(cfg.d, 1)

    def forward(self, x: torch.Tensor, w: torch.Tensor, m) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != self.cfg.pose_dim:
            raise ShapeMismatch(f"expected (B, N, T, {self.cfg.pose_dim}), got {tuple(x.shape)}")
        B, N, T, _ = x.shape
        if w.shape != (B, self.cfg.d):
            raise ShapeMismatch(f"w must be ({B}, {self.cfg.d}), got {tuple(w.shape)}")
        m = torch.as_tensor(m, device=x.device)
        m = m.expand(B) if m.ndim == 0 else m
        pe = sinusoidal_embedding(torch.arange(T, device=x.device), self.cfg.d, x.dtype)
        h = (self.inp(x) + pe).reshape(B, N * T, self.cfg.d)
        h = torch.cat([h, self.timestep(m).unsqueeze(1)], dim=1)
        mask = local_mask(N, T, extra_tokens=1, device=x.device, dtype=x.dtype)
        for attn, ff, group in zip(self.local_attn, self.local_ff, self.group_blocks):
            h = ff(attn(h, mask))
            h = group(h, w, n_motion=N * T)
        return self.head(h.mean(dim=1)).squeeze(-1)


def contrastive_score(x, w, m, encoder: ContrastiveEncoder) -> torch.Tensor:
    """Raw log-density-ratio score, one per batch row."""
    return encoder(x, w, m)


def guidance_gradient(x_m: torch.Tensor, w: torch.Tensor, m, encoder) -> torch.Tensor:
    """``d g(x_m, w, m) / d x_m``, rows independent."""
    with torch.enable_grad():
        x = x_m.detach().requires_grad_(True)
        (grad,) = torch.autograd.grad(encoder(x, w, m).sum(), x)
    return grad


def nce_loss(pos_score: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """``-log(e^{g+} / (e^{g+} + sum_j e^{g_j}))``, averaged over leading dims.

    ``pos_score`` is ``(...)`` and ``neg_scores`` is ``(..., K)``.
    """
    pos_score = torch.as_tensor(pos_score)
    neg_scores = torch.as_tensor(neg_scores, dtype=pos_score.dtype)
    if neg_scores.shape[-1] < 1:
        raise ValueError("need at least one negative")
    logits = torch.cat([pos_score.unsqueeze(-1), neg_scores], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - pos_score).mean()


def sample_replacements(n_slots: int, n_donors: int, replace_prob: float, K: int, rng: np.random.Generator):
    """Which anchor slots are replaced, and by which donor, for ``K`` negatives.

    Returns a boolean ``(K, n_slots)`` mask and an int ``(K, n_slots)`` donor
    index (meaningful where the mask is set). Draws are repeated per negative
    until at least one slot is replaced.
    """
    if n_donors < 1:
        raise InsufficientDonors("negative construction needs dancers from at least one other group")
    if not 0 < replace_prob <= 1:
        raise ValueError("replace_prob must lie in (0, 1]")
    mask = np.zeros((K, n_slots), dtype=bool)
    donor = np.zeros((K, n_slots), dtype=np.int64)
    for k in range(K):
        while True:
            row = rng.random(n_slots) < replace_prob
            if row.any():
                break
        mask[k] = row
        donor[k] = rng.integers(0, n_donors, size=n_slots)
    return mask, donor


def _fit_length(seq: np.ndarray, T: int) -> np.ndarray:
    """Crop from frame 0, or pad by repeating the last frame."""
    if seq.shape[0] >= T:
        return seq[:T]
    return np.concatenate([seq, np.repeat(seq[-1:], T - seq.shape[0], axis=0)])


def construct_negatives(
    batch_groups,
    anchor_index: int,
    replace_prob: float = REPLACE_PROB,
    K: int = N_NEGATIVES,
    rng: np.random.Generator | None = None,
    return_mask: bool = False,
):
    """Mix the anchor group with dancers drawn uniformly from the other groups.

    Returns a ``(K, N, T, 147)`` array (and the ``(K, N)`` replacement mask
    when ``return_mask`` is set).
    """
    rng = rng if rng is not None else np.random.default_rng()
    arrays = [g.data if isinstance(g, GroupSequence) else np.asarray(g) for g in batch_groups]
    if len(arrays) < 2:
        raise InsufficientDonors("batch must contain at least one group besides the anchor")
    anchor = arrays[anchor_index]
    N, T = anchor.shape[:2]
    donors = [d for gi, g in enumerate(arrays) if gi != anchor_index for d in g]
    mask, donor = sample_replacements(N, len(donors), replace_prob, K, rng)
    out = np.repeat(anchor[None], K, axis=0).astype(np.float64)
    for k, i in zip(*np.nonzero(mask)):
        out[k, i] = _fit_length(donors[donor[k, i]], T)
    return (out, mask) if return_mask else out


def negative_batch(
    x0: torch.Tensor, K: int, replace_prob: float, rng: np.random.Generator, n_anchors: int | None = None
) -> torch.Tensor:
    """Negatives for the first ``n_anchors`` groups of a batch ``(B, N, T, D)`` -> ``(A, K, N, T, D)``.

    Donors are all dancers of the other groups in the batch.
    """
    B, N = x0.shape[:2]
    if B < 2:
        raise InsufficientDonors("negative construction needs a batch of at least 2 groups")
    A = B if n_anchors is None else min(n_anchors, B)
    flat = x0.reshape(B * N, *x0.shape[2:])
    out = x0[:A].unsqueeze(1).repeat(1, K, 1, 1, 1)
    for b in range(A):
        pool = np.array([g * N + i for g in range(B) if g != b for i in range(N)])
        mask, donor = sample_replacements(N, len(pool), replace_prob, K, rng)
        ks, slots = np.nonzero(mask)
        if len(ks):
            out[b, torch.as_tensor(ks), torch.as_tensor(slots)] = flat[torch.as_tensor(pool[donor[ks, slots]])]
    return out


def contrastive_training_scores(
    denoiser,
    encoder: ContrastiveEncoder,
    sched: NoiseSchedule,
    anchor: torch.Tensor,
    mixed: torch.Tensor,
    music_tokens: torch.Tensor,
    w: torch.Tensor,
    m: torch.Tensor,
    generator: torch.Generator | None = None,
    anchor_pred: tuple[torch.Tensor, torch.Tensor] | None = None,
    negative_grad: bool = True,
):
    """Scores of the one-step denoised anchor and mixed groups.

    Each group is noised to step ``m``, denoised with the anchor's music and
    group embedding, turned into the posterior mean of step ``m - 1`` and
    scored at that step. ``anchor_pred`` may carry an already computed
    ``(x_m, x0_hat)`` pair for the anchor. With ``negative_grad=False`` the
    denoiser pass over the mixed groups is run without gradient tracking; the
    encoder still receives gradients from both sides.

    Shapes: ``anchor (B, N, T, D)``, ``mixed (B, K, N, T, D)``, ``m (B,)``.
    Returns ``pos (B,)`` and ``neg (B, K)``.
    """
    B, K = mixed.shape[:2]
    if mixed.shape[2:] != anchor.shape[1:]:
        raise ShapeMismatch(f"mixed groups {tuple(mixed.shape)} vs anchor {tuple(anchor.shape)}")
    if anchor_pred is None:
        eps = torch.randn(anchor.shape, generator=generator, dtype=anchor.dtype)
        x_m = q_sample(anchor, m, eps, sched)
        x0_hat = denoiser(x_m, m, music_tokens, w)
    else:
        x_m, x0_hat = anchor_pred
    mu_pos, _ = posterior_mean_variance(x0_hat, x_m, m, sched)

    flat = mixed.reshape(B * K, *mixed.shape[2:])
    m_rep = m.repeat_interleave(K)
    eps_neg = torch.randn(flat.shape, generator=generator, dtype=flat.dtype)
    xj_m = q_sample(flat, m_rep, eps_neg, sched)
    tokens_rep = music_tokens.repeat_interleave(K, dim=0)
    w_rep = w.repeat_interleave(K, dim=0)
    with torch.set_grad_enabled(negative_grad and torch.is_grad_enabled()):
        xj_hat = denoiser(xj_m, m_rep, tokens_rep, w_rep)
    mu_neg, _ = posterior_mean_variance(xj_hat, xj_m, m_rep, sched)

    pos = encoder(mu_pos, w, m - 1)
    neg = encoder(mu_neg, w_rep, m_rep - 1).reshape(B, K)
    return pos, neg
