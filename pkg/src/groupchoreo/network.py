"""Group diffusion denoising network.

The denoiser predicts the clean group motion ``x0`` from a noised group
``x_m``, the diffusion step and the music. Each of the ``L`` blocks first
lets every dancer attend only to their own frames and to the music
(local-masked self-attention, cross-attention, FiLM), then lets all dancers
attend to each other (global self-attention) before Group Modulation
re-standardises every channel over the whole group and applies an affine
transform predicted from the group embedding ``w``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadStep, ShapeMismatch, TooManyDancers
from .motion import POSE_DIM


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    L: int = 2
    ff_size: int = 128
    music_encoder_layers: int = 1
    N_max: int = 5
    D_a: int = 32
    pose_dim: int = POSE_DIM
    M: int = 100
    mlp_hidden: int = 64
    mapping_layers: int = 8
    timestep_hidden_layers: int = 3
    use_group_attention: bool = True

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.N_max < 1:
            raise ValueError("N_max must be >= 1")
        if self.d % 2:
            raise ValueError("d must be even for sinusoidal embeddings")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        base = cls(d=512, n_heads=8, L=5, ff_size=1024, music_encoder_layers=2, mlp_hidden=512, M=1000)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard transformer sinusoid table, ``(..., dim)`` for integer or real positions."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(dtype)


def local_mask(n_dancers: int, n_frames: int, extra_tokens: int = 0, device=None, dtype=torch.float32) -> torch.Tensor:
    """Additive mask that confines each dancer to their own frames.

    ``extra_tokens`` appended after the motion tokens are visible to, and see,
    every position.
    """
    owner = torch.arange(n_dancers * n_frames, device=device) // n_frames
    owner = torch.cat([owner, torch.full((extra_tokens,), -1, device=device)])
    same = (owner[:, None] == owner[None, :]) | (owner[:, None] < 0) | (owner[None, :] < 0)
    mask = torch.zeros(same.shape, dtype=dtype, device=device)
    return mask.masked_fill(~same, float("-inf"))


def global_mask(n_dancers: int, n_frames: int, extra_tokens: int = 0, device=None, dtype=torch.float32) -> torch.Tensor:
    size = n_dancers * n_frames + extra_tokens
    return torch.zeros(size, size, dtype=dtype, device=device)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_hidden: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * n_hidden + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class TimestepEmbedding(nn.Module):
    def __init__(self, d: int, hidden: int, n_hidden: int, M: int):
        super().__init__()
        self.d, self.M = d, M
        self.mlp = MLP(d, hidden, d, n_hidden)

    def pre_embedding(self, m: torch.Tensor) -> torch.Tensor:
        return sinusoidal_embedding(m, self.d, dtype=self.mlp.layers[0].weight.dtype)

    def forward(self, m) -> torch.Tensor:
        m = torch.as_tensor(m, device=self.mlp.layers[0].weight.device)
        if m.numel() and (m.min() < 0 or m.max() > self.M):
            raise BadStep(f"timestep must lie in [0, {self.M}]")
        return self.mlp(self.pre_embedding(m))


class MultiHeadAttention(nn.Module):
    """``softmax(Q K^T / sqrt(d_k) + mask) V`` over ``n_heads`` heads."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.d, self.n_heads, self.d_k = d, n_heads, d // n_heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)

    def _heads(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_k).transpose(1, 2)

    def attend(self, query, context, mask=None) -> torch.Tensor:
        """Concatenated head outputs before the output projection."""
        q, k, v = self._heads(self.w_q(query)), self._heads(self.w_k(context)), self._heads(self.w_v(context))
        if mask is not None and mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise ShapeMismatch(f"mask {tuple(mask.shape)} vs attention {(q.shape[-2], k.shape[-2])}")
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        B, _, Lq, _ = out.shape
        return out.transpose(1, 2).reshape(B, Lq, self.d)

    def forward(self, query, context, mask=None):
        return self.out(self.attend(query, context, mask))


class MaskedSelfAttention(nn.Module):
    """Self-attention with an additive mask, then residual and layer norm."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm = nn.LayerNorm(d)

    def forward(self, x, mask=None):
        if x.shape[-1] != self.attn.d:
            raise ShapeMismatch(f"expected width {self.attn.d}, got {x.shape[-1]}")
        return self.norm(x + self.attn(x, x, mask))


class FeedForward(nn.Module):
    def __init__(self, d: int, ff_size: int):
        super().__init__()
        self.lin1, self.lin2 = nn.Linear(d, ff_size), nn.Linear(ff_size, d)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        return self.norm(x + self.lin2(F.gelu(self.lin1(x))))


class FiLM(nn.Module):
    """Feature-wise ``x * (1 + scale) + shift`` from a conditioning vector; identity at init."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, cond):
        scale, shift = self.proj(cond).unsqueeze(1).chunk(2, dim=-1)
        return x * (1 + scale) + shift


class CrossAttention(nn.Module):
    """Motion queries attend to the conditioning context; FiLM, residual, norm, feed-forward."""

    def __init__(self, d: int, n_heads: int, ff_size: int):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads)
        self.film = FiLM(d)
        self.norm = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff_size)

    def forward(self, x, context):
        if context.shape[-1] != x.shape[-1]:
            raise ShapeMismatch(f"context width {context.shape[-1]} vs motion width {x.shape[-1]}")
        h = self.film(self.attn(x, context), context.mean(dim=1))
        return self.ff(self.norm(x + h))


class GroupModulation(nn.Module):
    """Standardise each channel over the whole group sequence, then ``S(w) * h + b(w)``."""

    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Linear(d, d)
        self.bias = nn.Linear(d, d)
        nn.init.normal_(self.scale.weight, std=0.02)
        nn.init.ones_(self.scale.bias)
        nn.init.normal_(self.bias.weight, std=0.02)
        nn.init.zeros_(self.bias.bias)

    def modulate(self, h, S, b):
        mu = h.mean(dim=1, keepdim=True)
        var = h.var(dim=1, unbiased=False, keepdim=True)
        return S.unsqueeze(1) * (h - mu) / torch.sqrt(var + self.eps) + b.unsqueeze(1)

    def forward(self, h, w):
        return self.modulate(h, self.scale(w), self.bias(w))


class MusicEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.D_a, cfg.d)
        self.layers = nn.ModuleList(
            nn.ModuleDict({"attn": MaskedSelfAttention(cfg.d, cfg.n_heads), "ff": FeedForward(cfg.d, cfg.ff_size)})
            for _ in range(cfg.music_encoder_layers)
        )
        self.out = nn.Linear(cfg.d, cfg.d)
        self.D_a = cfg.D_a

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        """``(B, T, D_a)`` features to ``(B, T, d)`` tokens."""
        if audio.shape[-1] != self.D_a:
            raise ShapeMismatch(f"audio width {audio.shape[-1]} vs configured D_a={self.D_a}")
        T = audio.shape[1]
        h = self.inp(audio) + sinusoidal_embedding(torch.arange(T, device=audio.device), self.out.in_features, audio.dtype)
        for layer in self.layers:
            h = layer["ff"](layer["attn"](h))
        return self.out(h)


class GroupEmbedding(nn.Module):
    """``w = MLP(z + mean_t c_t) + E[n - 1]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mapping = MLP(cfg.d, cfg.mlp_hidden, cfg.d, cfg.mapping_layers - 1)
        self.table = nn.Parameter(torch.randn(cfg.N_max, cfg.d) * 0.02)

    def forward(self, music_tokens: torch.Tensor, n_dancers: int, z: torch.Tensor) -> torch.Tensor:
        if not 1 <= n_dancers <= self.table.shape[0]:
            raise TooManyDancers(f"n_dancers={n_dancers} outside [1, {self.table.shape[0]}]")
        pooled = music_tokens.mean(dim=1)
        return self.mapping(z + pooled) + self.table[n_dancers - 1]


class MusicMotionBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MaskedSelfAttention(cfg.d, cfg.n_heads)
        self.cross = CrossAttention(cfg.d, cfg.n_heads, cfg.ff_size)

    def forward(self, x, context, mask):
        return self.cross(self.self_attn(x, mask), context)


class GroupGlobalBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MaskedSelfAttention(cfg.d, cfg.n_heads)
        self.modulation = GroupModulation(cfg.d)
        self.ff = FeedForward(cfg.d, cfg.ff_size)

    def forward(self, x, w, mask=None, n_motion: int | None = None):
        h = self.self_attn(x, mask)
        if n_motion is not None and n_motion < h.shape[1]:
            # extra tokens are not dancers; they are left out of the group statistics
            h = torch.cat([self.modulation(h[:, :n_motion], w), h[:, n_motion:]], dim=1)
        else:
            h = self.modulation(h, w)
        return self.ff(h)


class DenoiserNet(nn.Module):
    """Predicts ``x0`` for a batch of groups ``(B, N, T, pose_dim)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.music = MusicEncoder(cfg)
        self.timestep = TimestepEmbedding(cfg.d, cfg.mlp_hidden, cfg.timestep_hidden_layers, cfg.M)
        self.group_embedding = GroupEmbedding(cfg)
        self.inp = nn.Linear(cfg.pose_dim, cfg.d)
        self.motion_blocks = nn.ModuleList(MusicMotionBlock(cfg) for _ in range(cfg.L))
        self.group_blocks = nn.ModuleList(GroupGlobalBlock(cfg) for _ in range(cfg.L)) if cfg.use_group_attention else None
        self.out = nn.Linear(cfg.d, cfg.pose_dim)

    def encode_music(self, audio: torch.Tensor) -> torch.Tensor:
        return self.music(audio)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Input projection plus frame positional encoding shared by all dancers."""
        B, N, T, _ = x.shape
        pe = sinusoidal_embedding(torch.arange(T, device=x.device), self.cfg.d, x.dtype)
        return (self.inp(x) + pe).reshape(B, N * T, self.cfg.d)

    def forward(self, x_m: torch.Tensor, m, music_tokens: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if x_m.ndim != 4 or x_m.shape[-1] != self.cfg.pose_dim:
            raise ShapeMismatch(f"expected (B, N, T, {self.cfg.pose_dim}), got {tuple(x_m.shape)}")
        B, N, T, _ = x_m.shape
        if music_tokens.shape[:2] != (B, T):
            raise ShapeMismatch(f"music tokens {tuple(music_tokens.shape)} vs motion (B={B}, T={T})")
        m = torch.as_tensor(m, device=x_m.device)
        m = m.expand(B) if m.ndim == 0 else m
        tau = self.timestep(m)
        context = torch.cat([music_tokens, tau.unsqueeze(1)], dim=1)
        # the local mask is block-diagonal over dancers, so each dancer runs as its own sequence
        dancer_context = context.repeat_interleave(N, dim=0)
        h = self.embed(x_m)
        for i, block in enumerate(self.motion_blocks):
            h = block(h.reshape(B * N, T, -1), dancer_context, None).reshape(B, N * T, -1)
            if self.group_blocks is not None:
                h = self.group_blocks[i](h, w)
        return self.out(h).reshape(B, N, T, self.cfg.pose_dim)

    def denoise(self, x_m, m, audio, z):
        """Full prediction from raw audio features and a noise draw ``z``."""
        tokens = self.encode_music(audio)
        w = self.group_embedding(tokens, x_m.shape[1], z)
        return self(x_m, m, tokens, w)
