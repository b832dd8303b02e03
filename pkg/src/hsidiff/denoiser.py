"""Conditional noise-prediction network over 4-channel latent patches.

The latent is flattened to S*S tokens of width 4, embedded, and pushed
through a stack of pre-norm transformer blocks.  Each block applies a
time-conditioned scale/shift before its self-attention, cross-attention,
and MLP sub-layers; cross-attention attends over all 77 caption token
rows and its weights are surfaced as AttentionMap objects for export.
The final projection back to 4 channels is zero-initialized so the fresh
network predicts (approximately) zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError
from .nnutil import (
    FeedForward,
    MultiHeadAttention,
    grid_sinusoid_table,
    init_linear_,
    sinusoid_table,
    zero_init_,
)

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class AttentionMap:
    """Cross-attention weights for one block: (heads, S*S, 77), rows sum to 1."""

    weights: torch.Tensor

    def __post_init__(self) -> None:
        if self.weights.ndim not in (3, 4):
            raise ArgumentError("attention weights must be (heads, L, 77) or batched")

    def head_average(self) -> torch.Tensor:
        w = self.weights
        if w.ndim == 4:  # batched: average the batch out as well
            w = w.mean(dim=0)
        return w.mean(dim=0)


@dataclass(frozen=True)
class DenoiserConfig:
    d_emb: int = 64
    blocks: int = 4
    heads: int = 8
    patch_side: int = 9
    total_steps: int = 500

    def __post_init__(self) -> None:
        if self.d_emb % 4 != 0:
            raise ArgumentError("d_emb must be divisible by 4 (2-D positional table)")
        if self.d_emb % self.heads != 0:
            raise ArgumentError("d_emb must be divisible by heads")
        if self.blocks < 1 or self.patch_side < 1 or self.total_steps < 1:
            raise ArgumentError("blocks, patch_side, and total_steps must be positive")


class TimeModulation(nn.Module):
    """Eq.-style scale/shift: (alpha, beta) = chunk(Linear(SiLU(t_emb)))."""

    def __init__(self, d_emb: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.proj = nn.Linear(d_emb, 2 * d_emb, dtype=dtype)
        init_linear_(self.proj, gen)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(torch.nn.functional.silu(t_emb)).chunk(2, dim=-1)
        return x * scale[:, None, :] + shift[:, None, :]


class DiffusionBlock(nn.Module):
    """One TDB: modulated self-attention, cross-attention, and MLP residuals."""

    def __init__(self, d_emb: int, heads: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_emb, dtype=dtype)
        self.mod1 = TimeModulation(d_emb, gen, dtype)
        self.self_attn = MultiHeadAttention(d_emb, heads, gen, dtype=dtype)
        self.ln2 = nn.LayerNorm(d_emb, dtype=dtype)
        self.mod2 = TimeModulation(d_emb, gen, dtype)
        # Cross-attention divides logits by sqrt(d_emb), not sqrt(d_head).
        self.cross_attn = MultiHeadAttention(
            d_emb, heads, gen, scale=1.0 / math.sqrt(d_emb), dtype=dtype
        )
        self.ln3 = nn.LayerNorm(d_emb, dtype=dtype)
        self.mod3 = TimeModulation(d_emb, gen, dtype)
        self.mlp = FeedForward(d_emb, gen, dtype=dtype)

    def forward(
        self, x: torch.Tensor, t_emb: torch.Tensor, ctx: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.mod1(self.ln1(x), t_emb)
        x = x + self.self_attn(h, h)[0]
        h = self.mod2(self.ln2(x), t_emb)
        fused, weights = self.cross_attn(h, ctx)
        x = x + fused
        x = x + self.mlp(self.mod3(self.ln3(x), t_emb))
        return x, weights


class Denoiser(nn.Module):
    """eps_theta(z_t, t, c) for 4 x S x S latents conditioned on caption rows."""

    def __init__(self, config: DenoiserConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d = config.d_emb
        # Default layer construction draws from the global RNG before the
        # seeded re-initialization below; fork so callers see no side effect.
        with torch.random.fork_rng(devices=[]):
            self.in_proj = nn.Linear(LATENT_CHANNELS, d, dtype=dtype)
            init_linear_(self.in_proj, gen)
            self.register_buffer(
                "pos", grid_sinusoid_table(config.patch_side, d).to(dtype), persistent=False
            )
            self.time_fc1 = nn.Linear(d, d, dtype=dtype)
            self.time_fc2 = nn.Linear(d, d, dtype=dtype)
            init_linear_(self.time_fc1, gen)
            init_linear_(self.time_fc2, gen)
            self.blocks = nn.ModuleList(
                [DiffusionBlock(d, config.heads, gen, dtype) for _ in range(config.blocks)]
            )
            self.out_proj = nn.Linear(d, LATENT_CHANNELS, dtype=dtype)
            zero_init_(self.out_proj)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        """(B,) integer steps → (B, d_emb) embeddings through the time MLP."""
        bad = (t < 1) | (t > self.config.total_steps)
        if bool(bad.any()):
            raise ArgumentError(
                f"timestep outside 1..{self.config.total_steps}: {t[bad][:4].tolist()}"
            )
        table = sinusoid_table(t.detach().cpu().numpy(), self.config.d_emb).to(self.dtype)
        return self.time_fc2(torch.nn.functional.silu(self.time_fc1(table)))

    def forward(
        self, z_t: torch.Tensor, t: int | torch.Tensor, ctx: torch.Tensor
    ) -> tuple[torch.Tensor, list[AttentionMap]]:
        """z_t (B, 4, S, S), t scalar or (B,), ctx (B, 77, d_emb) or (77, d_emb)."""
        if z_t.ndim != 4 or z_t.shape[1] != LATENT_CHANNELS:
            raise ArgumentError(f"latent must be (B, 4, S, S), got {tuple(z_t.shape)}")
        b = z_t.shape[0]
        side = z_t.shape[2]
        if side != self.config.patch_side or z_t.shape[3] != side:
            raise ArgumentError(
                f"latent side {z_t.shape[2:]} does not match configured {self.config.patch_side}"
            )
        if isinstance(t, int):
            t = torch.full((b,), t, dtype=torch.int64)
        if ctx.ndim == 2:
            ctx = ctx[None, :, :].expand(b, -1, -1)
        t_emb = self.embed_time(t)
        x = z_t.reshape(b, LATENT_CHANNELS, side * side).transpose(1, 2)
        x = self.in_proj(x) + self.pos[None, :, :]
        maps: list[AttentionMap] = []
        for block in self.blocks:
            x, weights = block(x, t_emb, ctx)
            maps.append(AttentionMap(weights=weights))
        eps = self.out_proj(x).transpose(1, 2).reshape(b, LATENT_CHANNELS, side, side)
        return eps, maps
