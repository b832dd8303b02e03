"""Shared neural-net plumbing: seeded initialization, sinusoidal tables, attention.

Initialization never touches torch's global RNG; every draw goes through an
explicit torch.Generator so checkpoints are reproducible regardless of what
the host process did before.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError


def uniform_init_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    """Fill with a symmetric uniform draw scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        raw = torch.rand(tensor.shape, generator=gen, dtype=torch.float64)
        tensor.copy_(((raw * 2.0 - 1.0) * bound).to(tensor.dtype))


def init_linear_(layer: nn.Linear, gen: torch.Generator) -> None:
    uniform_init_(layer.weight, layer.in_features, gen)
    if layer.bias is not None:
        with torch.no_grad():
            layer.bias.zero_()


def zero_init_(layer: nn.Linear) -> None:
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()


def init_conv_(layer: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    uniform_init_(layer.weight, fan_in, gen)
    if layer.bias is not None:
        with torch.no_grad():
            layer.bias.zero_()


def sinusoid_table(positions: np.ndarray, dim: int) -> torch.Tensor:
    """Classic fixed encoding: interleaved sin/cos of geometrically spaced
    frequencies, one row per position.  Returns float64; callers cast."""
    if dim < 2 or dim % 2 != 0:
        raise ArgumentError(f"sinusoid dimension must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return torch.from_numpy(table)


def grid_sinusoid_table(side: int, dim: int) -> torch.Tensor:
    """2-D positional table for an S x S grid flattened row-major to S*S tokens.

    The first half of the channels encodes the row index, the second half the
    column index."""
    if dim % 4 != 0:
        raise ArgumentError(f"2-D sinusoid needs dim divisible by 4, got {dim}")
    rows, cols = np.mgrid[0:side, 0:side]
    row_tab = sinusoid_table(rows.reshape(-1), dim // 2)
    col_tab = sinusoid_table(cols.reshape(-1), dim // 2)
    return torch.cat([row_tab, col_tab], dim=1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate Q and KV inputs.

    scale defaults to the standard 1/sqrt(d_head); passing an explicit value
    overrides it (the cross-attention convention here divides by sqrt(d_emb)).
    Returns both the projected output and the per-head weight tensor.
    """

    def __init__(
        self,
        d_emb: int,
        heads: int,
        gen: torch.Generator,
        scale: float | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if d_emb % heads != 0:
            raise ArgumentError(f"d_emb {d_emb} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_emb // heads
        self.scale = scale if scale is not None else 1.0 / math.sqrt(self.d_head)
        self.w_q = nn.Linear(d_emb, d_emb, dtype=dtype)
        self.w_k = nn.Linear(d_emb, d_emb, dtype=dtype)
        self.w_v = nn.Linear(d_emb, d_emb, dtype=dtype)
        self.w_o = nn.Linear(d_emb, d_emb, dtype=dtype)
        for layer in (self.w_q, self.w_k, self.w_v, self.w_o):
            init_linear_(layer, gen)

    def forward(
        self,
        q_in: torch.Tensor,
        kv_in: torch.Tensor,
        key_lengths: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, lq, d = q_in.shape
        lk = kv_in.shape[1]
        h = self.heads

        def split(x: torch.Tensor, length: int) -> torch.Tensor:
            return x.view(b, length, h, self.d_head).transpose(1, 2)

        q = split(self.w_q(q_in), lq)
        k = split(self.w_k(kv_in), lk)
        v = split(self.w_v(kv_in), lk)
        logits = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if key_lengths is not None:
            # Mask out key positions at or beyond each sample's real length.
            pos = torch.arange(lk, device=q_in.device)
            blocked = pos[None, :] >= key_lengths[:, None]
            logits = logits.masked_fill(blocked[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = torch.matmul(weights, v).transpose(1, 2).reshape(b, lq, d)
        return self.w_o(out), weights


class FeedForward(nn.Module):
    """Two-layer MLP with GELU, hidden width expansion x4."""

    def __init__(self, d_emb: int, gen: torch.Generator, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.fc1 = nn.Linear(d_emb, 4 * d_emb, dtype=dtype)
        self.fc2 = nn.Linear(4 * d_emb, d_emb, dtype=dtype)
        init_linear_(self.fc1, gen)
        init_linear_(self.fc2, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def flat_parameters(module: nn.Module) -> torch.Tensor:
    """Concatenated detached copy of all parameters, in registration order."""
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def load_flat_parameters(module: nn.Module, flat: torch.Tensor) -> None:
    need = sum(p.numel() for p in module.parameters())
    if flat.numel() != need:
        raise ArgumentError(f"flat vector has {flat.numel()} entries, model needs {need}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].view_as(p))
            offset += n
