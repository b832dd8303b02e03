"""Parameter-free latent diversity: batch-statistics perturbation (LF-UE) and
random star-polygon spatial clipping (RPSC) with its area ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError

_SIGMA_GUARD = 1e-6


@dataclass(frozen=True)
class BatchStats:
    """Spatial mean/std per sample-channel plus their batch-level stds."""

    mu: torch.Tensor         # (B, C)
    sigma: torch.Tensor      # (B, C), standard deviation (not variance)
    sigma_mu: torch.Tensor   # (C,) population std of mu over the batch
    sigma_sigma: torch.Tensor  # (C,) population std of sigma over the batch


def batch_stats(batch: torch.Tensor) -> BatchStats:
    if batch.ndim != 4:
        raise ArgumentError(f"batch must be (B, C, S, S), got {tuple(batch.shape)}")
    if batch.shape[0] < 2:
        raise ArgumentError("batch statistics need at least 2 samples")
    mu = batch.mean(dim=(2, 3))
    sigma = (batch - mu[:, :, None, None]).square().mean(dim=(2, 3)).sqrt()
    sigma_mu = (mu - mu.mean(dim=0)).square().mean(dim=0).sqrt()
    sigma_sigma = (sigma - sigma.mean(dim=0)).square().mean(dim=0).sqrt()
    return BatchStats(mu=mu, sigma=sigma, sigma_mu=sigma_mu, sigma_sigma=sigma_sigma)


def lfue(batch: torch.Tensor, eps_mu: torch.Tensor, eps_sigma: torch.Tensor) -> torch.Tensor:
    """Resample each latent's per-channel mean and spread from batch statistics.

    phi = mu + eps_mu * Sigma_mu and psi = sigma + eps_sigma * Sigma_sigma
    replace the sample's own statistics; the normalized spatial pattern
    (z - mu) / max(sigma, 1e-6) is preserved exactly.  Zero noise is an
    identity.
    """
    stats = batch_stats(batch)
    if eps_mu.shape != stats.mu.shape or eps_sigma.shape != stats.mu.shape:
        raise ArgumentError("perturbation noise must have shape (B, C)")
    phi = stats.mu + eps_mu * stats.sigma_mu[None, :]
    psi = stats.sigma + eps_sigma * stats.sigma_sigma[None, :]
    denom = stats.sigma.clamp(min=_SIGMA_GUARD)
    unit = (batch - stats.mu[:, :, None, None]) / denom[:, :, None, None]
    return phi[:, :, None, None] + psi[:, :, None, None] * unit


@dataclass(frozen=True)
class PolygonMask:
    """Binary raster holding the filled interior of one simple polygon."""

    mask: np.ndarray
    area_ratio: float

    def __post_init__(self) -> None:
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ArgumentError("mask entries must be 0/1")
        if abs(self.area_ratio - float(self.mask.mean())) > 1e-12:
            raise ArgumentError("area_ratio inconsistent with mask")


def random_polygon_mask(side: int, vertices: int, rng: np.random.Generator) -> PolygonMask:
    """Star polygon: k vertices at uniform angles (random base rotation) around
    a random center, radii drawn from [side/4, side/2]; pixels whose integer
    centers fall inside are set.  Deterministic in the generator state.
    """
    if side < 2:
        raise ArgumentError("mask side must be >= 2")
    if not (3 <= vertices <= 8):
        raise ArgumentError(f"vertex count must lie in 3..8, got {vertices}")
    center = rng.uniform(0.0, side - 1.0, size=2)  # (row, col)
    radii = rng.uniform(side / 4.0, side / 2.0, size=vertices)
    base = rng.uniform(0.0, 2.0 * math.pi)
    angles = base + 2.0 * math.pi * np.arange(vertices) / vertices
    poly_r = center[0] + radii * np.sin(angles)
    poly_c = center[1] + radii * np.cos(angles)

    rows, cols = np.mgrid[0:side, 0:side]
    inside = np.zeros((side, side), dtype=bool)
    # Even-odd rule: cast a horizontal ray per scanline of pixel centers.
    for i in range(vertices):
        j = (i + 1) % vertices
        r_i, r_j = poly_r[i], poly_r[j]
        crosses = (r_i > rows) != (r_j > rows)
        with np.errstate(divide="ignore", invalid="ignore"):
            col_at = poly_c[i] + (rows - r_i) * (poly_c[j] - poly_c[i]) / (r_j - r_i)
        inside ^= crosses & (cols < col_at)
    mask = inside.astype(np.uint8)
    return PolygonMask(mask=mask, area_ratio=float(mask.mean()))


def rpsc_mix(
    z_a: torch.Tensor, z_b: torch.Tensor, mask: PolygonMask
) -> tuple[torch.Tensor, float]:
    """Pixelwise partition of two latents: mask picks z_a, complement picks z_b."""
    if z_a.shape != z_b.shape:
        raise ArgumentError("latents must share a shape")
    if tuple(z_a.shape[-2:]) != mask.mask.shape:
        raise ArgumentError(
            f"mask {mask.mask.shape} does not cover latent spatial dims {tuple(z_a.shape[-2:])}"
        )
    m = torch.as_tensor(mask.mask, dtype=z_a.dtype, device=z_a.device)
    return m * z_a + (1.0 - m) * z_b, mask.area_ratio
