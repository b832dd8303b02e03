"""Stage-1 spectral compression VAE with a patch discriminator.

The encoder stacks 3x3 stride-1 convolutions, so spatial size is preserved
and only the spectral axis is compressed into a 4-channel latent.  Training
minimizes reconstruction MSE + lambda_kl * KL + lambda_adv * adversarial,
alternating one discriminator step per generator step.  The latent consumed
by the diffusion stage is the posterior mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError, NumericDomainError, TrainingDivergedError
from .nnutil import init_conv_

LATENT_CHANNELS = 4
LOGVAR_RANGE = 10.0
_EPS = 1e-7


@dataclass(frozen=True)
class VaeConfig:
    in_channels: int
    hidden: int = 32
    depth: int = 3
    lambda_kl: float = 1e-4
    lambda_adv: float = 0.1
    lr: float = 1e-4
    epochs: int = 4000
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.in_channels < 4:
            raise ArgumentError("VAE input needs at least 4 channels")
        if self.hidden < 1 or self.depth < 1:
            raise ArgumentError("hidden width and depth must be positive")
        if self.lambda_kl < 0 or self.lambda_adv < 0:
            raise ArgumentError("loss weights must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ArgumentError("epochs, batch_size, and lr must be positive")


@dataclass(frozen=True)
class LatentPosterior:
    """Gaussian posterior over the 4-channel latent; logvar is clamped."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.logvar.shape:
            raise ArgumentError("mu and logvar must share a shape")


def _conv_stack(
    c_in: int, c_out: int, hidden: int, depth: int, gen: torch.Generator, dtype: torch.dtype
) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = c_in
    for _ in range(depth):
        conv = nn.Conv2d(ch, hidden, 3, padding=1, dtype=dtype)
        init_conv_(conv, gen)
        layers += [conv, nn.SiLU()]
        ch = hidden
    head = nn.Conv2d(ch, c_out, 3, padding=1, dtype=dtype)
    init_conv_(head, gen)
    layers.append(head)
    return nn.Sequential(*layers)


class Vae(nn.Module):
    """Encoder to a (mu, logvar) pair and sigmoid-bounded decoder."""

    def __init__(self, config: VaeConfig, seed: int | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed if seed is None else seed)
        c, h = config.in_channels, config.hidden
        # Default layer construction draws from the global RNG before the
        # seeded re-initialization below; fork so callers see no side effect.
        with torch.random.fork_rng(devices=[]):
            self.enc = (
                _conv_stack(c, h, h, config.depth - 1, gen, dtype) if config.depth > 1 else None
            )
            enc_out = h if config.depth > 1 else c
            self.enc_act = nn.SiLU()
            self.mu_head = nn.Conv2d(enc_out, LATENT_CHANNELS, 3, padding=1, dtype=dtype)
            self.logvar_head = nn.Conv2d(enc_out, LATENT_CHANNELS, 3, padding=1, dtype=dtype)
            init_conv_(self.mu_head, gen)
            init_conv_(self.logvar_head, gen)
            self.dec = _conv_stack(LATENT_CHANNELS, c, h, config.depth, gen, dtype)

    def encode(self, patch: torch.Tensor) -> LatentPosterior:
        """(B, C, S, S) → posterior with 4-channel mu/logvar, same spatial size."""
        h = patch if self.enc is None else self.enc_act(self.enc(patch))
        mu = self.mu_head(h)
        logvar = self.logvar_head(h).clamp(-LOGVAR_RANGE, LOGVAR_RANGE)
        return LatentPosterior(mu=mu, logvar=logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, 4, S, S) → (B, C, S, S) with values in [0, 1]."""
        return torch.sigmoid(self.dec(z))

    def forward(self, patch: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, LatentPosterior]:
        post = self.encode(patch)
        z = reparameterize(post, eps)
        return self.decode(z), post


class PatchDiscriminator(nn.Module):
    """3-layer spatially-preserving critic; spatial mean of logits → sigmoid."""

    def __init__(self, in_channels: int, hidden: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            self.c1 = nn.Conv2d(in_channels, hidden, 3, padding=1, dtype=dtype)
            self.c2 = nn.Conv2d(hidden, hidden, 3, padding=1, dtype=dtype)
            self.c3 = nn.Conv2d(hidden, 1, 3, padding=1, dtype=dtype)
            for conv in (self.c1, self.c2, self.c3):
                init_conv_(conv, gen)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        h = self.act(self.c1(patch))
        h = self.act(self.c2(h))
        logits = self.c3(h).mean(dim=(1, 2, 3))
        return torch.sigmoid(logits)


def reparameterize(post: LatentPosterior, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    if eps.shape != post.mu.shape:
        raise ArgumentError("eps must match the posterior shape")
    return post.mu + torch.exp(0.5 * post.logvar) * eps


def kl_divergence(post: LatentPosterior) -> torch.Tensor:
    """Mean over latent elements of the closed-form KL against N(0, I)."""
    return 0.5 * (post.mu.square() + post.logvar.exp() - 1.0 - post.logvar).mean()


def vae_loss(
    patch: torch.Tensor,
    recon: torch.Tensor,
    post: LatentPosterior,
    disc_score_fake: torch.Tensor | None,
    lambda_kl: float,
    lambda_adv: float,
) -> torch.Tensor:
    """Reconstruction MSE + weighted KL + non-saturating generator term."""
    loss = (patch - recon).square().mean() + lambda_kl * kl_divergence(post)
    if lambda_adv > 0:
        if disc_score_fake is None:
            raise ArgumentError("adversarial weight set but no discriminator score given")
        loss = loss + lambda_adv * (-torch.log(disc_score_fake.clamp(min=_EPS))).mean()
    return loss


def discriminator_loss(score_real: torch.Tensor, score_fake: torch.Tensor) -> torch.Tensor:
    """-log(score_real) - log(1 - score_fake), log arguments clamped at 1e-7."""
    for s in (score_real, score_fake):
        vals = torch.as_tensor(s)
        if bool((vals < 0).any()) or bool((vals > 1).any()):
            raise NumericDomainError("discriminator scores must lie in [0, 1]")
    real = torch.as_tensor(score_real).clamp(_EPS, 1.0 - _EPS)
    fake = torch.as_tensor(score_fake).clamp(_EPS, 1.0 - _EPS)
    return (-torch.log(real) - torch.log(1.0 - fake)).mean()


@dataclass
class VaeTrainResult:
    vae: Vae
    discriminator: PatchDiscriminator
    history: list[dict[str, float]] = field(default_factory=list)


def train_vae(patches: np.ndarray, config: VaeConfig) -> VaeTrainResult:
    """Alternating generator/discriminator optimization over all patches.

    patches: (N, C, S, S) float32 in [0, 1] — every cropped position of the
    cube, labeled or not.  Deterministic in config.seed.
    """
    if patches.ndim != 4 or patches.shape[0] == 0:
        raise ArgumentError("patches must be a nonempty (N, C, S, S) array")
    if patches.shape[1] != config.in_channels:
        raise ArgumentError(
            f"patches have {patches.shape[1]} channels, config says {config.in_channels}"
        )
    vae = Vae(config)
    disc = PatchDiscriminator(config.in_channels, config.hidden, seed=config.seed + 1)
    opt_g = torch.optim.Adam(vae.parameters(), lr=config.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    data = torch.as_tensor(patches, dtype=torch.float32)
    n = data.shape[0]
    history: list[dict[str, float]] = []
    adversarial = config.lambda_adv > 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"recon": 0.0, "kl": 0.0, "disc": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = data[idx]
            eps = torch.as_tensor(
                rng.standard_normal((len(idx), LATENT_CHANNELS) + batch.shape[2:]),
                dtype=torch.float32,
            )
            if adversarial:
                with torch.no_grad():
                    fake, _ = vae(batch, eps)
                d_loss = discriminator_loss(disc(batch), disc(fake))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            recon, post = vae(batch, eps)
            score_fake = disc(recon) if adversarial else None
            g_loss = vae_loss(batch, recon, post, score_fake, config.lambda_kl, config.lambda_adv)
            if not torch.isfinite(g_loss):
                raise TrainingDivergedError(f"VAE loss became non-finite at epoch {epoch}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            with torch.no_grad():
                sums["recon"] += float((batch - recon).square().mean())
                sums["kl"] += float(kl_divergence(post))
                sums["disc"] += float(d_loss) if adversarial else 0.0
            batches += 1
        history.append(
            {
                "epoch": float(epoch + 1),
                "recon_mse": sums["recon"] / batches,
                "kl": sums["kl"] / batches,
                "disc": sums["disc"] / batches,
            }
        )
    return VaeTrainResult(vae=vae, discriminator=disc, history=history)


def encode_mean(vae: Vae, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Posterior means for an (N, C, S, S) stack — the latents used downstream."""
    out = []
    with torch.no_grad():
        for start in range(0, patches.shape[0], batch_size):
            batch = torch.as_tensor(patches[start : start + batch_size], dtype=torch.float32)
            out.append(vae.encode(batch).mu.numpy())
    return np.concatenate(out, axis=0)
