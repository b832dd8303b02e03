"""Forward-noising schedule and reverse-step kernels.

All schedule tables are float64.  The step functions are generic over numpy
arrays and torch tensors: coefficients are Python floats applied elementwise,
so dtype and device follow the input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ArgumentError, NumericDomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached alpha and cumulative-product tables.

    Tables are indexed 0..T-1 for steps t = 1..T; alpha_bar_at(0) == 1 by
    convention so step t=1 denoises all the way to the data estimate.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.beta.shape[0])

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not (1 <= t <= self.steps):
            raise ArgumentError(f"timestep {t} outside 1..{self.steps}")


def make_linear_schedule(
    steps: int = 500, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    """Evenly spaced betas from beta_min to beta_max inclusive."""
    if steps < 1:
        raise ArgumentError("schedule needs at least one step")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ArgumentError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def schedule_to_csv(sched: NoiseSchedule, path: str | Path) -> None:
    """Dump the schedule as rows (t, beta, alpha, alpha_bar), t starting at 1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha", "alpha_bar"])
        for i in range(sched.steps):
            writer.writerow(
                [i + 1, repr(float(sched.beta[i])), repr(float(sched.alpha[i])),
                 repr(float(sched.alpha_bar[i]))]
            )


def _as_coeff(x, like):
    """Scalar or per-sample coefficient vector shaped to broadcast over like."""
    if np.isscalar(x):
        return x
    arr = np.asarray(x, dtype=np.float64).reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    return arr.astype(like.dtype, copy=False)


def q_sample(z0, t: int | Sequence[int], eps, sched: NoiseSchedule):
    """Forward-noise z0 to step t: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    t may be a single step or one step per leading-dim sample.
    """
    if z0.shape != eps.shape:
        raise ArgumentError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    if np.isscalar(t) or isinstance(t, (int, np.integer)):
        ab = sched.alpha_bar_at(int(t))
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    ts = np.asarray(t, dtype=np.int64)
    if ts.ndim != 1 or ts.shape[0] != z0.shape[0]:
        raise ArgumentError("per-sample t must be a vector matching the batch dimension")
    ab = np.array([sched.alpha_bar_at(int(v)) for v in ts])
    return _as_coeff(np.sqrt(ab), z0) * z0 + _as_coeff(np.sqrt(1.0 - ab), z0) * eps


def _noise_like(x, rng: np.random.Generator):
    draw = rng.standard_normal(tuple(x.shape))
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(draw, dtype=x.dtype, device=x.device)
    return draw.astype(x.dtype, copy=False)


def ddpm_posterior_step(zt, t: int, eps_hat, sched: NoiseSchedule, rng: np.random.Generator | None = None):
    """One ancestral reverse step from t to t-1.

    Mean is (zt - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t); the
    posterior variance is (1 - abar_{t-1}) / (1 - abar_t) * beta_t.  At t == 1,
    or when rng is None, the mean is returned without noise.
    """
    if zt.shape != eps_hat.shape:
        raise ArgumentError("zt and eps_hat must share a shape")
    sched._check_t(t)
    beta_t = sched.beta_at(t)
    alpha_t = sched.alpha_at(t)
    ab_t = sched.alpha_bar_at(t)
    mean = (zt - (beta_t / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha_t)
    if t == 1 or rng is None:
        return mean
    var = (1.0 - sched.alpha_bar_at(t - 1)) / (1.0 - ab_t) * beta_t
    return mean + math.sqrt(var) * _noise_like(zt, rng)


def ddim_step(
    zt,
    t: int,
    t_prev: int,
    eps_bar,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Deterministic-by-default reverse jump from step t to t_prev.

    Reconstructs x0_hat = (zt - sqrt(1 - abar_t) * eps_bar) / sqrt(abar_t),
    then re-noises to t_prev with stochasticity eta in [0, 1].  t_prev == 0
    returns x0_hat with no injected noise.
    """
    if zt.shape != eps_bar.shape:
        raise ArgumentError("zt and eps_bar must share a shape")
    if not (0 <= t_prev < t):
        raise ArgumentError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not (0.0 <= eta <= 1.0):
        raise ArgumentError(f"eta must lie in [0, 1], got {eta}")
    ab_t = sched.alpha_bar_at(t)
    ab_p = sched.alpha_bar_at(t_prev)
    x0_hat = (zt - math.sqrt(1.0 - ab_t) * eps_bar) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
    radicand = 1.0 - ab_p - sigma * sigma
    if radicand < -1e-12:
        raise NumericDomainError(
            f"direction coefficient radicand is negative ({radicand}) at t={t}"
        )
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(radicand, 0.0)) * eps_bar
    if t_prev > 0 and eta > 0.0 and rng is not None:
        out = out + sigma * _noise_like(zt, rng)
    return out


def ddim_timesteps(total_steps: int, sample_steps: int) -> list[tuple[int, int]]:
    """Evenly spaced (t, t_prev) pairs descending from total_steps to 0."""
    if not (1 <= sample_steps <= total_steps):
        raise ArgumentError(
            f"sample_steps must lie in 1..{total_steps}, got {sample_steps}"
        )
    taus = np.unique(np.round(np.linspace(0, total_steps, sample_steps + 1)).astype(int))
    pairs = [(int(taus[i]), int(taus[i - 1])) for i in range(len(taus) - 1, 0, -1)]
    return pairs


def cfg_combine(eps_cond, eps_uncond, omega: float):
    """Classifier-free guidance: eps_cond + omega * (eps_cond - eps_uncond).

    Written in extrapolation form so omega == 0 and eps_cond == eps_uncond
    return eps_cond bit-exactly.
    """
    if omega < 0:
        raise ArgumentError(f"guidance weight must be >= 0, got {omega}")
    if eps_cond.shape != eps_uncond.shape:
        raise ArgumentError("conditional and unconditional outputs must share a shape")
    return eps_cond + omega * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling-time guidance and subsequence settings."""

    omega: float = 0.7
    steps: int = 50
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ArgumentError("omega must be >= 0")
        if self.steps < 1:
            raise ArgumentError("steps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ArgumentError("eta must lie in [0, 1]")
