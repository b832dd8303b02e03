"""Semi-supervised diffusion training.

Each step draws p ~ U(0,1) to pick a branch: plain conditional denoising,
LF-UE-perturbed latents with original captions, or RPSC-mixed latents with
area-ratio-mixed caption embeddings.  A consistency term ties the base
model's unconditional prediction to the EMA teacher's on unlabeled latents;
both losses are summed 1:1.  The optimizer covers the denoiser, the text
encoder, and the learned null embedding; the EMA copy never receives
gradients and is refreshed elementwise after every optimizer step.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .augment import lfue, random_polygon_mask, rpsc_mix
from .cube import CaptionCorpus, Patch
from .denoiser import Denoiser, DenoiserConfig
from .errors import ArgumentError, TrainingDivergedError, ValidationError
from .schedule import NoiseSchedule, make_linear_schedule, q_sample
from .text import SEQ_LEN, TextEncoder, TextEncoderConfig, Vocabulary, build_vocab, tokenize
from .vae import Vae, encode_mean

_SCALE_GUARD = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the diffusion stage (schedule, optimizer, EMA)."""

    epochs: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    ema_alpha: float = 0.99
    cond_drop_prob: float = 0.1
    total_steps: int = 500
    beta_min: float = 1e-4
    beta_max: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.ema_alpha < 1.0):
            raise ArgumentError("ema_alpha must lie in (0, 1)")
        if not (0.0 <= self.cond_drop_prob <= 1.0):
            raise ArgumentError("cond_drop_prob must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ArgumentError("epochs, batch_size, and lr must be positive")


class ConditionalModel(nn.Module):
    """Denoiser + text encoder bundle; one flat parameter view for EMA."""

    def __init__(self, text: TextEncoder, net: Denoiser):
        super().__init__()
        self.text = text
        self.net = net

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def build_model(
    vocab_size: int, denoiser_cfg: DenoiserConfig, heads: int | None = None,
    layers: int = 3, seed: int = 0, dtype: torch.dtype = torch.float32,
) -> ConditionalModel:
    text_cfg = TextEncoderConfig(
        vocab_size=vocab_size,
        d_emb=denoiser_cfg.d_emb,
        layers=layers,
        heads=heads if heads is not None else denoiser_cfg.heads,
    )
    text = TextEncoder(text_cfg, seed=seed, dtype=dtype)
    net = Denoiser(denoiser_cfg, seed=seed + 1, dtype=dtype)
    return ConditionalModel(text=text, net=net)


def ema_update(ema, base, alpha: float):
    """beta_new = alpha * beta_old + (1 - alpha) * theta, elementwise."""
    if not (0.0 < alpha < 1.0):
        raise ArgumentError("alpha must lie in (0, 1)")
    if tuple(ema.shape) != tuple(base.shape):
        raise ArgumentError(
            f"snapshot shapes differ: {tuple(ema.shape)} vs {tuple(base.shape)}"
        )
    return alpha * ema + (1.0 - alpha) * base


def supervised_loss(
    z0: torch.Tensor,
    ctx: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    model: ConditionalModel,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean-squared error between the drawn noise and the denoiser's estimate."""
    t_list = [int(v) for v in torch.as_tensor(t).reshape(-1)]
    z_t = q_sample(z0, t_list if len(t_list) > 1 else t_list[0], eps, sched)
    eps_hat, _ = model.net(z_t, torch.as_tensor(t_list, dtype=torch.int64), ctx)
    return (eps - eps_hat).square().mean()


def consistency_loss(
    z_trg: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    model: ConditionalModel,
    ema_model: ConditionalModel,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Unconditional agreement between base and EMA models on a shared noisy
    latent; the EMA branch is evaluated without gradient."""
    b = z_trg.shape[0]
    t_list = [int(v) for v in torch.as_tensor(t).reshape(-1)]
    z_t = q_sample(z_trg, t_list if len(t_list) > 1 else t_list[0], eps, sched)
    t_vec = torch.as_tensor(t_list, dtype=torch.int64)
    null_base = model.text.null_tokens[None, :, :].expand(b, -1, -1)
    eps_base, _ = model.net(z_t, t_vec, null_base)
    with torch.no_grad():
        null_ema = ema_model.text.null_tokens[None, :, :].expand(b, -1, -1)
        eps_ema, _ = ema_model.net(z_t, t_vec, null_ema)
    return (eps_base - eps_ema).square().mean()


@dataclass
class LdmState:
    """Everything the training loop mutates, exposed for stepwise tests."""

    model: ConditionalModel
    ema_model: ConditionalModel
    optimizer: torch.optim.Optimizer
    sched: NoiseSchedule
    config: TrainConfig
    rngs: dict[str, np.random.Generator]
    step: int = 0
    epoch: int = 0
    last_branch: str = ""
    last_losses: tuple[float, float] = (0.0, 0.0)


def init_state(
    model: ConditionalModel, config: TrainConfig, sched: NoiseSchedule | None = None
) -> LdmState:
    ema_model = copy.deepcopy(model)
    for p in ema_model.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=config.betas,
        weight_decay=config.weight_decay,
    )
    if sched is None:
        sched = make_linear_schedule(config.total_steps, config.beta_min, config.beta_max)
    names = ("shuffle", "branch", "noise", "t", "drop", "mask", "lfue")
    seqs = np.random.SeedSequence(config.seed).spawn(len(names))
    rngs = {name: np.random.default_rng(seq) for name, seq in zip(names, seqs)}
    return LdmState(
        model=model, ema_model=ema_model, optimizer=optimizer, sched=sched,
        config=config, rngs=rngs,
    )


def _apply_ema(state: LdmState) -> None:
    alpha = state.config.ema_alpha
    with torch.no_grad():
        for p_ema, p_base in zip(state.ema_model.parameters(), state.model.parameters()):
            p_ema.copy_(ema_update(p_ema, p_base.detach(), alpha))


def train_step(
    state: LdmState,
    labeled_latents: torch.Tensor,
    labeled_ids: torch.Tensor,
    labeled_lengths: torch.Tensor,
    unlabeled_latents: torch.Tensor | None,
    p: float,
) -> LdmState:
    """One optimizer update from a labeled batch and an optional unlabeled one."""
    if labeled_latents.shape[0] == 0:
        raise ArgumentError("labeled batch is empty")
    cfg = state.config
    rngs = state.rngs
    b = labeled_latents.shape[0]
    side = labeled_latents.shape[-1]

    ctx = state.model.text(labeled_ids, labeled_lengths)
    z0 = labeled_latents
    if p <= 1.0 / 3.0 or b < 2:
        state.last_branch = "plain"
    elif p <= 2.0 / 3.0:
        state.last_branch = "lfue"
        eps_mu = torch.as_tensor(
            rngs["lfue"].standard_normal(z0.shape[:2]), dtype=z0.dtype
        )
        eps_sigma = torch.as_tensor(
            rngs["lfue"].standard_normal(z0.shape[:2]), dtype=z0.dtype
        )
        z0 = lfue(z0, eps_mu, eps_sigma)
    else:
        state.last_branch = "rpsc"
        k = int(rngs["mask"].integers(3, 9))
        mask = random_polygon_mask(side, k, rngs["mask"])
        z0, ratio = rpsc_mix(z0, torch.roll(z0, shifts=1, dims=0), mask)
        ctx = ratio * ctx + (1.0 - ratio) * torch.roll(ctx, shifts=1, dims=0)

    drop = torch.as_tensor(rngs["drop"].uniform(size=b) < cfg.cond_drop_prob)
    null = state.model.text.null_tokens[None, :, :].expand(b, -1, -1)
    ctx = torch.where(drop[:, None, None], null, ctx)

    t = rngs["t"].integers(1, cfg.total_steps + 1, size=b)
    eps = torch.as_tensor(rngs["noise"].standard_normal(tuple(z0.shape)), dtype=z0.dtype)
    loss_dm = supervised_loss(z0, ctx, torch.as_tensor(t), eps, state.model, state.sched)

    if unlabeled_latents is not None and unlabeled_latents.shape[0] > 0:
        bu = unlabeled_latents.shape[0]
        t_u = rngs["t"].integers(1, cfg.total_steps + 1, size=bu)
        eps_u = torch.as_tensor(
            rngs["noise"].standard_normal(tuple(unlabeled_latents.shape)),
            dtype=unlabeled_latents.dtype,
        )
        loss_con = consistency_loss(
            unlabeled_latents, torch.as_tensor(t_u), eps_u,
            state.model, state.ema_model, state.sched,
        )
    else:
        loss_con = torch.zeros(())

    total = loss_dm + loss_con
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"diffusion loss became non-finite at step {state.step}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    _apply_ema(state)
    state.step += 1
    state.last_losses = (float(loss_dm.detach()), float(loss_con.detach()))
    return state


@dataclass
class LdmTrainResult:
    model: ConditionalModel
    ema_model: ConditionalModel
    history: list[dict[str, float]]
    vocab: Vocabulary
    latent_shift: np.ndarray
    latent_scale: np.ndarray
    sched: NoiseSchedule
    epochs_done: int


def latent_standardization(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel shift/scale that whitens training latents for diffusion."""
    values = latents.astype(np.float64)
    shift = values.mean(axis=(0, 2, 3))
    scale = values.std(axis=(0, 2, 3))
    return shift, np.maximum(scale, _SCALE_GUARD)


def caption_of(patch: Patch, corpus: CaptionCorpus) -> str:
    caps = corpus.captions_for(patch.center_label)
    idx = patch.caption_id if patch.caption_id is not None else 0
    return caps[idx % len(caps)]


def train_ldm(
    labeled: list[Patch],
    corpus: CaptionCorpus,
    unlabeled: list[Patch],
    vae: Vae,
    config: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    vocab: Vocabulary | None = None,
    text_layers: int = 3,
) -> LdmTrainResult:
    """Full Algorithm-style loop: returns base and EMA models plus history.

    The VAE is frozen; labeled and unlabeled patches are encoded to posterior
    means once, standardized per channel, and batched deterministically.
    """
    if not labeled:
        raise ValidationError("no labeled patches to train on")
    if any(p.center_label < 1 for p in labeled):
        raise ValidationError("labeled pool contains unlabeled patches")
    if vocab is None:
        vocab = build_vocab(corpus)

    lab_pixels = np.stack([p.pixels for p in labeled]).astype(np.float32)
    lab_latents = encode_mean(vae, lab_pixels)
    unl_latents = (
        encode_mean(vae, np.stack([p.pixels for p in unlabeled]).astype(np.float32))
        if unlabeled
        else np.zeros((0,) + lab_latents.shape[1:], dtype=np.float32)
    )
    shift, scale = latent_standardization(
        np.concatenate([lab_latents, unl_latents], axis=0)
    )
    lab_z = torch.as_tensor((lab_latents - shift[None, :, None, None]) / scale[None, :, None, None], dtype=torch.float32)
    unl_z = torch.as_tensor((unl_latents - shift[None, :, None, None]) / scale[None, :, None, None], dtype=torch.float32)

    token_rows = [tokenize(caption_of(p, corpus), vocab) for p in labeled]
    ids = torch.as_tensor(np.stack([tok.ids for tok in token_rows]))
    lengths = torch.as_tensor([tok.real_length for tok in token_rows])

    model = build_model(vocab.size, denoiser_cfg, layers=text_layers, seed=config.seed)
    state = init_state(model, config)
    n_lab, n_unl = lab_z.shape[0], unl_z.shape[0]
    history: list[dict[str, float]] = []
    unl_cursor = 0
    unl_order = state.rngs["shuffle"].permutation(n_unl) if n_unl else np.array([], dtype=int)
    for epoch in range(config.epochs):
        order = state.rngs["shuffle"].permutation(n_lab)
        sums = [0.0, 0.0]
        batches = 0
        for start in range(0, n_lab, config.batch_size):
            idx = order[start : start + config.batch_size]
            if n_unl:
                take = min(len(idx), n_unl)
                if unl_cursor + take > n_unl:
                    unl_order = state.rngs["shuffle"].permutation(n_unl)
                    unl_cursor = 0
                u_idx = unl_order[unl_cursor : unl_cursor + take]
                unl_cursor += take
                u_batch = unl_z[u_idx]
            else:
                u_batch = None
            p = float(state.rngs["branch"].uniform())
            state = train_step(state, lab_z[idx], ids[idx], lengths[idx], u_batch, p)
            sums[0] += state.last_losses[0]
            sums[1] += state.last_losses[1]
            batches += 1
        state.epoch = epoch + 1
        history.append(
            {"epoch": float(epoch + 1), "loss_dm": sums[0] / batches, "loss_con": sums[1] / batches}
        )
    return LdmTrainResult(
        model=state.model,
        ema_model=state.ema_model,
        history=history,
        vocab=vocab,
        latent_shift=shift,
        latent_scale=scale,
        sched=state.sched,
        epochs_done=config.epochs,
    )
