"""Guided sampling from the trained diffusion stage and dataset expansion.

Sampling always runs on the EMA (ensemble) model: draw z_T ~ N(0, I), walk an
evenly spaced DDIM subsequence combining conditional and unconditional noise
estimates with guidance weight omega, then map the latent back through the
stored per-channel standardization and the VAE decoder.  Expansion fills each
class up to its sampling-balance-rate target, cycling the class captions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cube import CaptionCorpus, Patch, sbr_expansion_plan
from .denoiser import AttentionMap
from .errors import ArgumentError, FormatError, StateError, ValidationError
from .schedule import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps
from .text import Vocabulary, tokenize
from .training import ConditionalModel
from .vae import Vae

_HSP1_MAGIC = b"HSP1"


@dataclass(frozen=True)
class GenerationRequest:
    """One batch of same-caption patches to synthesize."""

    caption: str
    count: int
    omega: float = 0.7
    steps: int = 50
    seed: int = 0
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ArgumentError("count must be >= 1")
        if self.omega < 0:
            raise ArgumentError("omega must be >= 0")
        if self.steps < 1:
            raise ArgumentError("steps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ArgumentError("eta must lie in [0, 1]")


@dataclass(frozen=True)
class LdmArtifacts:
    """Frozen sampling bundle: EMA model, vocabulary, schedule, latent affine."""

    ema_model: ConditionalModel
    vocab: Vocabulary
    sched: NoiseSchedule
    latent_shift: np.ndarray
    latent_scale: np.ndarray
    trained: bool = True


@dataclass(frozen=True)
class SyntheticPatch:
    """Generated patch with full provenance."""

    patch: Patch
    caption: str
    seed: int
    omega: float
    synthetic: bool = True


@dataclass
class SyntheticDataset:
    patches: list[SyntheticPatch] = field(default_factory=list)


def sample_latent(
    req: GenerationRequest, art: LdmArtifacts, collect_maps: bool = False
) -> torch.Tensor | tuple[torch.Tensor, list[AttentionMap]]:
    """DDIM-sample `count` latents conditioned on the request caption.

    Returns latents in the VAE frame (standardization already inverted),
    shaped (count, 4, S, S).  With collect_maps=True, also returns the
    cross-attention maps of the final conditional denoiser pass.
    """
    if not art.trained:
        raise StateError("sampling requires trained parameters")
    if req.steps > art.sched.steps:
        raise ArgumentError(f"steps {req.steps} exceeds schedule length {art.sched.steps}")
    net = art.ema_model.net
    side = net.config.patch_side
    rng = np.random.default_rng(req.seed)
    z = torch.as_tensor(
        rng.standard_normal((req.count, 4, side, side)), dtype=torch.float32
    )
    tokens = tokenize(req.caption, art.vocab)
    maps: list[AttentionMap] = []
    with torch.no_grad():
        ctx = art.ema_model.text.encode(tokens).tokens_emb
        ctx = ctx[None, :, :].expand(req.count, -1, -1)
        null = art.ema_model.text.null_tokens[None, :, :].expand(req.count, -1, -1)
        for t, t_prev in ddim_timesteps(art.sched.steps, req.steps):
            eps_c, maps = net(z, t, ctx)
            if req.omega == 0.0:
                eps_bar = eps_c
            else:
                eps_u, _ = net(z, t, null)
                eps_bar = cfg_combine(eps_c, eps_u, req.omega)
            z = ddim_step(
                z, t, t_prev, eps_bar, art.sched, eta=req.eta,
                rng=rng if req.eta > 0 else None,
            )
    shift = torch.as_tensor(art.latent_shift, dtype=z.dtype).view(1, -1, 1, 1)
    scale = torch.as_tensor(art.latent_scale, dtype=z.dtype).view(1, -1, 1, 1)
    z = z * scale + shift
    if collect_maps:
        return z, maps
    return z


def class_of_caption(caption: str, corpus: CaptionCorpus | None) -> int:
    """Class whose caption list contains the exact string; 0 when unknown."""
    if corpus is not None:
        for cls in sorted(corpus.entries):
            if caption in corpus.entries[cls]:
                return cls
    return 0


def generate_patches(
    req: GenerationRequest,
    art: LdmArtifacts,
    vae: Vae,
    corpus: CaptionCorpus | None = None,
    class_id: int | None = None,
) -> SyntheticDataset:
    """Sample latents, decode to pixel patches, attach caption-derived labels."""
    latents = sample_latent(req, art)
    with torch.no_grad():
        decoder_dtype = next(vae.parameters()).dtype
        pixels = vae.decode(latents.to(decoder_dtype)).numpy().astype(np.float32)
    label = class_id if class_id is not None else class_of_caption(req.caption, corpus)
    out = SyntheticDataset()
    for i in range(req.count):
        out.patches.append(
            SyntheticPatch(
                patch=Patch(pixels=pixels[i], center_label=label, caption_id=None),
                caption=req.caption,
                seed=req.seed,
                omega=req.omega,
            )
        )
    return out


@dataclass(frozen=True)
class ExpansionRecord:
    """One training example after expansion: real or synthetic."""

    patch: Patch
    synthetic: bool
    caption: str | None = None
    seed: int | None = None
    omega: float | None = None


def expand_dataset(
    train: list[Patch],
    lam: float,
    omega: float,
    art: LdmArtifacts,
    vae: Vae,
    corpus: CaptionCorpus,
    steps: int = 50,
    seed: int = 0,
    eta: float = 0.0,
) -> list[ExpansionRecord]:
    """Real + synthetic union meeting the expansion plan exactly.

    lam == 0 is the degenerate no-op: the real set is returned unchanged.
    Captions cycle round-robin over each deficient class's list; every
    synthetic record carries its caption, seed, and omega.
    """
    if not train:
        raise ArgumentError("training set is empty")
    classes = sorted({p.center_label for p in train})
    if 0 in classes:
        raise ValidationError("training set contains unlabeled patches")
    records = [ExpansionRecord(patch=p, synthetic=False) for p in train]
    if lam == 0:
        return records
    counts = [sum(1 for p in train if p.center_label == cls) for cls in classes]
    plan = sbr_expansion_plan(counts, lam)
    for cls, have, want in zip(classes, counts, plan):
        deficit = want - have
        if deficit <= 0:
            continue
        captions = corpus.captions_for(cls)
        per_caption = [0] * len(captions)
        for j in range(deficit):
            per_caption[j % len(captions)] += 1
        for ci, n in enumerate(per_caption):
            if n == 0:
                continue
            sub_seed = int(np.random.SeedSequence([seed, cls, ci]).generate_state(1)[0])
            req = GenerationRequest(
                caption=captions[ci], count=n, omega=omega, steps=steps,
                seed=sub_seed, eta=eta,
            )
            for sp in generate_patches(req, art, vae, class_id=cls).patches:
                records.append(
                    ExpansionRecord(
                        patch=sp.patch, synthetic=True, caption=sp.caption,
                        seed=sp.seed, omega=sp.omega,
                    )
                )
    return records


def save_patch_archive(dataset: SyntheticDataset, path: str | Path) -> None:
    """HSP1 container + JSON manifest next to it (caption provenance)."""
    if not dataset.patches:
        raise ArgumentError("archive would be empty")
    first = dataset.patches[0].patch.pixels
    bands, side = int(first.shape[0]), int(first.shape[2])
    blob = bytearray()
    blob += _HSP1_MAGIC
    blob += struct.pack("<I", len(dataset.patches))
    manifest: dict = {"bands": bands, "side": side, "count": len(dataset.patches), "patches": []}
    for sp in dataset.patches:
        if sp.patch.pixels.shape != first.shape:
            raise ArgumentError("archive patches must share a shape")
        blob += struct.pack("<HQf", sp.patch.center_label, sp.seed & 0xFFFFFFFFFFFFFFFF, sp.omega)
        blob += np.ascontiguousarray(sp.patch.pixels, dtype="<f4").tobytes()
        manifest["patches"].append(
            {
                "class_id": sp.patch.center_label,
                "caption": sp.caption,
                "seed": sp.seed,
                "omega": sp.omega,
            }
        )
    out = Path(path)
    out.write_bytes(bytes(blob))
    out.with_suffix(out.suffix + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )


def load_patch_archive(path: str | Path) -> SyntheticDataset:
    out = Path(path)
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: manifest missing")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = out.read_bytes()
    if len(raw) < 8 or raw[:4] != _HSP1_MAGIC:
        raise FormatError(f"{path}: not an HSP1 archive")
    (count,) = struct.unpack_from("<I", raw, 4)
    bands, side = int(manifest["bands"]), int(manifest["side"])
    rec_size = 14 + 4 * bands * side * side
    if len(raw) != 8 + count * rec_size:
        raise FormatError(f"{path}: truncated archive")
    if len(manifest.get("patches", [])) != count:
        raise FormatError(f"{manifest_path}: manifest lists a different patch count")
    dataset = SyntheticDataset()
    offset = 8
    for i in range(count):
        cls, seed, omega = struct.unpack_from("<HQf", raw, offset)
        data = np.frombuffer(raw, dtype="<f4", count=bands * side * side, offset=offset + 14)
        offset += rec_size
        meta = manifest["patches"][i]
        dataset.patches.append(
            SyntheticPatch(
                patch=Patch(
                    pixels=data.reshape(bands, side, side).astype(np.float32),
                    center_label=int(cls),
                    caption_id=None,
                ),
                caption=meta.get("caption"),
                seed=int(seed),
                omega=float(omega),
            )
        )
    return dataset
