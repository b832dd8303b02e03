"""Versioned binary checkpoints.

Layout: 4-byte magic, u32 little-endian header length, UTF-8 JSON header,
then a flat float32 little-endian payload.  The header carries a config dict
plus an ordered section index (name, shape); offsets are implicit.  Headers
serialize with sorted keys so identical states produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig
from .errors import FormatError
from .training import ConditionalModel, TrainConfig, build_model
from .vae import PatchDiscriminator, Vae, VaeConfig

VAE_MAGIC = b"VAE1"
LDM_MAGIC = b"LDM1"


def save_blob(
    path: str | Path,
    magic: bytes,
    config: dict,
    sections: list[tuple[str, np.ndarray]],
) -> None:
    if len(magic) != 4:
        raise FormatError("magic must be 4 bytes")
    index = [{"name": name, "shape": list(arr.shape)} for name, arr in sections]
    header = json.dumps({"config": config, "sections": index}, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", len(header))
    blob += header
    for _, arr in sections:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_blob(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != magic:
        raise FormatError(f"{path}: bad magic (expected {magic!r})")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        config = header["config"]
        index = header["sections"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    sections: dict[str, np.ndarray] = {}
    offset = 8 + hlen
    for entry in index:
        shape = tuple(int(v) for v in entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated payload at section {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        sections[entry["name"]] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return config, sections


def _state_sections(module: torch.nn.Module, prefix: str) -> list[tuple[str, np.ndarray]]:
    return [
        (f"{prefix}.{name}", tensor.detach().numpy().astype(np.float32))
        for name, tensor in module.state_dict().items()
    ]


def _load_state(module: torch.nn.Module, sections: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in sections:
            raise FormatError(f"checkpoint missing section {key}")
        state[name] = torch.as_tensor(sections[key]).view(tensor.shape).to(tensor.dtype)
    module.load_state_dict(state)


def save_vae_checkpoint(
    path: str | Path, vae: Vae, disc: PatchDiscriminator, config: VaeConfig
) -> None:
    sections = _state_sections(vae, "vae") + _state_sections(disc, "disc")
    save_blob(path, VAE_MAGIC, {"vae": asdict(config)}, sections)


def load_vae_checkpoint(path: str | Path) -> tuple[Vae, PatchDiscriminator, VaeConfig]:
    config_dict, sections = load_blob(path, VAE_MAGIC)
    config = VaeConfig(**config_dict["vae"])
    vae = Vae(config)
    disc = PatchDiscriminator(config.in_channels, config.hidden, seed=config.seed + 1)
    _load_state(vae, sections, "vae")
    _load_state(disc, sections, "disc")
    return vae, disc, config


def _optimizer_sections(opt: torch.optim.Optimizer) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    state = opt.state_dict()["state"]
    for idx in sorted(state):
        for key in ("step", "exp_avg", "exp_avg_sq"):
            tensor = state[idx][key]
            out.append((f"opt.{idx}.{key}", tensor.detach().numpy().astype(np.float32)))
    return out


def save_ldm_checkpoint(
    path: str | Path,
    model: ConditionalModel,
    ema_model: ConditionalModel,
    optimizer: torch.optim.Optimizer | None,
    train_config: TrainConfig,
    denoiser_config: DenoiserConfig,
    vocab_size: int,
    text_layers: int,
    latent_shift: np.ndarray,
    latent_scale: np.ndarray,
    epoch: int,
) -> None:
    sections = _state_sections(model, "base") + _state_sections(ema_model, "ema")
    if optimizer is not None:
        sections += _optimizer_sections(optimizer)
    sections.append(("latent_shift", np.asarray(latent_shift, dtype=np.float32)))
    sections.append(("latent_scale", np.asarray(latent_scale, dtype=np.float32)))
    config = {
        "train": {**asdict(train_config), "betas": list(train_config.betas)},
        "denoiser": asdict(denoiser_config),
        "vocab_size": vocab_size,
        "text_layers": text_layers,
        "epoch": epoch,
    }
    save_blob(path, LDM_MAGIC, config, sections)


def load_ldm_checkpoint(
    path: str | Path,
) -> tuple[ConditionalModel, ConditionalModel, TrainConfig, DenoiserConfig, dict, dict[str, np.ndarray]]:
    """Rebuild base and EMA models; optimizer tensors stay in the raw sections."""
    config, sections = load_blob(path, LDM_MAGIC)
    train_dict = dict(config["train"])
    train_dict["betas"] = tuple(train_dict["betas"])
    train_config = TrainConfig(**train_dict)
    denoiser_config = DenoiserConfig(**config["denoiser"])
    model = build_model(
        int(config["vocab_size"]), denoiser_config,
        layers=int(config["text_layers"]), seed=train_config.seed,
    )
    ema_model = build_model(
        int(config["vocab_size"]), denoiser_config,
        layers=int(config["text_layers"]), seed=train_config.seed,
    )
    _load_state(model, sections, "base")
    _load_state(ema_model, sections, "ema")
    for p in ema_model.parameters():
        p.requires_grad_(False)
    return model, ema_model, train_config, denoiser_config, config, sections
