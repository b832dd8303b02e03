"""Declarative run configuration: INI text round-tripping nested dataclasses.

Defaults mirror the reference training recipe (VAE 4000 epochs, diffusion
2000 epochs, batch 64, patch side 9, lr 1e-4, T=500, guidance 0.7, balance
rate 0.4); desk-scale runs override via file or CLI flags.  parse(serialize(c))
== c holds exactly because floats are written with repr.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .errors import ArgumentError, FormatError


@dataclass
class PathsConfig:
    cube: str = "cube.hsc1"
    captions: str = "captions.jsonl"
    out_dir: str = "out"


@dataclass
class VaeSection:
    epochs: int = 4000
    lambda_kl: float = 1e-4
    lambda_adv: float = 0.1
    hidden: int = 32
    batch_size: int = 64
    lr: float = 1e-4

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ArgumentError("vae epochs/hidden/batch_size must be positive")
        if self.lambda_kl < 0 or self.lambda_adv < 0 or self.lr <= 0:
            raise ArgumentError("vae loss weights must be >= 0 and lr > 0")


@dataclass
class LdmSection:
    total_steps: int = 500
    beta_min: float = 1e-4
    beta_max: float = 0.02
    d_emb: int = 64
    blocks: int = 4
    heads: int = 8
    epochs: int = 2000
    lr: float = 1e-4
    ema_alpha: float = 0.99
    cond_drop_prob: float = 0.1
    batch_size: int = 64
    text_layers: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ArgumentError("need 0 < beta_min <= beta_max < 1")
        if not (0.0 < self.ema_alpha < 1.0):
            raise ArgumentError("ema_alpha must lie in (0, 1)")
        if not (0.0 <= self.cond_drop_prob <= 1.0):
            raise ArgumentError("cond_drop_prob must lie in [0, 1]")
        if min(self.total_steps, self.d_emb, self.blocks, self.heads, self.epochs,
               self.batch_size, self.text_layers) < 1 or self.lr <= 0:
            raise ArgumentError("ldm integer fields and lr must be positive")


@dataclass
class SampleSection:
    omega: float = 0.7
    steps: int = 50
    lam: float = 0.4
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ArgumentError("omega must be >= 0")
        if self.steps < 1:
            raise ArgumentError("steps must be >= 1")
        if self.lam < 0:
            raise ArgumentError("lam must be >= 0")
        if not (0.0 <= self.eta <= 1.0):
            raise ArgumentError("eta must lie in [0, 1]")


@dataclass
class SplitSection:
    per_class_train: tuple[int, ...] = (3, 8, 15)
    unlabeled_size: int = 200
    side: int = 9

    def __post_init__(self) -> None:
        if not self.per_class_train or any(n < 1 for n in self.per_class_train):
            raise ArgumentError("per-class train counts must be positive")
        if self.unlabeled_size < 0:
            raise ArgumentError("unlabeled_size must be >= 0")
        if self.side < 1 or self.side % 2 == 0:
            raise ArgumentError("patch side must be odd and positive")


@dataclass
class EvalSection:
    classifier_epochs: int = 400
    classifier_hidden: int = 16
    classifier_lr: float = 1e-3
    per_class_samples: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self) -> None:
        if self.classifier_epochs < 1 or self.classifier_hidden < 1 or self.per_class_samples < 1:
            raise ArgumentError("eval integer fields must be positive")
        if self.classifier_lr <= 0 or not self.seeds:
            raise ArgumentError("classifier_lr must be > 0 and seeds non-empty")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    vae: VaeSection = field(default_factory=VaeSection)
    ldm: LdmSection = field(default_factory=LdmSection)
    sample: SampleSection = field(default_factory=SampleSection)
    split: SplitSection = field(default_factory=SplitSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0


_SECTIONS = ("paths", "vae", "ldm", "sample", "split", "eval")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, target_type):
    # dataclass field annotations arrive as strings under deferred evaluation
    name = target_type if isinstance(target_type, str) else getattr(target_type, "__name__", str(target_type))
    if name == "int":
        return int(text)
    if name == "float":
        return float(text)
    if name == "str":
        return text
    if "tuple" in str(name):
        return tuple(int(v) for v in text.split(",") if v.strip())
    raise ArgumentError(f"unsupported config field type {target_type}")


def serialize_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(config.seed)}
    for section in _SECTIONS:
        obj = getattr(config, section)
        parser[section] = {
            f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"bad config: {exc}") from exc
    config = RunConfig()
    if parser.has_option("run", "seed"):
        config.seed = int(parser.get("run", "seed"))
    for section in _SECTIONS:
        if not parser.has_section(section):
            continue
        obj = getattr(config, section)
        by_name = {f.name: f for f in fields(obj)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in by_name:
                raise FormatError(f"unknown key [{section}] {key}")
            try:
                updates[key] = _parse_value(raw, by_name[key].type)
            except ValueError as exc:
                raise FormatError(f"bad value for [{section}] {key}: {raw}") from exc
        merged = {f.name: updates.get(f.name, getattr(obj, f.name)) for f in fields(obj)}
        setattr(config, section, type(obj)(**merged))
    return config


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(config))
