"""Effectiveness analyses and classification scoring.

Point fidelity compares central-pixel spectra of real vs generated patches by
cosine similarity; spectral stats use population std over central pixels;
PCA projects onto the top-2 right singular directions with a fixed sign
convention; OA/AA/kappa come from an integer-exact confusion-matrix reduction;
a deliberately small reference classifier turns patch sets into confusion
matrices; attention maps export as PGM rasters plus CSVs per caption word.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cube import Patch, slugify_word
from .denoiser import AttentionMap
from .errors import ArgumentError, NumericDomainError, ValidationError
from .nnutil import init_conv_, uniform_init_
from .text import END_ID, PAD_ID, START_ID, TokenSequence, Vocabulary


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are truth, columns are prediction, classes 1..K at index 0..K-1."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ArgumentError("confusion matrix must be square")
        if (c < 0).any():
            raise ArgumentError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_pairs(cls, truth, pred, class_count: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape:
            raise ArgumentError("truth and prediction lengths differ")
        if truth.min(initial=1) < 1 or pred.min(initial=1) < 1:
            raise ArgumentError("labels must be >= 1")
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        for t, p in zip(truth, pred):
            counts[t - 1, p - 1] += 1
        return cls(counts=counts)


@dataclass(frozen=True)
class MetricScores:
    oa: float
    aa: float
    kappa: float
    per_class: tuple[float, ...]


def score(cm: ConfusionMatrix) -> MetricScores:
    """OA, AA, and kappa from integer counts.

    Ratios are reduced exactly (integer arithmetic) before the final float
    conversion.  Classes with zero truth rows are excluded from AA.  When the
    chance-agreement term saturates (p_e == 1) kappa is defined as 0.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise ArgumentError("confusion matrix is empty")
    trace = int(np.trace(counts))
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    oa = float(Fraction(trace, total))
    per_class = tuple(
        float(Fraction(int(counts[i, i]), int(rows[i]))) if rows[i] > 0 else float("nan")
        for i in range(counts.shape[0])
    )
    present = [v for v in per_class if not np.isnan(v)]
    aa = float(sum(present) / len(present))
    chance = int(np.dot(rows, cols))
    denom = total * total - chance
    kappa = float(Fraction(total * trace - chance, denom)) if denom != 0 else 0.0
    return MetricScores(oa=oa, aa=aa, kappa=kappa, per_class=per_class)


def _center_spectra(patches: list[Patch]) -> np.ndarray:
    return np.stack([p.center_spectrum() for p in patches]).astype(np.float64)


def point_fidelity(
    real: dict[int, list[Patch]], generated: dict[int, list[Patch]]
) -> dict[int, tuple[float, float]]:
    """Per-class (max, min) cosine similarity over all real x generated pairs
    of central-pixel spectra."""
    out: dict[int, tuple[float, float]] = {}
    for cls in sorted(real):
        if cls not in generated or not real[cls] or not generated[cls]:
            raise ArgumentError(f"class {cls} needs at least one real and one generated patch")
        a = _center_spectra(real[cls])
        b = _center_spectra(generated[cls])
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if (na == 0).any() or (nb == 0).any():
            raise NumericDomainError(f"zero spectrum in class {cls}")
        sims = (a @ b.T) / np.outer(na, nb)
        out[cls] = (float(sims.max()), float(sims.min()))
    return out


@dataclass(frozen=True)
class SpectralStats:
    """Per-band mean and population std of central-pixel spectra."""

    mean: np.ndarray
    std: np.ndarray
    class_id: int

    def __post_init__(self) -> None:
        if (self.std < 0).any():
            raise ArgumentError("std must be nonnegative")


def spectral_stats(patches: list[Patch], class_id: int = 0) -> SpectralStats:
    if len(patches) < 2:
        raise ArgumentError("spectral stats need at least 2 patches")
    spectra = _center_spectra(patches)
    return SpectralStats(
        mean=spectra.mean(axis=0), std=spectra.std(axis=0), class_id=class_id
    )


def pca_2d(spectra: np.ndarray) -> np.ndarray:
    """Column-center and project onto the top-2 right singular directions.

    Sign convention: the first nonzero loading of each component is positive,
    so scores are comparable across runs.
    """
    x = np.asarray(spectra, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ArgumentError("PCA needs an (N >= 3) x C matrix")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12:
        raise NumericDomainError("spectra have rank 0 after centering")
    comps = vt[:2].copy()
    if comps.shape[0] < 2:  # fewer than 2 columns: pad a zero direction
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for k in range(2):
        nz = np.nonzero(np.abs(comps[k]) > 1e-12)[0]
        if nz.size and comps[k, nz[0]] < 0:
            comps[k] = -comps[k]
    return centered @ comps.T


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 16
    epochs: int = 400
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ArgumentError("classifier config values must be positive")


class _RefNet(nn.Module):
    """Two local-mixing conv layers, global average pooling, linear head."""

    def __init__(self, in_channels: int, hidden: int, classes: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            self.c1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
            self.c2 = nn.Conv2d(hidden, hidden, 3, padding=1)
            init_conv_(self.c1, gen)
            init_conv_(self.c2, gen)
            self.head = nn.Linear(hidden, classes)
            uniform_init_(self.head.weight, hidden, gen)
            with torch.no_grad():
                self.head.bias.zero_()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.c1(x))
        h = self.act(self.c2(h))
        return self.head(h.mean(dim=(2, 3)))


def reference_classifier(
    train: list[Patch], test: list[Patch], config: ClassifierConfig | None = None
) -> ConfusionMatrix:
    """Train the small reference network and return the test confusion matrix.

    Deterministic in config.seed.  Class ids observed across both pools set
    the matrix size; training requires at least two distinct classes.
    """
    config = config or ClassifierConfig()
    if not train:
        raise ArgumentError("training set is empty")
    train_labels = sorted({p.center_label for p in train})
    if len(train_labels) < 2:
        raise ValidationError("training set has a single class; nothing to separate")
    if min(train_labels) < 1:
        raise ValidationError("training patches must be labeled (center_label >= 1)")
    class_count = max(max(p.center_label for p in train + test), 1)
    x_train = torch.as_tensor(np.stack([p.pixels for p in train]), dtype=torch.float32)
    y_train = torch.as_tensor([p.center_label - 1 for p in train], dtype=torch.int64)
    net = _RefNet(x_train.shape[1], config.hidden, class_count, config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n = x_train.shape[0]
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = net(x_train[idx])
            loss = loss_fn(logits, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    x_test = torch.as_tensor(np.stack([p.pixels for p in test]), dtype=torch.float32)
    with torch.no_grad():
        pred = net(x_test).argmax(dim=1).numpy() + 1
    truth = np.asarray([p.center_label for p in test])
    return ConfusionMatrix.from_pairs(truth, pred, class_count)


def write_pgm(values: np.ndarray, path: str | Path) -> None:
    """Plain-text PGM (P2) of values in [0, 1] at 255 gray levels."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise ArgumentError("PGM values must lie in [0, 1]")
    gray = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(int)
    lines = ["P2", f"{arr.shape[1]} {arr.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def export_attention(
    maps: list[AttentionMap],
    tokens: TokenSequence,
    vocab: Vocabulary,
    out_dir: str | Path,
) -> list[Path]:
    """Write one head-averaged raster per caption word (START/END excluded).

    Each raster is the block- and head-averaged attention column for that
    token position, min-max normalized to [0, 1], saved as PGM plus a CSV of
    (row, col, value).  Filenames carry the token's surface word.
    """
    if not maps:
        raise ArgumentError("no attention maps given")
    avg = torch.stack([m.head_average().detach() for m in maps]).mean(dim=0).numpy()
    n_pix = avg.shape[0]
    side = int(round(n_pix**0.5))
    if side * side != n_pix:
        raise ArgumentError(f"attention rows ({n_pix}) are not a square grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    for pos in range(1, tokens.real_length - 1):
        token_id = int(tokens.ids[pos])
        if token_id in (PAD_ID, START_ID, END_ID):
            continue
        raster = avg[:, pos].reshape(side, side)
        lo, hi = raster.min(), raster.max()
        norm = (raster - lo) / (hi - lo) if hi > lo else np.zeros_like(raster)
        word = slugify_word(vocab.word_of(token_id))
        stem = out / f"attn_{pos:02d}_{word}"
        write_pgm(norm, stem.with_suffix(".pgm"))
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "value"])
            for r in range(side):
                for c in range(side):
                    writer.writerow([r, c, repr(float(norm[r, c]))])
        paths.append(stem.with_suffix(".pgm"))
        paths.append(stem.with_suffix(".csv"))
    return paths
