"""Hyperspectral cube container, patch extraction, splits, and the toy generator.

A cube is a (bands, height, width) float32 raster with a per-pixel integer
label map.  Label 0 means "unlabeled"; classes are 1..class_count.  Patches
are square spatial crops with the labeling convention of their center pixel.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, ValidationError

_HSC1_MAGIC = b"HSC1"

_SHAPE_WORDS = ("compact", "elongated", "scattered", "rounded", "angular")


@dataclass(frozen=True)
class HsiCube:
    """A calibrated hyperspectral raster plus its ground-truth label map.

    data has shape (bands, height, width), float32.  labels has shape
    (height, width) with values in 0..class_count, 0 meaning unlabeled.
    """

    data: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValidationError(f"cube data must be 3-D, got shape {self.data.shape}")
        if self.data.shape[0] < 4:
            raise ValidationError(
                f"cube needs at least 4 bands for latent compression, got {self.data.shape[0]}"
            )
        if self.labels.shape != self.data.shape[1:]:
            raise ValidationError(
                f"label map {self.labels.shape} does not match raster {self.data.shape[1:]}"
            )
        if self.class_count < 1:
            raise ValidationError("class_count must be >= 1")
        if self.labels.min() < 0 or self.labels.max() > self.class_count:
            raise ValidationError("labels must lie in 0..class_count")

    @property
    def bands(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class Patch:
    """A square crop of a cube: (bands, side, side) pixels, center-pixel label.

    center_label 0 marks an unlabeled patch.  caption_id indexes into the
    caption list of the center class and is None for unlabeled patches.
    """

    pixels: np.ndarray
    center_label: int
    caption_id: int | None = None

    @property
    def side(self) -> int:
        return int(self.pixels.shape[-1])

    def center_spectrum(self) -> np.ndarray:
        s = self.side // 2
        return np.asarray(self.pixels[:, s, s])


@dataclass(frozen=True)
class SplitSpec:
    """Per-class labeled training counts plus the unlabeled pool size."""

    per_class_train: tuple[int, ...]
    unlabeled_pool_size: int
    seed: int = 0

    def __post_init__(self) -> None:
        if any(n < 1 for n in self.per_class_train):
            raise ArgumentError("per-class train counts must be >= 1")
        if self.unlabeled_pool_size < 0:
            raise ArgumentError("unlabeled pool size must be >= 0")


@dataclass
class CaptionCorpus:
    """Caption strings per class id, at a single granularity level."""

    entries: dict[int, list[str]]
    granularity: str = "fine"

    def captions_for(self, class_id: int) -> list[str]:
        caps = self.entries.get(class_id, [])
        if not caps:
            raise ValidationError(f"class {class_id} has no captions")
        return caps


def load_cube(path: str | Path) -> HsiCube:
    """Read an HSC1 container: magic, u32 dims, f32 bands, u16 labels."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _HSC1_MAGIC:
        raise FormatError(f"{path}: not an HSC1 cube (bad magic)")
    bands, height, width = struct.unpack_from("<III", raw, 4)
    if bands < 4 or height < 1 or width < 1:
        raise FormatError(f"{path}: implausible dimensions {(bands, height, width)}")
    n_data = bands * height * width
    expected = 16 + 4 * n_data + 2 * height * width
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=n_data, offset=16)
    labels = np.frombuffer(raw, dtype="<u2", count=height * width, offset=16 + 4 * n_data)
    data = data.reshape(bands, height, width).astype(np.float32)
    labels = labels.reshape(height, width).astype(np.int64)
    class_count = max(int(labels.max()), 1)
    return HsiCube(data=data, labels=labels, class_count=class_count)


def save_cube(cube: HsiCube, path: str | Path) -> None:
    """Write the HSC1 container; load_cube(save_cube(c)) round-trips exactly."""
    if cube.labels.max() > 0xFFFF:
        raise ValidationError("label values exceed u16 range")
    out = bytearray()
    out += _HSC1_MAGIC
    out += struct.pack("<III", cube.bands, cube.height, cube.width)
    out += np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    out += np.ascontiguousarray(cube.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(bytes(out))


def normalize(cube: HsiCube) -> HsiCube:
    """Min-max scale each band independently to [0, 1].

    Constant bands map to all zeros.  Non-finite input data is rejected.
    """
    if not np.isfinite(cube.data).all():
        raise ValidationError("cube contains non-finite values")
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(1, 2), keepdims=True)
    hi = data.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (data - lo) / safe, 0.0)
    return HsiCube(
        data=scaled.astype(np.float32), labels=cube.labels, class_count=cube.class_count
    )


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    # Triangle-wave reflection: ... 2 1 0 1 2 ... n-2 n-1 n-2 ... for any offset.
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    j = np.abs(idx) % period
    return np.where(j >= n, period - j, j)


def extract_patch(cube: HsiCube, row: int, col: int, side: int) -> Patch:
    """Cut a side x side patch centered at (row, col) with mirror padding.

    side must be odd so the center pixel is well defined.  Windows that
    overhang the raster reflect across the border, which keeps per-band
    statistics close to the interior.
    """
    if side < 1 or side % 2 == 0:
        raise ArgumentError(f"patch side must be odd and positive, got {side}")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ArgumentError(f"center ({row}, {col}) outside raster")
    half = side // 2
    rows = _mirror_index(np.arange(row - half, row + half + 1), cube.height)
    cols = _mirror_index(np.arange(col - half, col + half + 1), cube.width)
    pixels = cube.data[:, rows[:, None], cols[None, :]].astype(np.float32)
    return Patch(pixels=pixels, center_label=int(cube.labels[row, col]))


@dataclass(frozen=True)
class IssdSplit:
    """Result of an inter-set spectral-distance style split: disjoint pools."""

    train: list[Patch]
    test: list[Patch]
    unlabeled: list[Patch]


def sample_issd_split(
    cube: HsiCube,
    spec: SplitSpec,
    side: int = 9,
    corpus: CaptionCorpus | None = None,
) -> IssdSplit:
    """Draw per-class train patches, remaining labeled pixels as test, plus an
    unlabeled pool from label-0 pixels.

    Pools are pixel-disjoint.  For labeled patches a caption_id is assigned
    round-robin over the class caption list (index 0 when no corpus is given).
    The draw is deterministic in spec.seed.
    """
    if len(spec.per_class_train) != cube.class_count:
        raise ValidationError(
            f"split lists {len(spec.per_class_train)} classes, cube has {cube.class_count}"
        )
    rng = np.random.default_rng(spec.seed)
    train: list[Patch] = []
    test: list[Patch] = []
    for cls in range(1, cube.class_count + 1):
        want = spec.per_class_train[cls - 1]
        coords = np.argwhere(cube.labels == cls)
        if len(coords) < want + 1:
            raise ValidationError(
                f"class {cls} has {len(coords)} labeled pixels, needs >= {want + 1}"
            )
        order = rng.permutation(len(coords))
        n_caps = len(corpus.captions_for(cls)) if corpus is not None else 1
        for k, pos in enumerate(order):
            r, c = (int(v) for v in coords[pos])
            patch = extract_patch(cube, r, c, side)
            patch = Patch(
                pixels=patch.pixels, center_label=cls, caption_id=k % n_caps
            )
            (train if k < want else test).append(patch)
    unlabeled: list[Patch] = []
    if spec.unlabeled_pool_size > 0:
        coords = np.argwhere(cube.labels == 0)
        if len(coords) < spec.unlabeled_pool_size:
            raise ValidationError(
                f"cube has {len(coords)} unlabeled pixels, pool wants {spec.unlabeled_pool_size}"
            )
        order = rng.permutation(len(coords))[: spec.unlabeled_pool_size]
        for pos in order:
            r, c = (int(v) for v in coords[pos])
            patch = extract_patch(cube, r, c, side)
            unlabeled.append(Patch(pixels=patch.pixels, center_label=0, caption_id=None))
    return IssdSplit(train=train, test=test, unlabeled=unlabeled)


def _class_signatures(classes: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-class spectra: each a sum of <= 3 Gaussian bumps, rescaled
    into [0.15, 0.85].  Primary bump centers are spread over the band axis so
    classes stay spectrally distinct."""
    grid = np.arange(bands, dtype=np.float64)
    sigs = np.zeros((classes, bands))
    for c in range(classes):
        primary = (c + 0.5) * bands / classes + rng.uniform(-0.5, 0.5)
        centers = [primary]
        widths = [rng.uniform(bands / 10, bands / 4)]
        amps = [1.0]
        for _ in range(int(rng.integers(0, 3))):
            centers.append(rng.uniform(0, bands - 1))
            widths.append(rng.uniform(bands / 10, bands / 3))
            amps.append(rng.uniform(0.1, 0.35))
        sig = np.zeros(bands)
        for mu, w, a in zip(centers, widths, amps):
            sig += a * np.exp(-0.5 * ((grid - mu) / w) ** 2)
        lo, hi = sig.min(), sig.max()
        sigs[c] = 0.15 + 0.7 * (sig - lo) / max(hi - lo, 1e-9)
    return sigs


def generate_toy_cube(
    classes: int,
    bands: int,
    height: int,
    width: int,
    seed: int,
    labeled_fraction: float = 0.7,
) -> tuple[HsiCube, CaptionCorpus]:
    """Synthesize a small labeled cube plus fine-grained captions.

    The spatial layout is a Voronoi partition of one random site per class.
    Pixel spectra are the class signature under 5% multiplicative noise;
    within one pixel of a region boundary the spectrum mixes in 30% of an
    adjacent region's signature.  Roughly (1 - labeled_fraction) of the
    pixels are masked to label 0 to provide an unlabeled pool.  Deterministic
    in seed.
    """
    if classes < 2:
        raise ArgumentError("toy cube needs at least 2 classes")
    if bands < 4:
        raise ArgumentError("toy cube needs at least 4 bands")
    if height < 4 or width < 4:
        raise ArgumentError("toy cube needs height and width >= 4")
    if not (0.0 < labeled_fraction <= 1.0):
        raise ArgumentError("labeled_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    sigs = _class_signatures(classes, bands, rng)

    sites = np.stack(
        [rng.uniform(0, height - 1, classes), rng.uniform(0, width - 1, classes)], axis=1
    )
    rr, cc = np.mgrid[0:height, 0:width]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    region = np.argmin(d2, axis=-1)
    # Guarantee every class owns at least its own site pixel.
    for c in range(classes):
        region[int(round(sites[c, 0])), int(round(sites[c, 1]))] = c

    # Boundary band: pixels with a differently-labeled 8-neighbor.
    padded = np.pad(region, 1, mode="edge")
    boundary = np.zeros((height, width), dtype=bool)
    neighbor = np.full((height, width), -1, dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[1 + dr : 1 + dr + height, 1 + dc : 1 + dc + width]
            differs = shifted != region
            neighbor = np.where(differs & ~boundary, shifted, neighbor)
            boundary |= differs

    base = sigs[region]  # (H, W, bands)
    mixed = np.where(
        boundary[..., None], 0.7 * base + 0.3 * sigs[np.maximum(neighbor, 0)], base
    )
    noise = rng.standard_normal((height, width, bands))
    data = np.clip(mixed * (1.0 + 0.05 * noise), 0.0, 1.0)

    labels = region + 1
    hidden = rng.uniform(size=(height, width)) >= labeled_fraction
    labels = np.where(hidden, 0, labels).astype(np.int64)
    # Keep at least one labeled pixel per class visible.
    for c in range(classes):
        if not np.any(labels == c + 1):
            r, col = np.argwhere(region == c)[0]
            labels[r, col] = c + 1

    cube = HsiCube(
        data=np.transpose(data, (2, 0, 1)).astype(np.float32),
        labels=labels,
        class_count=classes,
    )

    entries: dict[int, list[str]] = {}
    for c in range(classes):
        word = _SHAPE_WORDS[int(rng.integers(0, len(_SHAPE_WORDS)))]
        tally = np.bincount(neighbor[(region == c) & boundary & (neighbor >= 0)], minlength=classes)
        adj = int(np.argmax(tally)) if tally.sum() > 0 else (c + 1) % classes
        entries[c + 1] = [f"class {c + 1} region, {word}, adjacent to class {adj + 1}"]
    return cube, CaptionCorpus(entries=entries, granularity="fine")


def save_captions(corpus: CaptionCorpus, path: str | Path) -> None:
    """Write one JSON object per line: {class_id, caption, granularity}."""
    lines = []
    for cls in sorted(corpus.entries):
        for cap in corpus.entries[cls]:
            lines.append(
                json.dumps(
                    {"class_id": cls, "caption": cap, "granularity": corpus.granularity},
                    sort_keys=True,
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_captions(path: str | Path) -> CaptionCorpus:
    entries: dict[int, list[str]] = {}
    granularity = "fine"
    text = Path(path).read_text(encoding="utf-8")
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cls = int(rec["class_id"])
            cap = str(rec["caption"])
            granularity = str(rec.get("granularity", granularity))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{ln}: bad caption record: {exc}") from exc
        entries.setdefault(cls, []).append(cap)
    if not entries:
        raise FormatError(f"{path}: caption file is empty")
    return CaptionCorpus(entries=entries, granularity=granularity)


def sbr_expansion_plan(counts: list[int], lam: float) -> list[int]:
    """Per-class targets for sampling-balance ratio expansion.

    Each class target is r(i) * N(i) with r(i) = ceil(lam * max(N) / N(i)),
    so rare classes are multiplied toward the majority count while classes
    already above lam * max(N) keep their size.
    """
    if not counts:
        raise ArgumentError("counts must be non-empty")
    if any(n <= 0 for n in counts):
        raise ArgumentError("class counts must be positive")
    if lam <= 0:
        raise ArgumentError("lam must be > 0")
    top = max(counts)
    lam_exact = Fraction(lam)
    return [int(math.ceil(lam_exact * top / n)) * n for n in counts]


def slugify_word(word: str) -> str:
    """Lowercased alphanumeric form of a token, safe for filenames."""
    slug = re.sub(r"[^a-z0-9]+", "", word.lower())
    return slug or "tok"
