"""Procedural patch datasets for desk-scale experiments.

Styles:

``texture``
    Class k is one of four texture families (blob density, oriented
    stripes, checks, smoothed noise) under its own colour tint, with
    per-image parameter jitter.  Separable from colour statistics alone.
``fine``
    Up to four classes that differ only in a one-pixel, period-2 pattern
    (none, vertical lines, horizontal lines, checker) laid over a shared
    smooth background.  An exact 4x bilinear downsample averages each
    pattern to its mean, so the evidence survives only at full resolution.
``localized``
    Class texture confined to one random quadrant; the rest is neutral
    background.  The quadrant is written to ``regions.csv``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import to_u8, write_image
from .manifest import DatasetManifest, Record, save_manifest, split_dataset

FAMILIES = ("blobs", "stripes", "checks", "noise")
FINE = ("plain", "vertical", "horizontal", "checker")
LOCAL = ("vstripes", "hstripes", "checks", "dots")
STYLES = ("texture", "fine", "localized")
MIN_PATCH = 32


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    classes: int = 4
    per_class: int = 50
    patch: int = 256
    seed: int = 0
    style: str = "texture"
    ratios: dict = field(default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2})
    image_format: str = "png"

    def __post_init__(self):
        if self.patch < MIN_PATCH:
            raise SynthSpecError(f"patch must be >= {MIN_PATCH}, got {self.patch}")
        if self.style not in STYLES:
            raise SynthSpecError(f"unknown synth style {self.style!r}; expected one of {STYLES}")
        if self.classes < 2 or self.per_class < 1:
            raise SynthSpecError("need classes >= 2 and per_class >= 1")
        if self.style in ("fine", "localized") and self.classes > 4:
            raise SynthSpecError(f"style {self.style!r} supports at most 4 classes")
        if self.image_format not in ("png", "ppm"):
            raise SynthSpecError("image_format must be 'png' or 'ppm'")

    def class_names(self) -> list[str]:
        table = {"texture": FAMILIES, "fine": FINE, "localized": LOCAL}[self.style]
        return [f"c{k:02d}_{table[k % len(table)]}" for k in range(self.classes)]

    def to_dict(self) -> dict:
        return asdict(self)


# --- texture primitives (all return float arrays in roughly [0, 1]) ----------------------------


def _smooth_noise(rng, s, cells):
    """Bilinear upsampling of a coarse uniform grid: low-frequency background."""
    from ..autodiff.ops import resize_bilinear_array

    grid = rng.random((1, cells, cells, 1))
    return resize_bilinear_array(grid, s, s)[0, :, :, 0]


def _blobs(rng, s):
    yy, xx = np.mgrid[0:s, 0:s] / s
    out = np.zeros((s, s))
    for _ in range(rng.integers(6, 12)):
        cy, cx, r = rng.random(), rng.random(), rng.uniform(0.03, 0.08)
        out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return np.clip(out, 0, 1)


def _stripes(rng, s):
    yy, xx = np.mgrid[0:s, 0:s]
    theta = rng.uniform(0.2, 0.5) * np.pi
    period = s / rng.uniform(6, 10)
    return 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.uniform(0, 6.3))


def _checks(rng, s):
    cell = max(2, int(s / rng.uniform(6, 10)))
    oy, ox = rng.integers(0, cell, 2)
    yy, xx = np.mgrid[0:s, 0:s]
    return (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)


def _noise(rng, s):
    return _smooth_noise(rng, s, max(4, s // 8))


_TEXTURES = {"blobs": _blobs, "stripes": _stripes, "checks": _checks, "noise": _noise}


def _tint(k, n):
    """Well-separated RGB tints on a hue circle."""
    h = k / n
    rgb = 0.5 + 0.35 * np.cos(2 * np.pi * (h + np.array([0.0, 1 / 3, 2 / 3])))
    return rgb


def texture_image(k: int, n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    fam = FAMILIES[k % len(FAMILIES)]
    tex = _TEXTURES[fam](rng, s)
    tint = _tint(k, n) + rng.normal(0, 0.015, 3)
    img = tint * (0.75 + 0.25 * tex[..., None]) + rng.normal(0, 0.02, (s, s, 3))
    return np.clip(img, 0, 1)


def fine_pattern(kind: str, s: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    py, px = rng.integers(0, 2, 2)
    if kind == "plain":
        return np.zeros((s, s))
    if kind == "vertical":
        return np.where((xx + px) % 2 == 0, 1.0, -1.0)
    if kind == "horizontal":
        return np.where((yy + py) % 2 == 0, 1.0, -1.0)
    return np.where((xx + yy + px) % 2 == 0, 1.0, -1.0)


def fine_image(k: int, s: int, rng: np.random.Generator) -> np.ndarray:
    base = 0.3 + 0.4 * _smooth_noise(rng, s, 4)
    colour = rng.uniform(0.8, 1.2, 3)
    amp = rng.uniform(0.08, 0.14)
    img = base[..., None] * colour + amp * fine_pattern(FINE[k], s, rng)[..., None]
    return np.clip(img + rng.normal(0, 0.01, (s, s, 3)), 0, 1)


def _local_texture(kind: str, s: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    period = rng.integers(4, 7)
    off = rng.integers(0, period)
    if kind == "vstripes":
        return ((xx + off) % period < period // 2).astype(float)
    if kind == "hstripes":
        return ((yy + off) % period < period // 2).astype(float)
    if kind == "checks":
        return (((xx + off) // period + (yy + off) // period) % 2).astype(float)
    cy, cx = (yy + off) % period, (xx + off) % period
    return ((cy - period / 2) ** 2 + (cx - period / 2) ** 2 < (period / 3) ** 2).astype(float)


def localized_image(k: int, s: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Returns the image and its evidence quadrant (0 TL, 1 TR, 2 BL, 3 BR)."""
    img = 0.45 + 0.1 * _smooth_noise(rng, s, 4)[..., None] + rng.normal(0, 0.02, (s, s, 3))
    q = int(rng.integers(0, 4))
    h = s // 2
    y0, x0 = (q // 2) * h, (q % 2) * h
    tex = _local_texture(LOCAL[k], h, rng)
    img[y0:y0 + h, x0:x0 + h] = 0.2 + 0.6 * tex[..., None] + rng.normal(0, 0.02, (h, h, 3))
    return np.clip(img, 0, 1), q


def quadrant_masks(s: int) -> np.ndarray:
    """(4, s, s) boolean masks in the quadrant numbering of :func:`localized_image`."""
    h = s // 2
    m = np.zeros((4, s, s), dtype=bool)
    for q in range(4):
        y0, x0 = (q // 2) * h, (q % 2) * h
        m[q, y0:y0 + h, x0:x0 + h] = True
    return m


def synth_sample(spec: SynthSpec, k: int, i: int) -> tuple[np.ndarray, dict]:
    """Image ``i`` of class ``k`` as uint8 plus metadata; independent of generation order."""
    rng = np.random.default_rng([spec.seed, k, i])
    meta = {}
    if spec.style == "texture":
        img = texture_image(k, spec.classes, spec.patch, rng)
    elif spec.style == "fine":
        img = fine_image(k, spec.patch, rng)
    else:
        img, meta["quadrant"] = localized_image(k, spec.patch, rng)
    return to_u8(img), meta


def synth_arrays(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """All images in memory: (N, S, S, 3) uint8, labels, metadata."""
    imgs, labels, metas = [], [], []
    for k in range(spec.classes):
        for i in range(spec.per_class):
            img, meta = synth_sample(spec, k, i)
            imgs.append(img)
            labels.append(k)
            metas.append(meta)
    return np.stack(imgs), np.array(labels), metas


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write images, ``manifest.csv`` (and ``regions.csv`` for localized); returns the manifest path."""
    out_dir = Path(out_dir)
    names = spec.class_names()
    records, regions = [], []
    for k, name in enumerate(names):
        (out_dir / "images" / name).mkdir(parents=True, exist_ok=True)
        for i in range(spec.per_class):
            img, meta = synth_sample(spec, k, i)
            rel = f"images/{name}/{i:05d}.{spec.image_format}"
            write_image(out_dir / rel, img)
            records.append(Record(rel, name))
            if "quadrant" in meta:
                regions.append((rel, meta["quadrant"]))
    manifest = split_dataset(records, spec.ratios, spec.seed, names, out_dir)
    path = out_dir / "manifest.csv"
    save_manifest(manifest, path)
    if regions:
        with open(out_dir / "regions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "quadrant"])
            w.writerows(regions)
    return path


def load_regions(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["path"]: int(row["quadrant"]) for row in csv.DictReader(fh)}


__all__ = ["DatasetManifest", "SynthSpec", "SynthSpecError", "load_regions", "quadrant_masks", "synth_arrays",
           "synth_generate", "synth_sample"]
