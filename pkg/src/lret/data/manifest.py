"""Dataset manifests: CSV records of (path, label, split) plus split, cap and weighting rules."""

from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .rng import SplitMix64

SPLITS = ("train", "val", "test")
HEADER = ["path", "label", "split"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    split: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)
    classes: Optional[list[str]] = None  # explicit class list; defaults to the sorted labels present

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path!r}")
            seen.add(r.path)
        labels = sorted({r.label for r in self.records})
        if self.classes is None:
            self.classes = labels
        else:
            self.classes = list(self.classes)
            missing = set(labels) - set(self.classes)
            if missing:
                raise ManifestError(f"labels {sorted(missing)} not in class list")

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def labels(self, split: str) -> np.ndarray:
        idx = self.class_index
        return np.array([idx[r.label] for r in self.subset(split)], dtype=np.int64)

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def counts(self, split: Optional[str] = None) -> dict[str, int]:
        c = Counter(r.label for r in self.records if split is None or r.split == split)
        return {k: c.get(k, 0) for k in self.classes}

    def split_fractions(self) -> dict[str, float]:
        n = len(self.records)
        c = Counter(r.split for r in self.records)
        return {s: c.get(s, 0) / n for s in SPLITS} if n else {}

    def check_train_coverage(self) -> None:
        missing = [c for c, n in self.counts("train").items() if n == 0]
        if missing:
            raise ManifestError(f"classes absent from the train split: {missing}")

    def with_records(self, records: Iterable[Record]) -> "DatasetManifest":
        return DatasetManifest(list(records), self.root, self.classes)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {os.fspath(path)!r}: {exc.strerror}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    if [h.strip() for h in rows[0]] != HEADER:
        raise ManifestError(f"{path}:1: header must be {','.join(HEADER)}, got {','.join(rows[0])}")
    records, seen = [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        p, label, split = (c.strip() for c in row)
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r} (expected one of {', '.join(SPLITS)})")
        if not p or not label:
            raise ManifestError(f"{path}:{lineno}: empty path or label")
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {p!r} (first on line {seen[p]})")
        seen[p] = lineno
        records.append(Record(p, label, split))
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return DatasetManifest(records, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in manifest.records:
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.path!r} has no split assigned")
            w.writerow([r.path, r.label, r.split])


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * ratios``; each count within 1 of its target."""
    raw = [n * r for r in ratios]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(records: Sequence[Record], ratios: Mapping[str, float], seed: int,
                  classes: Optional[list[str]] = None, root=".") -> DatasetManifest:
    """Stratified seeded split; ``ratios`` maps split names to fractions summing to 1."""
    names = list(ratios)
    if any(s not in SPLITS for s in names):
        raise ManifestError(f"unknown split in ratios {names}")
    fr = [float(ratios[s]) for s in names]
    if abs(sum(fr) - 1) > 1e-9 or min(fr) < 0:
        raise ManifestError(f"split ratios must be non-negative and sum to 1, got {fr}")
    need = sum(1 for f in fr if f > 0)
    by_class: dict[str, list[Record]] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r)
    out = []
    for ci, label in enumerate(sorted(by_class)):
        members = by_class[label]
        if len(members) < need:
            raise ManifestError(f"class {label!r} has {len(members)} records, fewer than the {need} splits")
        order = SplitMix64(seed, ci).shuffle(list(range(len(members))))
        start = 0
        for name, k in zip(names, _allocate(len(members), fr)):
            out.extend(replace(members[i], split=name) for i in order[start:start + k])
            start += k
    out.sort(key=lambda r: r.path)
    return DatasetManifest(out, root, classes)


def carve_validation(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Move a stratified ``fraction`` of train into val (for datasets without a val split)."""
    train = manifest.subset("train")
    rest = [r for r in manifest.records if r.split != "train"]
    carved = split_dataset(train, {"train": 1 - fraction, "val": fraction}, seed, manifest.classes, manifest.root)
    return manifest.with_records(sorted(rest + carved.records, key=lambda r: r.path))


def cap_classes(manifest: DatasetManifest, cap: int, seed: int, split: Optional[str] = None) -> DatasetManifest:
    """Uniformly subsample every class above ``cap`` records (within ``split`` if given)."""
    if cap < 1:
        raise ManifestError("cap must be >= 1")
    keep = set()
    for ci, label in enumerate(manifest.classes):
        idx = [i for i, r in enumerate(manifest.records) if r.label == label and (split is None or r.split == split)]
        if len(idx) > cap:
            idx = [idx[j] for j in SplitMix64(seed, ci).shuffle(list(range(len(idx))))[:cap]]
        keep.update(idx)
    kept = [r for i, r in enumerate(manifest.records)
            if i in keep or (split is not None and r.split != split)]
    return manifest.with_records(kept)


def compute_class_weights(manifest: DatasetManifest, split: str = "train") -> np.ndarray:
    """Balanced weights ``N / (K * n_c)`` so that ``sum(w_c * n_c) == N``."""
    counts = manifest.counts(split)
    n = sum(counts.values())
    if n == 0:
        raise ManifestError(f"split {split!r} is empty")
    absent = [c for c, k in counts.items() if k == 0]
    if absent:
        raise ManifestError(f"classes absent from split {split!r}: {absent}")
    k = len(counts)
    return np.array([n / (k * counts[c]) for c in manifest.classes], dtype=np.float64)
