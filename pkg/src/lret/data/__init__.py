"""Manifest-driven data loading, splits, weighting and synthetic datasets."""

from .images import ImageDecodeError, read_image, to_float, to_u8, write_image
from .loader import (
    Batch,
    CacheBudgetError,
    DataLoader,
    DecodedCache,
    EpochStats,
    LoaderConfig,
    benchmark,
    iterate_batches,
    order_digest,
    write_bench_csv,
)
from .manifest import (
    DatasetManifest,
    ManifestError,
    Record,
    cap_classes,
    carve_validation,
    compute_class_weights,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .rng import SplitMix64, shuffle_indices
from .synth import SynthSpec, SynthSpecError, synth_arrays, synth_generate

__all__ = [
    "Batch", "CacheBudgetError", "DataLoader", "DatasetManifest", "DecodedCache", "EpochStats", "ImageDecodeError",
    "LoaderConfig", "ManifestError", "Record", "SplitMix64", "SynthSpec", "SynthSpecError", "benchmark",
    "cap_classes", "carve_validation", "compute_class_weights", "iterate_batches", "load_manifest", "order_digest",
    "read_image", "save_manifest", "shuffle_indices", "split_dataset", "synth_arrays", "synth_generate", "to_float",
    "to_u8", "write_bench_csv", "write_image",
]
