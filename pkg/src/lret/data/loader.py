"""Batch iteration with an in-memory decoded cache and bounded prefetching.

Decode work for upcoming batches runs on a thread pool while the consumer
holds the current batch.  At most ``prefetch_depth`` batches are submitted
ahead of the consumer, and batches are yielded strictly in sequence order,
so output never depends on worker count or timing.
"""

from __future__ import annotations

import csv
import hashlib
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .images import read_image, to_float
from .manifest import DatasetManifest, Record, cap_classes
from .rng import shuffle_indices


class CacheBudgetError(MemoryError):
    pass


@dataclass
class LoaderConfig:
    batch_size: int = 32
    shuffle_seed: int = 0
    cache: bool = True
    prefetch_depth: int = 2
    decode_workers: int = 2
    class_cap: Optional[int] = None
    simulated_io_latency_ms: Optional[float] = None
    cache_budget_bytes: int = 1 << 30
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.prefetch_depth < 1 or self.decode_workers < 1:
            raise ValueError("batch_size, prefetch_depth and decode_workers must be >= 1")
        if self.class_cap is not None and self.class_cap < 1:
            raise ValueError("class_cap must be >= 1")
        if self.simulated_io_latency_ms is not None and self.simulated_io_latency_ms < 0:
            raise ValueError("simulated_io_latency_ms must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    sequence_index: int
    paths: list[str] = field(default_factory=list)


@dataclass
class EpochStats:
    epoch: int
    wall_ms: float = 0.0
    decode_ms: float = 0.0  # summed over workers, includes injected latency
    wait_ms: float = 0.0  # consumer time blocked on the next batch
    cache_hits: int = 0
    cache_misses: int = 0
    batches: int = 0
    max_in_flight: int = 0
    max_ready: int = 0  # fully decoded batches not yet taken by the consumer


class DecodedCache:
    """Append-only store of decoded images with a hard byte budget."""

    def __init__(self, budget_bytes: int):
        self.budget = int(budget_bytes)
        self.nbytes = 0
        self._data: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> Optional[np.ndarray]:
        return self._data.get(key)

    def put(self, key: str, arr: np.ndarray) -> np.ndarray:
        with self._lock:
            if key in self._data:
                return self._data[key]
            if self.nbytes + arr.nbytes > self.budget:
                raise CacheBudgetError(f"decoded cache budget of {self.budget} bytes exceeded while adding {key!r}"
                                       f" ({self.nbytes} + {arr.nbytes})")
            arr.flags.writeable = False
            self._data[key] = arr
            self.nbytes += arr.nbytes
            return arr


class DataLoader:
    """Iterates one split of a manifest; the cache (if on) persists across epochs."""

    def __init__(self, manifest: DatasetManifest, split: str, cfg: LoaderConfig):
        if cfg.class_cap is not None:
            manifest = cap_classes(manifest, cfg.class_cap, cfg.shuffle_seed, split)
        self.manifest = manifest
        self.split = split
        self.cfg = cfg
        self.records: list[Record] = manifest.subset(split)
        self._index = manifest.class_index
        self.cache = DecodedCache(cfg.cache_budget_bytes) if cfg.cache else None
        self.history: list[EpochStats] = []

    def __len__(self) -> int:
        return -(-len(self.records) // self.cfg.batch_size)

    def order(self, epoch: int) -> list[int]:
        n = len(self.records)
        return shuffle_indices(n, self.cfg.shuffle_seed, epoch) if self.cfg.shuffle else list(range(n))

    def _decode(self, rec: Record, stats: EpochStats, lock: threading.Lock) -> np.ndarray:
        key = str(self.manifest.resolve(rec))
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                with lock:
                    stats.cache_hits += 1
                return hit
        t0 = time.perf_counter()
        if self.cfg.simulated_io_latency_ms:
            time.sleep(self.cfg.simulated_io_latency_ms / 1000.0)
        arr = to_float(read_image(key))
        if self.cache is not None:
            arr = self.cache.put(key, arr)
        with lock:
            stats.cache_misses += 1
            stats.decode_ms += (time.perf_counter() - t0) * 1000.0
        return arr

    def epoch(self, epoch: int) -> Iterator[Batch]:
        cfg = self.cfg
        order = self.order(epoch)
        chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        stats = EpochStats(epoch)
        self.history.append(stats)
        lock = threading.Lock()
        ready = [0]
        t_start = time.perf_counter()

        def submit(pool, seq):
            futs = [pool.submit(self._decode, self.records[i], stats, lock) for i in chunks[seq]]
            pending = [len(futs)]
            complete = threading.Event()

            def done(_f):
                with lock:
                    pending[0] -= 1
                    if pending[0] == 0:
                        ready[0] += 1
                        stats.max_ready = max(stats.max_ready, ready[0])
                        complete.set()

            for f in futs:
                f.add_done_callback(done)
            return futs, complete

        pool = ThreadPoolExecutor(max_workers=cfg.decode_workers, thread_name_prefix="lret-decode")
        try:
            queue: deque = deque()
            next_seq = 0
            while next_seq < len(chunks) and len(queue) < cfg.prefetch_depth:
                queue.append(submit(pool, next_seq))
                next_seq += 1
            stats.max_in_flight = len(queue)
            for seq in range(len(chunks)):
                futs, complete = queue.popleft()
                t0 = time.perf_counter()
                images = [f.result() for f in futs]
                complete.wait()
                stats.wait_ms += (time.perf_counter() - t0) * 1000.0
                with lock:
                    ready[0] -= 1
                if next_seq < len(chunks):
                    queue.append(submit(pool, next_seq))
                    next_seq += 1
                recs = [self.records[i] for i in chunks[seq]]
                shapes = {a.shape for a in images}
                if len(shapes) != 1:
                    raise ValueError(f"batch {seq} mixes image shapes {sorted(shapes)}; first record {recs[0].path!r}")
                stats.batches += 1
                stats.max_in_flight = max(stats.max_in_flight, len(queue))
                yield Batch(np.stack(images), np.array([self._index[r.label] for r in recs], dtype=np.int64), seq,
                            [r.path for r in recs])
        finally:
            pool.shutdown(wait=True, cancel_futures=True)
            stats.wall_ms = (time.perf_counter() - t_start) * 1000.0


def iterate_batches(manifest: DatasetManifest, split: str, cfg: LoaderConfig, epoch: int,
                    loader: Optional[DataLoader] = None) -> Iterator[Batch]:
    """Functional entry point; pass a :class:`DataLoader` to keep its cache across epochs."""
    loader = loader or DataLoader(manifest, split, cfg)
    return loader.epoch(epoch)


def order_digest(batches) -> str:
    """SHA-256 over the emitted (path, label) sequence, for comparing batch orders."""
    h = hashlib.sha256()
    for b in batches:
        for p, y in zip(b.paths, b.labels):
            h.update(f"{b.sequence_index}\t{p}\t{int(y)}\n".encode())
    return h.hexdigest()


def benchmark(manifest: DatasetManifest, split: str, cfg: LoaderConfig, epochs: int,
              consumer_ms: float = 0.0) -> tuple[list[EpochStats], list[str]]:
    """Drain ``epochs`` epochs with an optional simulated per-batch consumer cost.

    Returns per-epoch stats and per-epoch order digests.
    """
    loader = DataLoader(manifest, split, cfg)
    digests = []
    for e in range(epochs):
        batches = []
        for b in loader.epoch(e):
            if consumer_ms:
                time.sleep(consumer_ms / 1000.0)
            batches.append(b)
        digests.append(order_digest(batches))
    return loader.history, digests


BENCH_COLUMNS = ["epoch", "wall_ms", "decode_ms", "wait_ms", "cache_hits"]


def write_bench_csv(path, stats: list[EpochStats], extra: Optional[dict] = None) -> None:
    """Bench report; ``extra`` adds constant leading columns (e.g. the variant name)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + BENCH_COLUMNS)
        for s in stats:
            w.writerow(list(extra.values()) + [s.epoch, f"{s.wall_ms:.3f}", f"{s.decode_ms:.3f}", f"{s.wait_ms:.3f}",
                                               s.cache_hits])
