"""Training loop: weighted loss, Adam, best-on-validation checkpointing, timing logs."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import NonFiniteError, no_grad, softmax_cross_entropy
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .data.loader import DataLoader, LoaderConfig
from .data.manifest import DatasetManifest, ManifestError, compute_class_weights
from .model import Model
from .optim import Adam, AdamConfig

PIXEL_SCALING = "uint8 / 255 -> [0, 1]"
CHECKPOINT_NAME = "best.lret"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    weighted_loss: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_s: float
    data_wait_s: float
    improved: bool = False


LOG_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "wall_s", "data_wait_s", "improved"]


def write_epoch_csv(path, logs: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for log in logs:
            w.writerow([log.epoch, repr(log.train_loss), repr(log.train_acc), repr(log.val_loss), repr(log.val_acc),
                        f"{log.wall_s:.6f}", f"{log.data_wait_s:.6f}", int(log.improved)])


def read_epoch_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["val_loss"]),
                         float(r["val_acc"]), float(r["wall_s"]), float(r["data_wait_s"]), r["improved"] == "1")
                for r in csv.DictReader(fh)]


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    probs: np.ndarray
    labels: np.ndarray
    paths: list[str]


def predict(model: Model, loader: DataLoader, epoch: int = 0) -> Evaluation:
    """Inference pass over a loader (unweighted loss)."""
    probs, labels, paths, total = [], [], [], 0.0
    with no_grad():
        for b in loader.epoch(epoch):
            out = model.forward(b.images, training=False)
            loss, p = softmax_cross_entropy(out.logits, b.labels)
            total += loss.item() * len(b.labels)
            probs.append(p)
            labels.append(b.labels)
            paths.extend(b.paths)
    if not probs:
        raise ManifestError(f"split {loader.split!r} is empty")
    probs, labels = np.concatenate(probs), np.concatenate(labels)
    acc = float((np.argmax(probs, axis=1) == labels).mean())
    return Evaluation(total / len(labels), acc, probs, labels, paths)


def pipeline_metadata(loader_cfg: LoaderConfig, cfg: TrainConfig) -> dict:
    return {"pixel_scaling": PIXEL_SCALING, "shuffle_seed": loader_cfg.shuffle_seed, "seed": cfg.seed,
            "loader": loader_cfg.to_dict()}


def train(model: Model, manifest: DatasetManifest, loader_cfg: LoaderConfig, cfg: TrainConfig,
          evaluate: Callable[[Model, DataLoader, int], Evaluation] = predict,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Train for ``cfg.epochs``; returns the best-validation checkpoint and the per-epoch logs.

    The checkpoint is replaced only on a strict improvement of validation
    accuracy, so ties keep the earlier epoch.  ``cfg.batch_size`` overrides
    the loader's batch size.
    """
    manifest.check_train_coverage()
    if not manifest.subset("val"):
        raise ManifestError("validation split is empty")
    loader_cfg = replace(loader_cfg, batch_size=cfg.batch_size)
    train_loader = DataLoader(manifest, "train", loader_cfg)
    val_loader = DataLoader(manifest, "val", replace(loader_cfg, shuffle=False))
    weights = compute_class_weights(manifest, "train") if cfg.weighted_loss else None
    if weights is not None and model.spec.num_classes != len(weights):
        raise TrainingError(f"model has {model.spec.num_classes} classes, manifest has {len(weights)}")
    opt = Adam(model.named_parameters(), cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    meta_base = pipeline_metadata(loader_cfg, cfg)
    meta_base["train"] = cfg.to_dict()
    meta_base["classes"] = list(manifest.classes)

    best: Optional[Checkpoint] = None
    best_acc = -np.inf
    logs: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        wait = 0.0
        loss_sum, correct, seen = 0.0, 0, 0
        batches = iter(train_loader.epoch(epoch - 1))
        step = 0
        while True:
            tw = time.perf_counter()
            b = next(batches, None)
            wait += time.perf_counter() - tw
            if b is None:
                break
            step += 1
            try:
                model.zero_grad()
                out = model.forward(b.images, training=True, rng=rng)
                loss, probs = softmax_cross_entropy(out.logits, b.labels, weights)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            loss_sum += loss.item() * len(b.labels)
            correct += int((np.argmax(probs, axis=1) == b.labels).sum())
            seen += len(b.labels)
        val = evaluate(model, val_loader, 0)
        improved = val.accuracy > best_acc
        if improved:
            best_acc = val.accuracy
            best = checkpoint_from_model(model, opt, {**meta_base, "epoch": epoch, "best_val_acc": val.accuracy})
            if cfg.checkpoint_dir is not None:
                save_checkpoint(Path(cfg.checkpoint_dir) / CHECKPOINT_NAME, best)
        wall = time.perf_counter() - t0
        log = EpochLog(epoch, loss_sum / seen, correct / seen, val.loss, val.accuracy, wall, min(wait, wall), improved)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return best, logs
