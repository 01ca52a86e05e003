"""Deep-feature extraction, class-wise averaging and exact t-SNE."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .data.rng import SplitMix64


class EmbedError(ValueError):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) class indices
    origins: list[str] = field(default_factory=list)  # e.g. "train" / "test"
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.vectors)
        if not self.origins:
            self.origins = [""] * n
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not (len(self.labels) == len(self.origins) == len(self.ids) == n):
            raise EmbedError("feature set fields have different lengths")

    @staticmethod
    def concat(sets: Sequence["FeatureSet"]) -> "FeatureSet":
        return FeatureSet(np.concatenate([s.vectors for s in sets]), np.concatenate([s.labels for s in sets]),
                          [o for s in sets for o in s.origins], [i for s in sets for i in s.ids])


def extract_features(model, batch) -> np.ndarray:
    """GAP over the final feature map, one vector per image (inference mode)."""
    with no_grad():
        out = model.forward(batch if isinstance(batch, Tensor) else Tensor(batch), training=False)
    return out.taps["features"].data.astype(np.float32)


def extract_from_loader(model, loader, origin: str = "") -> FeatureSet:
    vecs, labels, ids = [], [], []
    for b in loader.epoch(0):
        vecs.append(extract_features(model, b.images))
        labels.append(b.labels)
        ids.extend(b.paths)
    if not vecs:
        return FeatureSet(np.zeros((0, 0), np.float32), np.zeros(0, np.int64))
    return FeatureSet(np.concatenate(vecs), np.concatenate(labels), [origin] * len(ids), ids)


def average_by_k(fs: FeatureSet, k: int, seed: int = 0, class_names: Optional[Sequence[str]] = None) -> FeatureSet:
    """Replace seeded random groups of ``k`` same-class, same-origin vectors by their mean.

    The remainder of each (class, origin) pool is dropped; ``k == 1`` returns the input unchanged.
    """
    if k < 1:
        raise EmbedError("k must be >= 1")
    if k == 1:
        return fs
    name = (lambda c: class_names[c]) if class_names is not None else str
    keys = sorted({(int(y), o) for y, o in zip(fs.labels, fs.origins)})
    vecs, labels, origins, ids = [], [], [], []
    for n, (label, origin) in enumerate(keys):
        idx = [i for i, (y, o) in enumerate(zip(fs.labels, fs.origins)) if y == label and o == origin]
        if len(idx) < k:
            where = f" in {origin!r}" if origin else ""
            raise EmbedError(f"class {name(label)!r}{where} has {len(idx)} vectors, fewer than k={k}")
        order = SplitMix64(seed, n).shuffle(list(idx))
        for g in range(len(order) // k):
            members = order[g * k:(g + 1) * k]
            vecs.append(fs.vectors[members].mean(axis=0))
            labels.append(label)
            origins.append(origin)
            ids.append("+".join(fs.ids[m] for m in members))
    return FeatureSet(np.array(vecs, dtype=fs.vectors.dtype), np.array(labels, dtype=np.int64), origins, ids)


# --- t-SNE ---------------------------------------------------------------------------------------------


@dataclass
class TsneResult:
    embedding: np.ndarray  # (N, 2)
    P: np.ndarray  # symmetrised joint probabilities
    conditional: np.ndarray  # row-stochastic conditional P
    perplexity: float  # value actually used
    realized_perplexity: np.ndarray
    kl: np.ndarray  # KL(P || Q) after every iteration
    flags: list[str] = field(default_factory=list)


def _sq_distances(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50):
    """Per-row Gaussian precision by bisection so the row entropy matches ``log(perplexity)``.

    Returns ``(P_conditional, realized_perplexity)``.
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    realized = np.zeros(n)
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()  # shift for stability; cancels in the normalisation
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p = np.exp(-di * beta)
            sp = p.sum()
            h = np.log(sp) + beta * (di * p).sum() / sp
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p = p / sp
        realized[i] = np.exp(-(p * np.log(np.maximum(p, 1e-300))).sum())
        P[i, np.arange(n) != i] = p
    return P, realized


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne(x: np.ndarray, perplexity: float = 40.0, iterations: int = 300, seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 100, momentum: tuple[float, float] = (0.5, 0.8),
         momentum_switch: int = 100, init_std: float = 1e-4) -> TsneResult:
    """Exact O(N^2) t-SNE with per-parameter adaptive gains (+0.2 / x0.8, floor 0.01)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise EmbedError("t-SNE needs at least 4 points")
    flags = []
    if n <= 3 * perplexity:
        perplexity = (n - 1) / 3.0
        flags.append(f"perplexity_capped:{perplexity:.6g}")
    rng = np.random.default_rng(seed)
    d2 = _sq_distances(x)
    off = ~np.eye(n, dtype=bool)
    if (d2[off] <= 1e-12 * max(d2.max(), 1e-300)).any():
        scale = np.sqrt(max(d2.max(), 1.0))
        x = x + rng.normal(0, 1e-6 * scale, x.shape)
        d2 = _sq_distances(x)
        flags.append("duplicates_jittered")
    Pc, realized = conditional_probabilities(d2, perplexity)
    P = (Pc + Pc.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)
    P /= P.sum()

    Y = rng.normal(0, init_std, (n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.empty(iterations)
    for it in range(iterations):
        Pe = P * exaggeration if it < exaggeration_iters else P
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (Pe - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        if not np.isfinite(grad).all():
            raise EmbedError(f"non-finite t-SNE gradient at iteration {it}")
        mom = momentum[0] if it < momentum_switch else momentum[1]
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = mom * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        kl[it] = kl_divergence(P, Y)
    return TsneResult(Y, P, Pc, float(perplexity), realized, kl, flags)


# --- files ---------------------------------------------------------------------------------------------


def write_features_csv(path, fs: FeatureSet, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "origin"] + [f"f{j}" for j in range(fs.vectors.shape[1])])
        for i, y, o, v in zip(fs.ids, fs.labels, fs.origins, fs.vectors):
            w.writerow([i, class_names[y], o] + [repr(float(a)) for a in v])


def write_tsne_csv(path, fs: FeatureSet, coords: np.ndarray, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y", "origin"])
        for i, y, o, (a, b) in zip(fs.ids, fs.labels, fs.origins, coords):
            w.writerow([i, class_names[y], repr(float(a)), repr(float(b)), o])
