"""Class activation maps at selectable feature resolutions.

Any model works that provides ``forward(batch, training=False)`` returning
an object with ``logits`` (Tensor), ``probs`` and ``taps`` (name -> Tensor),
plus a ``tap_equivalents`` mapping from nominal resolution to tap name.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.ops import resize_bilinear_array, softmax
from .data.images import to_u8, write_image

METHODS = ("gradcam", "gradcampp", "scorecam")


class ExplainError(ValueError):
    pass


@dataclass
class CamHeatmap:
    values: np.ndarray  # (h, w) at tap resolution, in [0, 1]
    upsampled: np.ndarray  # (H, W) at input resolution
    target_class: int
    method: str
    layer_res: Union[int, str]
    tap: str
    all_zero: bool = False
    channel_weights: Optional[np.ndarray] = None
    target: str = "logit"
    flags: list[str] = field(default_factory=list)


def resolve_tap(model, layer_res) -> str:
    taps = getattr(model, "tap_equivalents", {})
    if layer_res in taps:
        return taps[layer_res]
    if isinstance(layer_res, str):
        return layer_res
    raise ExplainError(f"no tap for layer resolution {layer_res!r}; available {sorted(taps)}")


def normalize_map(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max to [0, 1].  An all-zero map stays zero and is flagged; a constant positive map becomes ones."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi <= 0:
        return np.zeros_like(m), True
    if hi == lo:
        return np.ones_like(m), False
    return (m - lo) / (hi - lo), False


def _heatmap(cam, image_hw, c, method, layer_res, tap, weights, target="logit") -> CamHeatmap:
    values, zero = normalize_map(np.maximum(cam, 0))
    up = resize_bilinear_array(values[None, :, :, None], *image_hw)[0, :, :, 0]
    flags = ["all_zero_map"] if zero else []
    return CamHeatmap(values, np.clip(up, 0, 1), c, method, layer_res, tap, zero, weights, target, flags)


def _prepare(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ExplainError(f"expected one (H, W, C) image, got shape {image.shape}")
    return image


def _activation_and_gradient(model, image, c, tap):
    """Tap activation and d logit_c / d activation for a single image."""
    out = model.forward(Tensor(image[None]), training=False)
    if tap not in out.taps:
        raise ExplainError(f"model exposes no tap {tap!r}; available {sorted(out.taps)}")
    k = out.logits.shape[1]
    if not 0 <= c < k:
        raise ExplainError(f"class {c} out of range [0, {k})")
    act = out.taps[tap]
    onehot = np.zeros(out.logits.shape, dtype=out.logits.dtype)
    onehot[0, c] = 1
    (out.logits * onehot).sum().backward()
    grad = act.grad
    if hasattr(model, "zero_grad"):
        model.zero_grad()  # CAMs must not leave parameter gradients behind
    if grad is None:
        grad = np.zeros_like(act.data)
    return act.data[0].astype(np.float64), grad[0].astype(np.float64)


def grad_cam(model, image, c: int, layer_res) -> CamHeatmap:
    image = _prepare(image)
    tap = resolve_tap(model, layer_res)
    a, g = _activation_and_gradient(model, image, c, tap)
    alpha = g.mean(axis=(0, 1))
    return _heatmap(a @ alpha, image.shape[:2], c, "gradcam", layer_res, tap, alpha)


def grad_cam_pp(model, image, c: int, layer_res) -> CamHeatmap:
    """Closed form for an exponential score: only first-order gradients are needed."""
    image = _prepare(image)
    tap = resolve_tap(model, layer_res)
    a, g = _activation_and_gradient(model, image, c, tap)
    g2 = g * g
    den = 2 * g2 + a.sum(axis=(0, 1))[None, None, :] * g2 * g
    alpha = np.divide(g2, den, out=np.zeros_like(g2), where=den != 0)
    w = (alpha * np.maximum(g, 0)).sum(axis=(0, 1))
    return _heatmap(a @ w, image.shape[:2], c, "gradcampp", layer_res, tap, w)


def score_cam(model, image, c: int, layer_res, batch_size: int = 16, order: Optional[Sequence[int]] = None,
              channel_limit: int = 512) -> CamHeatmap:
    """Gradient-free: weight channels by the class score of the input masked with each upsampled channel."""
    image = _prepare(image)
    tap = resolve_tap(model, layer_res)
    h, w = image.shape[:2]
    with no_grad():
        out = model.forward(Tensor(image[None]), training=False)
        if tap not in out.taps:
            raise ExplainError(f"model exposes no tap {tap!r}; available {sorted(out.taps)}")
        a = out.taps[tap].data[0].astype(np.float64)
        k = a.shape[2]
        flags = []
        if k > channel_limit:
            warnings.warn(f"score_cam over {k} channels needs {k} forward passes", RuntimeWarning, stacklevel=2)
            flags.append("channel_cost_warning")
        up = resize_bilinear_array(a.transpose(2, 0, 1)[..., None], h, w)[..., 0]  # (k, H, W)
        masks = np.stack([normalize_map(u)[0] if u.max() > u.min() else np.zeros_like(u) for u in up])
        order = list(range(k)) if order is None else list(order)
        if sorted(order) != list(range(k)):
            raise ExplainError("order must be a permutation of the channel indices")
        scores = np.empty(k)
        for start in range(0, k, batch_size):
            chunk = order[start:start + batch_size]
            batch = (image[None] * masks[chunk][..., None]).astype(image.dtype)
            probs = softmax(model.forward(Tensor(batch), training=False).logits.data.astype(np.float64))
            scores[chunk] = probs[:, c]
        base = softmax(model.forward(Tensor(np.zeros_like(image)[None]), training=False)
                       .logits.data.astype(np.float64))[0, c]
    weights = softmax((scores - base)[None, :])[0]
    hm = _heatmap(a @ weights, (h, w), c, "scorecam", layer_res, tap, weights, target="softmax")
    hm.flags += flags
    return hm


def explain(model, image, c: int, layer_res, method: str) -> CamHeatmap:
    fns = {"gradcam": grad_cam, "gradcampp": grad_cam_pp, "scorecam": score_cam}
    if method not in fns:
        raise ExplainError(f"unknown CAM method {method!r}; expected one of {{{', '.join(METHODS)}}}")
    return fns[method](model, image, c, layer_res)


# --- rendering ----------------------------------------------------------------------------------------

# Blue -> red colormap: piecewise-linear interpolation between these (position, RGB) stops.
COLORMAP_STOPS = (
    (0.0, (0, 0, 128)),
    (0.125, (0, 0, 255)),
    (0.375, (0, 255, 255)),
    (0.625, (255, 255, 0)),
    (0.875, (255, 0, 0)),
    (1.0, (128, 0, 0)),
)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to float RGB in [0, 1] with :data:`COLORMAP_STOPS`."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    pos = np.array([s[0] for s in COLORMAP_STOPS])
    rgb = np.array([s[1] for s in COLORMAP_STOPS], dtype=np.float64) / 255.0
    return np.stack([np.interp(v, pos, rgb[:, ch]) for ch in range(3)], axis=-1)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a [0, 1] image with the colormapped heatmap; returns uint8 RGB."""
    return to_u8((1 - alpha) * np.asarray(image, dtype=np.float64) + alpha * colormap(heat))


def save_overlay(path, image: np.ndarray, hm: CamHeatmap, alpha: float = 0.45) -> None:
    write_image(path, overlay(image, hm.upsampled, alpha))


def write_grid_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(values):
            w.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def quadrant_mass(heat: np.ndarray, quadrant: int) -> float:
    """Fraction of total heatmap mass in a quadrant (0 TL, 1 TR, 2 BL, 3 BR)."""
    h, w = heat.shape
    ys = slice(0, h // 2) if quadrant < 2 else slice(h // 2, h)
    xs = slice(0, w // 2) if quadrant % 2 == 0 else slice(w // 2, w)
    total = heat.sum()
    return float(heat[ys, xs].sum() / total) if total > 0 else 0.0


__all__ = ["COLORMAP_STOPS", "CamHeatmap", "ExplainError", "METHODS", "colormap", "explain", "grad_cam",
           "grad_cam_pp", "normalize_map", "overlay", "quadrant_mass", "read_grid_csv", "resolve_tap",
           "save_overlay", "score_cam", "write_grid_csv"]
