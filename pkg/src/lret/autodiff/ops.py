"""Differentiable primitives over NHWC tensors.

Every op takes and returns :class:`Tensor`; gradients are plain numpy
arrays produced by the closure recorded on the output node.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise / structural -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), "mul", backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), "sum", backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), "mean", backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), "reshape", backward)


def index(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (x,), "index", backward)


# --- activations ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)  # NaN propagates for downstream checks

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), "relu", backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype)

    def backward(g):
        return (np.where(mask, g, slope * g),)

    return make_result(out, (x,), "leaky_relu", backward, slope=slope)


# --- convolution & pooling --------------------------------------------------------


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for TF-style "same" padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input and (kh, kw, cin, cout) kernel.

    Computed as a sum over kernel offsets of strided-slice matmuls, which
    keeps memory at one output-sized buffer regardless of kernel size.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError("conv2d kernel sizes and stride must be >= 1")
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d produces empty output for input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    k = kernel.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.dtype, k.dtype))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + hs : stride, j : j + ws : stride, :] @ k[i, j]
    if bias is not None:
        out += bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if kernel.requires_grad:
            gk = np.empty_like(k)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                if kernel.requires_grad:
                    patch = xp[:, i : i + hs : stride, j : j + ws : stride, :].reshape(-1, cin)
                    gk[i, j] = patch.T @ g2
                if x.requires_grad:
                    gxp[:, i : i + hs : stride, j : j + ws : stride, :] += g @ k[i, j].T
        if x.requires_grad:
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result(out, inputs, "conv2d", backward, stride=stride, padding=padding)


def max_pool(x: Tensor, window: int = 3, stride: int = 2, padding: str = "same") -> Tensor:
    """Window maximum; the backward pass routes to the first argmax in scan order."""
    if window < 1:
        raise ShapeError("max_pool window must be >= 1")
    n, h, w, c = x.shape
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, window, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool produces empty output for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.full((n, ho, wo, c), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, ho, wo, c), dtype=np.int16)
    for o, (i, j) in enumerate((i, j) for i in range(window) for j in range(window)):
        cand = xp[:, i : i + hs : stride, j : j + ws : stride, :]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = o

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for o, (i, j) in enumerate((i, j) for i in range(window) for j in range(window)):
            gxp[:, i : i + hs : stride, j : j + ws : stride, :] += np.where(arg == o, g, 0)
        return (np.ascontiguousarray(gxp[:, pt : pt + h, pl : pl + w, :]),)

    return make_result(out, (x,), "max_pool", backward, argmax=arg)


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

    return make_result(out, (x,), "global_avg_pool", backward)


# --- dense & normalisation -----------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense dimension mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, inputs, "dense", backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm expects gamma/beta of shape ({c},), got {gamma.shape}/{beta.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batch_norm on an empty batch")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    m = x.data.size // c

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            if training:
                gx = (gamma.data * inv / m) * (m * g - gb - xhat * gg)
            else:
                gx = g * (gamma.data * inv)
        return gx, gg, gb

    return make_result(out.astype(x.dtype), (x, gamma, beta), "batch_norm", backward, mean=mu, var=var)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_result(out, (x,), "dropout", backward)


# --- classification -----------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, class_weights=None) -> tuple[Tensor, np.ndarray]:
    """Weighted mean cross-entropy and the softmax probabilities.

    loss = (1/N) * sum_i w[y_i] * -log p[i, y_i]
    """
    n, k = logits.shape
    if k < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {n} class indices in [0, {k})")
    w = np.ones(k, dtype=logits.dtype) if class_weights is None else np.asarray(class_weights, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    rows = np.arange(n)
    sw = w[labels]
    loss = np.asarray(-(sw * logp[rows, labels]).sum() / n, dtype=logits.dtype)

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (g * d * (sw / n)[:, None],)

    return make_result(loss, (logits,), "softmax_cross_entropy", backward), probs


# --- resampling ------------------------------------------------------------------------


def _linear_taps(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel (align_corners=False) source indices and fractional weights."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def _resize_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, f = _linear_taps(n_in, n_out, a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    return lo + f.reshape(shape) * (hi - lo)


def _resize_axis_backward(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = g.shape[axis]
    if n_in == n_out:
        return g
    i0, i1, f = _linear_taps(n_in, n_out, g.dtype)
    shape = [1] * g.ndim
    shape[axis] = n_out
    f = f.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    res = np.zeros([n_in] + [s for i, s in enumerate(out_shape) if i != axis], dtype=g.dtype)
    np.add.at(res, i0, np.moveaxis(g * (1 - f), axis, 0))
    np.add.at(res, i1, np.moveaxis(g * f, axis, 0))
    return np.moveaxis(res, 0, axis)


def resize_bilinear_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an NHWC (or HWC) array; no graph recorded."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize output size must be >= 1")
    ax = a.ndim - 3
    return _resize_axis(_resize_axis(a, ax, out_h), ax + 1, out_w)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize with half-pixel centres.

    Returns the input unchanged (bit-identical) when the size matches.
    """
    n, h, w, c = x.shape
    out = resize_bilinear_array(x.data, out_h, out_w)
    if out is x.data:
        return x

    def backward(g):
        gh = _resize_axis_backward(g, 2, w)
        return (_resize_axis_backward(gh, 1, h),)

    return make_result(np.ascontiguousarray(out), (x,), "bilinear_resize", backward)
