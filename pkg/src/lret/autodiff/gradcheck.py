"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function, so it is an
independent oracle for the analytic gradients produced by ``backward``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    Both gradients exactly zero counts as agreement.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-6, max_entries: int | None = None,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place).

    Returns ``(flat_indices, derivatives)``; with ``max_entries`` only a
    random subset of coordinates is probed.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.empty(idx.size, dtype=np.float64)
    with no_grad():
        for pos, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            out[pos] = (fp - fm) / (2 * step)
    return idx, out


def check_gradients(f: Callable[[], float], analytic: Mapping[str, np.ndarray], arrays: Mapping[str, np.ndarray],
                    step: float = 1e-6, max_entries: int | None = None, seed: int = 0,
                    floor: float = 1e-12) -> dict[str, float]:
    """Relative error per named array between ``analytic`` and finite differences of ``f``.

    ``floor`` is the gradient norm below which both sides count as zero.
    Central differences of a float64 loss carry about ``eps * |loss| / step``
    of round-off, so parameters with an exactly-zero true gradient (a bias
    feeding straight into batch norm) need a floor above that noise.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in arrays.items():
        idx, num = numerical_gradient(f, arr, step, max_entries, rng)
        errors[name] = relative_error(np.asarray(analytic[name]).reshape(-1)[idx], num, floor)
    return errors
