"""Finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    rounding noise by rounding noise: below ``floor`` the check is absolute.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_coords: int | None = 64,
    rng=None,
    floor: float = 1e-6,
    stencil: int = 2,
    return_details: bool = False,
):
    """Compare backprop gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. A random
    subset of ``n_coords`` coordinates (spread over all parameters) is probed;
    pass ``None`` to probe every coordinate. Returns the max relative error.

    ``stencil=2`` is ``(f(x+h) - f(x-h)) / 2h``; ``stencil=4`` adds the
    ``x +- 2h`` points for an O(h^4) estimate, which lets a larger ``eps``
    sit clear of rounding noise on deep graphs.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    rng = np.random.default_rng(rng)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    offsets = np.cumsum([0] + [p.size for p in params])
    total = int(offsets[-1])
    if n_coords is None or n_coords >= total:
        flat_ids = np.arange(total)
    else:
        flat_ids = np.sort(rng.choice(total, size=n_coords, replace=False))
    owners = np.searchsorted(offsets, flat_ids, side="right") - 1
    coords = [(int(i), int(k - offsets[i])) for i, k in zip(owners, flat_ids)]

    a_vals, n_vals = [], []
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        plus = f().item()
        flat[j] = old - eps
        minus = f().item()
        if stencil == 4:
            flat[j] = old + 2 * eps
            plus2 = f().item()
            flat[j] = old - 2 * eps
            minus2 = f().item()
            numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * eps)
        else:
            numeric = (plus - minus) / (2.0 * eps)
        flat[j] = old
        n_vals.append(numeric)
        a_vals.append(float(analytic[i].reshape(-1)[j]))
    for p in params:
        p.grad = None

    err = relative_error(np.array(a_vals), np.array(n_vals), floor=floor)
    worst = float(err.max()) if err.size else 0.0
    if return_details:
        return worst, {"analytic": np.array(a_vals), "numeric": np.array(n_vals),
                       "coords": coords, "errors": err}
    return worst
