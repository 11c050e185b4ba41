"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn().data)
            flat[i] = old - eps
            fm = float(fn().data)
            flat[i] = old
            g[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``."""
    loss = fn()
    grads = ad.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t.node_id, np.zeros_like(t.data))
        worst = max(worst, relative_error(analytic, numeric_grad(fn, t, eps)))
    return worst
