"""Finite-difference gradient oracle, independent of the tape machinery."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["finite_diff_grad", "max_relative_error"]


def finite_diff_grad(f: Callable, params: Sequence[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of a scalar function w.r.t. each parameter tensor.

    ``f`` is re-evaluated with single coordinates of the parameter buffers
    perturbed in place, so it must be a deterministic function of the data
    in ``params``. Returns one gradient array per parameter.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = _eval(f, params)
            flat[k] = orig - h
            down = _eval(f, params)
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def _eval(f: Callable, params) -> float:
    out = f(params)
    value = out.item() if isinstance(out, Tensor) else float(out)
    if not math.isfinite(value):
        raise FloatingPointError(f"finite_diff_grad: non-finite probe evaluation {value!r}")
    return value


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-n| / max(|a|, |n|, floor), the usual gradcheck metric."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
