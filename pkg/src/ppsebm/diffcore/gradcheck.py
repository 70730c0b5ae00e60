"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


def _value(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    v = f(Tensor(x)).item()
    if not np.isfinite(v):
        raise NonFiniteError("finite_diff_check: f is not finite at a perturbed point")
    return v


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    return tape.backward(out, wrt=[xt])[xt]


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = _value(f, x)
        flat[i] = orig - eps
        down = _value(f, x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))
