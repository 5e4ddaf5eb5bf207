"""Central finite-difference gradient checking (double precision)."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, weights: Optional[np.ndarray] = None,
                   h: float = 1e-5) -> np.ndarray:
    """d/dt of ``sum(weights * fn())`` by central differences."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().data
        flat[i] = orig - h
        down = fn().data
        flat[i] = orig
        diff = up - down if weights is None else (up - down) * weights
        out[i] = float(np.sum(diff)) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients (e.g. an
    attention key bias, which softmax ignores) from comparing round-off to round-off."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    seed: int = 0) -> float:
    """Worst norm-wise relative error between tape and finite-difference gradients.

    ``fn`` rebuilds the graph from ``inputs`` on each call. Non-scalar outputs
    are contracted with a fixed random vector so every output element counts.
    Inputs must be float64.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = fn()
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(weights)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, weights, h)))
    return worst
