"""Central finite-difference gradient checks.

The numeric side evaluates the forward in float64 with the tape disabled, so
it never touches the backward closures it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad, precision, reset_tape


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-6,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """d fn() / d param by central differences, entry by entry.

    ``fn`` must read ``param.data`` when called. If ``indices`` is given only
    those entries are perturbed and a flat array in that order is returned.
    """
    base = param.data
    work = base.astype(np.float64, copy=True)
    param.data = work
    idx = list(np.ndindex(base.shape)) if indices is None else list(indices)
    out = np.empty(len(idx))
    try:
        with no_grad(), precision("f64"):
            for n, i in enumerate(idx):
                old = work[i]
                work[i] = old + h
                fp = float(fn().data)
                work[i] = old - h
                fm = float(fn().data)
                work[i] = old
                out[n] = (fp - fm) / (2 * h)
    finally:
        param.data = base
    return out.reshape(base.shape) if indices is None else out


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    reset_tape()
    loss = fn()
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> list[float]:
    """Relative error of autodiff vs finite differences, one value per param."""
    grads = analytic_grads(fn, params)
    return [rel_error(g, numeric_grad(fn, p, h)) for g, p in zip(grads, params)]
