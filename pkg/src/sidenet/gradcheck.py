"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, fresh_tape, no_grad


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place.

    Evaluations run under ``no_grad``: only values are needed.
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = float(f().data.sum())
            flat[i] = orig - h
            fm = float(f().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-7) -> float:
    """max |a - n| / max(|a|, |n|); 0 when both sides are below ``zero_tol`` (a vanishing gradient)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale < zero_tol:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5
) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients per tensor.

    ``f`` must rebuild the scalar loss from scratch on every call. Keys are the
    tensors' names, or their position when unnamed.
    """
    for t in tensors:
        t.grad = None
    with fresh_tape():
        loss = f()
        backward(loss)
    errors = {}
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(f, t, h)
        errors[t.name or str(i)] = relative_error(analytic, numeric)
    return errors
