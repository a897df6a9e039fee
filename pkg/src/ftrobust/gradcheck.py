"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(max|a|, max|n|, floor), one number per tensor."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    h: float = 1e-5) -> float:
    """Largest relative error between backward() and finite differences over all inputs.

    ``build`` maps leaf tensors to a scalar loss; it is re-run on raw arrays for
    the numeric side, so it must not keep state between calls.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)
    worst = 0.0

    def f():
        return float(build([Tensor(x.data) for x in leaves]).data)

    for leaf in leaves:
        num = numeric_grad(f, leaf.data, h)
        worst = max(worst, relative_error(leaf.grad, num))
    return worst
