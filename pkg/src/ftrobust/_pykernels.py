"""Pure-numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is not built or ``FTROBUST_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximate GELU and its derivative, elementwise."""
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return out, deriv


def layer_norm_fwd(x: np.ndarray, gain, bias, eps: float):
    """Row-wise normalisation of a 2-D array; returns (out, xhat, inv_std)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain if gain is not None else xhat.copy()
    if bias is not None:
        out += bias
    return out, xhat, inv[:, 0]


def layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain):
    """Gradients (dx, dgain, dbias) of row-wise layer norm."""
    dxhat = g * gain if gain is not None else g
    dx = inv[:, None] * (dxhat - dxhat.mean(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gaussian_linear_mc(rng: np.random.Generator, w: np.ndarray, eta: float, p: float,
                       n: int, chunk: int = 65536) -> int:
    """Count of correct sign-classifications by ``w`` over ``n`` fresh Gaussian-feature samples.

    Draw order per chunk of c samples: c label uniforms, c robust-feature
    uniforms, then c*d standard normals row by row. The compiled kernel
    consumes the bit stream in exactly this order.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    d = w.shape[0] - 1
    correct = 0
    done = 0
    while done < n:
        c = min(chunk, n - done)
        y = np.where(rng.random(c) < 0.5, 1.0, -1.0)
        x1 = np.where(rng.random(c) < p, y, -y)
        z = rng.standard_normal((c, d))
        score = w[0] * x1 + z @ w[1:] + eta * y * w[1:].sum()
        correct += int(np.count_nonzero(score * y > 0))
        done += c
    return correct


def pareto_mask(acc: np.ndarray, rob: np.ndarray) -> np.ndarray:
    """Boolean mask of the non-dominated points; exact duplicates keep one representative."""
    order = np.lexsort((np.arange(len(acc)), -rob, -acc))
    mask = np.zeros(len(acc), dtype=bool)
    best = -np.inf
    for i in order:
        if rob[i] > best:
            mask[i] = True
            best = rob[i]
    return mask


def frontier_auc(acc: np.ndarray, rob: np.ndarray) -> float:
    """Area under an endpoint-extended frontier given in ascending-accuracy order."""
    if len(acc) == 0:
        return 0.0
    area = acc[0] * rob[0]
    for i in range(1, len(acc)):
        area += (acc[i] - acc[i - 1]) * (rob[i] + rob[i - 1]) * 0.5
    return float(area)
