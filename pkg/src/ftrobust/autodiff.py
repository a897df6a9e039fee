"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to one gradient per input.
``backward`` walks the recorded graph once in reverse topological order.

Broadcasting is deliberately narrow. ``add``/``sub``/``mul`` accept equal
shapes or a scalar operand. The only other broadcasts are explicit:
``add_trailing``/``mul_trailing`` (operand matches the trailing shape) and
``linear`` (weight shared across leading axes).

Gradients accumulate: calling ``backward`` twice without ``zero_grad`` adds
the second pass onto the first.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, RankError

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires one."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node))
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    out, deriv = kernels.gelu_fwd(x.data)
    return _node(out, (x,), lambda g: (g * deriv,), "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _check_trailing(x: Tensor, y: Tensor, name: str) -> int:
    if y.ndim > x.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise DimensionError(f"{name}: {y.shape} is not a trailing shape of {x.shape}")
    return x.ndim - y.ndim


def add_trailing(x: Tensor, y: Tensor) -> Tensor:
    """x + y where y.shape equals the trailing dimensions of x."""
    lead = _check_trailing(x, y, "add_trailing")
    axes = tuple(range(lead))
    return _node(x.data + y.data, (x, y), lambda g: (g, g.sum(axis=axes)), "add_trailing")


def mul_trailing(x: Tensor, y: Tensor) -> Tensor:
    """x * y where y.shape equals the trailing dimensions of x."""
    lead = _check_trailing(x, y, "mul_trailing")
    axes = tuple(range(lead))
    xd, yd = x.data, y.data
    return _node(xd * yd, (x, y), lambda g: (g * yd, (g * xd).sum(axis=axes)), "mul_trailing")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank > 2 operands must share identical leading (batch) dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable matrices")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _node(ad @ bd, (a, b), rule, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., i] @ w[i, o] (+ b[o]); the weight is shared across all leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, rule, "linear")


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product: out[i*r + u, j*s + v] = a[i, j] * b[u, v]."""
    if a.ndim != 2 or b.ndim != 2:
        raise RankError(f"kron needs two matrices, got ranks {a.ndim} and {b.ndim}")
    p, q = a.shape
    r, s = b.shape
    ad, bd = a.data, b.data
    out = np.einsum("ij,uv->iujv", ad, bd).reshape(p * r, q * s)

    def rule(g):
        g4 = g.reshape(p, r, q, s)
        return np.einsum("iujv,uv->ij", g4, bd), np.einsum("iujv,ij->uv", g4, ad)

    return _node(out, (a, b), rule, "kron")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, key) -> Tensor:
    src_shape = x.shape

    def rule(g):
        full = np.zeros(src_shape)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(x.data[key]), (x,), rule, "getitem")


def prepend_token(x: Tensor, token: Tensor) -> Tensor:
    """Insert ``token`` (shape [D]) at sequence position 0 of every item in x [B, S, D]."""
    if x.ndim != 3 or token.shape != (x.shape[2],):
        raise DimensionError(f"prepend_token: token {token.shape} does not fit sequence {x.shape}")
    bsz = x.shape[0]
    tok = np.broadcast_to(token.data, (bsz, 1, x.shape[2]))
    out = np.concatenate([tok, x.data], axis=1)
    return _node(out, (x, token), lambda g: (g[:, 1:], g[:, 0].sum(axis=0)), "prepend_token")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), rule, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, axis: int = -1) -> Tensor:
    """Normalise along ``axis`` (eps 1e-5), then apply the optional per-feature affine map."""
    ax = axis % x.ndim
    if ax != x.ndim - 1:
        perm = [i for i in range(x.ndim) if i != ax] + [ax]
        moved = layer_norm(transpose(x, perm), gain, bias, axis=-1)
        return transpose(moved, np.argsort(perm))
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (x.shape[-1],):
            raise DimensionError(f"layer_norm: {name} {p.shape} does not match feature dim {x.shape[-1]}")
    dim = x.shape[-1]
    gd = gain.data if gain is not None else None
    bd = bias.data if bias is not None else None
    out, xhat, inv = kernels.layer_norm_fwd(x.data.reshape(-1, dim), gd, bd, LN_EPS)

    def rule(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g.reshape(-1, dim), xhat, inv, gd)
        grads = [dx.reshape(x.shape)]
        if gain is not None:
            grads.append(dgain)
        if bias is not None:
            grads.append(dbias)
        return tuple(grads)

    parents = tuple(p for p in (x, gain, bias) if p is not None)
    return _node(out.reshape(x.shape), parents, rule, "layer_norm")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of [B, C] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    bsz = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(bsz)
    nll = -logp[rows, labels]
    scale = 1.0 / bsz if reduction == "mean" else 1.0

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) * scale),)

    return _node(np.asarray(nll.sum() * scale), (logits,), rule, "cross_entropy")
