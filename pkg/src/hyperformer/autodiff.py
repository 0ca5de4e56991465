"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to input gradients.  ``Tensor.backward`` walks the recorded graph in
reverse topological order, so each node is visited exactly once; only leaf
tensors created with ``requires_grad=True`` receive a ``.grad``.

Broadcasting is intentionally narrow: elementwise ``add``/``mul`` accept either
identical shapes or a 1-D right operand matching the last axis (bias-add and
per-feature scale).  Everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

EPS = 1e-6

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every participating leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        for leaf, g in _propagate(self, np.asarray(grad, dtype=np.float64)):
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def _propagate(root: Tensor, seed: np.ndarray) -> Iterable[Tuple[Tensor, np.ndarray]]:
    if not root.requires_grad:
        return []
    order = _topo_order(root)
    grads = {id(root): seed}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves.append((node, g))
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs the output does not depend on come back as ``None``.
    """
    found = {id(t): g for t, g in _propagate(output, np.ones_like(output.data))}
    return [found.get(id(t)) for t in inputs]


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_rhs(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a last-axis vector to be broadcast over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to_last(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_rhs(a, b, "add")

    def backward(g):
        return g, (_reduce_to_last(g) if vec else g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_rhs(a, b, "sub")

    def backward(g):
        return g, -(_reduce_to_last(g) if vec else g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    vec = _check_rhs(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_to_last(gb) if vec else gb)

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x) with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or stacks with identical leading extents."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a ``[k, n]`` weight to the last axis of ``x[..., k]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2

    return _result(xd @ wd, (x, w), backward, "linear")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Gather rows along axis 0; ``index`` may have any integer shape."""
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + src[1:]))
        return (out,)

    return _result(x.data[idx], (x,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in xs]
    ax = axis % datas[0].ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate(datas, axis=ax), tuple(xs), backward, "concat")


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    src, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(src, float(g) / n),), "mean")


# ---------------------------------------------------------------------------
# normalisation and losses


def layer_norm_stats(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-position mean and population standard deviation over the last axis."""
    mu = x.data.mean(axis=-1)
    sigma = x.data.std(axis=-1)
    return Tensor(mu), Tensor(sigma)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    """gamma * (x - mean) / sqrt(var + eps) + beta over the last axis."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({h},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _reduce_to_last(g * xhat), _reduce_to_last(g)

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where entries are allowed."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax")


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = 0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects [n, V] logits")
    n, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != n:
        raise ValueError(f"expected {n} targets, got {tgt.shape[0]}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of size {v}")
    keep = np.ones(n, dtype=bool) if ignore_index is None else tgt != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("no non-padding targets")
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, tgt]
    loss = nll[keep].sum() / count

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tgt] -= 1.0
        p *= (keep / count)[:, None]
        return (p * g,)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")
