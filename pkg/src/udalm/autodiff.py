"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back to them. ``backward`` walks
the graph once in reverse topological order, accumulating gradients
additively where a tensor fans out.

Only the operators needed by the encoder and its losses are provided.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

IGNORE_INDEX = -100

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes it cannot combine."""

    def __init__(self, op: str, node_id: int, shapes: Sequence[tuple]):
        self.op = op
        self.node_id = node_id
        self.shapes = tuple(shapes)
        super().__init__(f"{op}: incompatible shapes {list(self.shapes)} at node {node_id}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op: str, parents: tuple, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite output")
    return Tensor(data, needs, op=op, parents=parents if needs else (),
                  backward=backward_fn if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", next(_node_ids), [a.shape, b.shape]) from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", next(_node_ids), [a.shape, b.shape]) from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, "gelu", (a,), bw)


def grad_reverse(a: Tensor, lambda_d: float) -> Tensor:
    """Identity on the forward pass; multiplies the upstream gradient by -lambda_d."""
    if lambda_d < 0:
        raise ValueError(f"lambda_d must be >= 0, got {lambda_d}")
    scale = -float(lambda_d)
    return _result(a.data, "grad_reverse", (a,), lambda g: (scale * g,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", next(_node_ids), [a.shape, tuple(shape)]) from None
    return _result(data, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.array(data, copy=True), "getitem", (a,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` (V, H) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError("embedding", next(_node_ids), [weight.shape, ids.shape])
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _result(weight.data[ids], "embedding", (weight,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", next(_node_ids), [a.shape, b.shape])
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", next(_node_ids), [a.shape, b.shape]) from None

    if b.ndim == 2:
        # flatten leading dims of a so the weight gradient is one GEMM
        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), "sum", (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), "mean", (a,),
                   lambda g: (np.full(a.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# normalisation and probabilities


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", next(_node_ids), [x.shape, gain.shape, bias.shape])
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    h = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, h)
        return gx, (flat_g * xhat.reshape(-1, h)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), bw)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable, truthy = keep) removes entries before
    normalisation; removed entries get probability exactly 0 and no
    gradient. Every row must keep at least one entry.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, "softmax", (x,), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy over rows whose target is not ``ignore_index``.

    Returns 0 (with zero gradient) when every row is ignored.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", next(_node_ids), [logits.shape, targets.shape])
    keep = targets != ignore_index
    count = int(keep.sum())
    if count and (targets[keep].min() < 0 or targets[keep].max() >= logits.shape[1]):
        raise IndexError("cross_entropy: target out of range")
    logp = log_softmax_np(logits.data)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum() / count if count else 0.0

    def bw(g):
        out = np.zeros_like(logits.data)
        if count:
            out[rows] = np.exp(logp[rows])
            out[rows, targets[rows]] -= 1.0
            out *= float(g) / count
        return (out,)

    return _result(np.asarray(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass


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
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; interior gradients are freed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return one gradient per named parameter (zeros if unreached)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def parameters(arrays: dict[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Wrap raw arrays as fresh leaf tensors that require grad."""
    names = arrays.keys() if names is None else names
    return {n: Tensor(arrays[n], requires_grad=True) for n in names}
