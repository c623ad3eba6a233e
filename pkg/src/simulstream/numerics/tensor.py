"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op lives here as a plain function that computes its forward value with
numpy and, when any input requires gradients, records a closure that maps the
output gradient back onto the inputs.  Broadcasting is limited to a leading
batch prefix: two operands must either share a shape or one shape must be a
suffix of the other.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only defined by scalars")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap an op result, attaching it to the graph when needed.

    ``grad_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Public hook for kernels defined outside this module (e.g. CTC)."""
    return _result(np.asarray(data, dtype=DTYPE), parents, grad_fn)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------ shape checks


def _suffix_bcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) == 0 or big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b} (only leading-batch broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# --------------------------------------------------------- elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_bcast(a.shape, b.shape, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_bcast(a.shape, b.shape, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_bcast(a.shape, b.shape, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _result(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last dimension must be even, got {x.shape}")
    a, b = x.data[..., : d // 2], x.data[..., d // 2:]
    s = 0.5 * (1.0 + np.tanh(0.5 * b))

    def grad(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return _result(a * s, (x,), grad)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is 1 with ``value``; mask broadcasts numpy-style."""
    m = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(m.shape, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {m.shape} does not broadcast to {x.shape}") from None
    return _result(np.where(m, value, x.data), (x,), lambda g: (np.where(m, 0.0, g),))


# ----------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a`` (..., m, k) times ``b`` (k, n) or (..., k, n) with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def index(x: Tensor, idx) -> Tensor:
    """Numpy-style indexing; fancy indices scatter-add on the way back."""
    out = x.data[idx]
    basic = _is_basic(idx)

    def grad(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(out, dtype=DTYPE), (x,), grad)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, xs[0].shape)) if k != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=ax), xs,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim

    def grad(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return _result(np.take(x.data, idx, axis=ax), (x,), grad)


# ------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), grad)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / float(n))


# -------------------------------------------------------- normalizations


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean (True = keep) and broadcasts numpy-style against ``x``;
    dropped positions get exactly zero weight.  Every row must keep at least
    one position.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def grad(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def grad(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), grad)


# ------------------------------------------------------------ convolution


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor, tap_mask) -> Tensor:
    """Masked depthwise 1-D convolution along time.

    x: (B, T, D); w: (K, D) with K odd; b: (D,).
    tap_mask: (T, K) or (B, T, K) of {0,1}; tap k of output t reads input
    t + k - (K-1)/2 and contributes only where the mask is 1.  Out-of-range
    taps must be masked by the caller.
    """
    B, T, D = x.shape
    K = w.shape[0]
    if x.ndim != 3 or w.shape != (K, D) or b.shape != (D,) or K % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    m = np.asarray(tap_mask, dtype=DTYPE)
    if m.ndim == 2:
        m = m[None]
    if m.shape[1:] != (T, K) or m.shape[0] not in (1, B):
        raise ShapeError(f"depthwise_conv1d: tap mask {m.shape} vs (B,T,K)=({B},{T},{K})")
    h = K // 2
    xp = np.zeros((B, T + 2 * h, D))
    xp[:, h:h + T] = x.data
    out = np.broadcast_to(b.data, (B, T, D)).copy()
    for k in range(K):
        out += xp[:, k:k + T] * (m[:, :, k:k + 1] * w.data[k])

    def grad(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gm = g * m[:, :, k:k + 1]
            gxp[:, k:k + T] += gm * w.data[k]
            gw[k] = (gm * xp[:, k:k + T]).reshape(-1, D).sum(axis=0)
        return gxp[:, h:h + T], gw, g.reshape(-1, D).sum(axis=0)

    return _result(out, (x, w, b), grad)


# --------------------------------------------------------------- lookups


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    return take(table, ids, axis=0)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of -log softmax(logits)[target] over all leading positions.

    logits: (..., V); targets/weights: (...).  Zero weights drop positions.
    """
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    wts = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -(wts * picked).sum()

    def grad(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return (g * wts[..., None] * (p - onehot),)

    return _result(np.asarray(loss), (logits,), grad)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
