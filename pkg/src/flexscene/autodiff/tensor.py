"""Reverse-mode differentiable array on top of numpy (float32 only).

Every op returns a new ``DiffArray`` that remembers its parents and a closure
which pushes the output gradient back into them. ``backward`` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer math)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Operand extents do not line up for the requested op."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, DiffArray):
        return x.data
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class DiffArray:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph --------------------------------------------------------------
    def _accumulate(self, g: np.ndarray, owned: bool = False):
        # owned: g is a fresh temporary nobody else holds, so it can be adopted without a copy
        if self.grad is None:
            if owned and g.dtype == DTYPE and g.shape == self.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this array; scalars get an implicit seed of 1."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on an array that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones(self.shape, dtype=DTYPE)
        order = _topo_order(self)
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    # ndarray <op> DiffArray must dispatch to the reflected method below
    __array_ufunc__ = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _topo_order(root: DiffArray) -> list:
    # iterative DFS; deep transformer graphs overflow the recursion limit
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _wrap(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(data, parents, backward) -> DiffArray:
    parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and parents:
        return DiffArray(data, True, parents, backward)
    return DiffArray(data)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> DiffArray:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def power(a, p: float) -> DiffArray:
    a = _wrap(a)

    def bw(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _result(a.data ** p, (a,), bw)


def exp(a) -> DiffArray:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * out))


def log(a) -> DiffArray:
    a = _wrap(a)
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def tanh(a) -> DiffArray:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def relu(a) -> DiffArray:
    a = _wrap(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0).astype(DTYPE), (a,), lambda g: a._accumulate(g * pos))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> DiffArray:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accumulate(g * d, owned=True)

    return _result(out, (a,), bw)


# -- reductions / shape ------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> DiffArray:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> DiffArray:
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> DiffArray:
    a = _wrap(a)
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None) -> DiffArray:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv)))


def getitem(a, idx) -> DiffArray:
    a = _wrap(a)
    out = a.data[idx]

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _result(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(arrays, axis=0) -> DiffArray:
    arrays = [_wrap(x) for x in arrays]
    out = np.concatenate([x.data for x in arrays], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def bw(g):
        for x, lo, hi in zip(arrays, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _result(out, arrays, bw)


def embedding(table, ids) -> DiffArray:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return _result(out, (table,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> DiffArray:
    """Batched matrix product with numpy broadcasting on leading extents."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # shared left operand: fold batch extents into one GEMM
                gb = np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:])
                ga = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2]).T @ \
                    np.swapaxes(gb, -1, -2).reshape(-1, b.shape[-2])
                a._accumulate(ga, owned=True)
            else:
                a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), owned=True)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # shared weight: one (d_in, rows) @ (rows, d_out) product
                ab = np.broadcast_to(a.data, g.shape[:-1] + a.shape[-1:])
                b._accumulate(ab.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]), owned=True)
            else:
                b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), owned=True)

    return _result(out, (a, b), bw)


# -- fused normalisation / probability ops -------------------------------------

class MaskError(ValueError):
    """A softmax row has no allowed position."""


def masked_softmax(logits, mask=None) -> DiffArray:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    Disallowed positions come out as exact zeros. A row with nothing allowed
    raises instead of producing NaN.
    """
    logits = _wrap(logits)
    x = logits.data
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError(f"mask {mask.shape} not broadcastable to logits {x.shape}") from None
        if not mask.any(axis=-1).all():
            raise MaskError("fully-masked softmax row")
        m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0).astype(DTYPE)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)), owned=True)

    return _result(p, (logits,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx, owned=True)

    return _result(out, (x, gain, bias), bw)


def cross_entropy(logits, targets) -> DiffArray:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` rows."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f"{x.shape[0]} logit rows vs {t.shape[0]} targets")
    # float64 accumulation keeps the uniform case exactly ln(V)
    x64 = x.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x64 - m).sum(axis=-1))
    nll = lse - x64[np.arange(len(t)), t]
    out = np.asarray(nll.mean(), dtype=DTYPE)

    def bw(g):
        p = np.exp(x64 - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        logits._accumulate((p * (float(g) / len(t))).astype(DTYPE).reshape(logits.shape))

    return _result(out, (logits,), bw)
