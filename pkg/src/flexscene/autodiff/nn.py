"""Parameters, module containers and the transformer building blocks."""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .tensor import DTYPE, DiffArray


class Parameter(DiffArray):
    """A trainable leaf. ``name`` is filled in by the owning module tree."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def init_uniform(shape, fan_in: int, seed: int, name: str) -> np.ndarray:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), keyed on (seed, name).

    Keying on the parameter path makes values independent of construction order.
    """
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    """Minimal container: parameters and submodules are discovered by attribute."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_frozen(self, frozen: bool):
        for p in self.parameters():
            p.frozen = frozen

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name in own:
                if own[name].shape != tuple(arr.shape):
                    raise T.ShapeError(f"{name}: checkpoint {arr.shape} vs model {own[name].shape}")
                own[name].data = np.array(arr, dtype=DTYPE)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(shape, fan_in, seed, name, fill=None) -> Parameter:
    if fill is not None:
        return Parameter(np.full(shape, fill, dtype=DTYPE), name)
    return Parameter(init_uniform(shape, fan_in, seed, name), name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str, bias: bool = True):
        self.weight = _param((d_in, d_out), d_in, seed, name + ".weight")
        self.bias = _param((d_out,), d_in, seed, name + ".bias") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, name: str, eps: float = 1e-5):
        self.gain = _param((d,), d, 0, name + ".gain", fill=1.0)
        self.bias = _param((d,), d, 0, name + ".bias", fill=0.0)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, seed: int, name: str):
        self.fc1 = Linear(d_in, d_hidden, seed, name + ".fc1")
        self.fc2 = Linear(d_hidden, d_out, seed, name + ".fc2")

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: DiffArray, heads: int) -> DiffArray:
    *lead, s, d = x.shape
    if d % heads:
        raise T.ShapeError(f"width {d} not divisible by {heads} heads")
    return x.reshape(*lead, s, heads, d // heads).swapaxes(-2, -3)


def merge_heads(x: DiffArray) -> DiffArray:
    *lead, h, s, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, s, h * dh)


def attention(q, k, v, mask=None, heads: int = 1, return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    ``q``: (..., Sq, D); ``k``/``v``: (..., Sk, D); ``mask``: (Sq, Sk) booleans
    (True = may attend) or None for all-allow. Returns (..., Sq, D), and the
    (..., heads, Sq, Sk) weights when ``return_weights``.
    """
    q, k, v = T._wrap(q), T._wrap(k), T._wrap(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise T.ShapeError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"k/v lengths differ: {k.shape} vs {v.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise T.ShapeError(f"mask {mask.shape} vs query/key lengths {q.shape[-2]}/{k.shape[-2]}")
    dh = q.shape[-1] // heads
    qh = split_heads(q, heads) * (1.0 / math.sqrt(dh))
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    w = T.masked_softmax(T.matmul(qh, kh.swapaxes(-1, -2)), mask)
    out = merge_heads(T.matmul(w, vh))
    return (out, w) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, seed: int, name: str, d_kv: int | None = None):
        d_kv = d if d_kv is None else d_kv
        self.wq = Linear(d, d, seed, name + ".wq")
        self.wk = Linear(d_kv, d, seed, name + ".wk")
        self.wv = Linear(d_kv, d, seed, name + ".wv")
        self.wo = Linear(d, d, seed, name + ".wo")
        self.heads = heads
        self.record = None  # set to a list to capture attention weights

    def __call__(self, x, context=None, mask=None):
        context = x if context is None else context
        out, w = attention(self.wq(x), self.wk(context), self.wv(context), mask,
                           self.heads, return_weights=True)
        if self.record is not None:
            self.record.append(w.data.copy())
        return self.wo(out)


class Block(Module):
    """Pre-norm transformer block: x + attn(LN x), then x + mlp(LN x)."""

    def __init__(self, d: int, heads: int, seed: int, name: str, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d, name + ".ln1")
        self.attn = MultiHeadAttention(d, heads, seed, name + ".attn")
        self.ln2 = LayerNorm(d, name + ".ln2")
        self.mlp = MLP(d, mlp_ratio * d, d, seed, name + ".mlp")

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


class CrossBlock(Module):
    """Pre-norm block whose queries attend only to a fixed context."""

    def __init__(self, d: int, heads: int, seed: int, name: str, mlp_ratio: int = 4):
        self.ln_q = LayerNorm(d, name + ".ln_q")
        self.ln_kv = LayerNorm(d, name + ".ln_kv")
        self.attn = MultiHeadAttention(d, heads, seed, name + ".attn")
        self.ln2 = LayerNorm(d, name + ".ln2")
        self.mlp = MLP(d, mlp_ratio * d, d, seed, name + ".mlp")

    def __call__(self, x, context):
        x = x + self.attn(self.ln_q(x), context=self.ln_kv(context))
        return x + self.mlp(self.ln2(x))


class Embedding(Module):
    def __init__(self, n: int, d: int, seed: int, name: str):
        self.table = _param((n, d), d, seed, name + ".table")

    def __call__(self, ids):
        return T.embedding(self.table, ids)
