"""AdamW with decoupled weight decay and the warmup + cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DTYPE


class ConfigError(ValueError):
    pass


def lr_schedule(step: int, warmup: int, peak: float, total: int) -> float:
    """Linear ramp 0 -> ``peak`` over ``warmup`` steps, cosine to 0 at ``total``."""
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total steps ({total})")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    decay = total - warmup
    if decay == 0:
        return peak
    frac = (step - warmup) / decay
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """AdamW (Loshchilov & Hutter) over a list of ``Parameter``.

    Frozen parameters are skipped entirely: no value change, no moment update.
    """

    def __init__(self, params, lr: float = 4e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {id(p): np.zeros(p.shape, DTYPE) for p in self.params}
        self.v = {id(p): np.zeros(p.shape, DTYPE) for p in self.params}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        live = [p for p in self.params if not p.frozen]
        missing = [p.name for p in live if p.grad is None]
        if missing:
            raise RuntimeError(f"missing grad on unfrozen parameter(s): {missing[:5]}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in live:
            g = p.grad
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(DTYPE)
        for p in self.params:
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        """Moments keyed by parameter name, plus the step count."""
        out = {"step": np.array([self.t], dtype=DTYPE)}
        for p in self.params:
            out[f"m/{p.name}"] = self.m[id(p)].copy()
            out[f"v/{p.name}"] = self.v[id(p)].copy()
        return out

    def load_state(self, state: dict):
        self.t = int(state["step"][0])
        for p in self.params:
            self.m[id(p)] = np.array(state[f"m/{p.name}"], dtype=DTYPE)
            self.v[id(p)] = np.array(state[f"v/{p.name}"], dtype=DTYPE)
