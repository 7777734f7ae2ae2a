"""Central finite-difference gradient checking.

The checked function may return any shape; it is contracted with a fixed
random cotangent in float64 so summation noise does not swamp the f32
differences.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, no_grad


def _project(out, w) -> float:
    return float(np.sum(out.data.astype(np.float64) * w))


def numeric_grad(fn, x, w, eps: float = 1e-3, entries=None) -> np.ndarray:
    """FD gradient of <fn(), w> with respect to ``x.data`` at ``entries`` (flat indices)."""
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    g = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in entries:
            orig = flat[i]
            flat[i] = orig + DTYPE(eps)
            hi = _project(fn(), w)
            flat[i] = orig - DTYPE(eps)
            lo = _project(fn(), w)
            flat[i] = orig
            # actual step after f32 rounding
            step = float(DTYPE(orig + DTYPE(eps))) - float(DTYPE(orig - DTYPE(eps)))
            g[i] = (hi - lo) / step
    return g.reshape(x.shape)


def gradcheck(fn, inputs, eps: float = 1e-2, rtol: float = 1e-2, floor: float = 1e-2,
              max_entries: int | None = None, seed: int = 0) -> dict:
    """Compare reverse-mode and finite-difference gradients for ``inputs``.

    Per-entry relative error is |a - n| / max(|a|, |n|, floor). Returns a
    report with ``ok`` and ``max_rel_err``; ``max_entries`` samples a random
    subset of coordinates per input.
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.grad = None
    out = fn()
    w = rng.standard_normal(out.shape)
    out.backward(w.astype(DTYPE))
    worst, worst_abs = 0.0, 0.0
    per_input = []
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
        n = x.size
        if max_entries is not None and n > max_entries:
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = np.arange(n)
        numeric = numeric_grad(fn, x, w, eps, entries)
        a = analytic.reshape(-1)[entries]
        b = numeric.reshape(-1)[entries]
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        per_input.append(float(rel.max()) if rel.size else 0.0)
        worst = max(worst, per_input[-1])
        worst_abs = max(worst_abs, float(np.abs(a - b).max()) if rel.size else 0.0)
    return {"ok": worst < rtol, "max_rel_err": worst, "max_abs_err": worst_abs, "per_input": per_input}
