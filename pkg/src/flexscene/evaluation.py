"""minADE_k metrics, the constant-velocity comparator, throughput benchmarking and sweep CSVs."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import DrivingModel, make_batch

BUCKET_SECONDS = (0.5, 1.0, 3.0, 5.0)


def min_ade(preds, gt, horizon_steps: int | None = None) -> float:
    """min over samples of the mean L2 error over the first ``horizon_steps`` waypoints."""
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise ValueError(f"predictions must be a non-empty (k, H, 2) array, got {preds.shape}")
    H = gt.shape[0]
    n = H if horizon_steps is None else horizon_steps
    if not 1 <= n <= H or preds.shape[1] < n:
        raise ValueError(f"horizon_steps {n} outside [1, {H}]")
    err = np.sqrt(((preds[:, :n] - gt[None, :n]) ** 2).sum(-1)).mean(-1)
    return float(err.min())


def bucket_steps(waypoint_dt: float = 0.5, seconds=BUCKET_SECONDS) -> list:
    steps = []
    for s in seconds:
        n = s / waypoint_dt
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(f"bucket {s}s is not a whole number of {waypoint_dt}s waypoints")
        steps.append(int(round(n)))
    return steps


def constant_velocity_baseline(history, horizon: int = 10, waypoint_dt: float = 0.5,
                               frame_dt: float = 0.25) -> np.ndarray:
    """Extrapolate the last observed ego-frame velocity; (h, >=2) history -> (horizon, 2)."""
    h = np.asarray(history, dtype=np.float64)
    if h.shape[0] < 2:
        raise ValueError("constant-velocity extrapolation needs >= 2 history states")
    v = (h[-1, :2] - h[-2, :2]) / frame_dt
    t = np.arange(1, horizon + 1)[:, None] * waypoint_dt
    return h[-1, :2] + v * t


@dataclass
class EvalReport:
    minade6: float
    buckets: dict  # "0.5s" -> minADE
    clips: int
    throughput: float | None = None
    throughput_std: float | None = None
    config_hash: str | None = None
    k: int = 6
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def report_from_errors(per_clip: np.ndarray, waypoint_dt: float, **kw) -> EvalReport:
    """``per_clip``: (clips, buckets) minADE values."""
    means = per_clip.mean(axis=0) if len(per_clip) else np.full(len(BUCKET_SECONDS), np.nan)
    buckets = {f"{s}s": float(m) for s, m in zip(BUCKET_SECONDS, means)}
    return EvalReport(minade6=float(np.mean(means)), buckets=buckets, clips=len(per_clip), **kw)


def bucket_errors(preds, gt, steps) -> np.ndarray:
    return np.array([min_ade(preds, gt, n) for n in steps])


def evaluate(model: DrivingModel, clips, k: int = 6, temperature: float = 1.0, seed: int = 0,
             batch_size: int = 8) -> EvalReport:
    """minADE_k on the final observed frame of every clip."""
    cfg = model.cfg
    steps = bucket_steps(cfg.waypoint_dt)
    rng = np.random.default_rng([seed, 0xE7])
    errs = []
    clips = list(clips)
    for i in range(0, len(clips), batch_size):
        b = make_batch(clips[i:i + batch_size], cfg)
        preds = model.sample(b.images, b.histories, k, temperature, rng)
        for j in range(len(b)):
            errs.append(bucket_errors(preds[j], b.futures[j, -1], steps))
    return report_from_errors(np.array(errs), cfg.waypoint_dt, config_hash=cfg.hash(), k=k)


def evaluate_constant_velocity(clips, horizon: int = 10, waypoint_dt: float = 0.5,
                               frame_dt: float = 0.25) -> EvalReport:
    steps = bucket_steps(waypoint_dt)
    errs = []
    for c in clips:
        pred = constant_velocity_baseline(c.history, horizon, waypoint_dt, frame_dt)
        errs.append(bucket_errors(pred[None], c.future, steps))
    return report_from_errors(np.array(errs), waypoint_dt, k=1)


def throughput_bench(model: DrivingModel, clips, warmup_iters: int = 1, timed_iters: int = 3,
                     batch_size: int = 4, reps: int = 5):
    """Inference clips/s (encoder + greedy rollout + detokenisation), data prepared up front.

    Returns (mean, std) over ``reps`` repetitions of ``timed_iters`` batches.
    """
    clips = list(clips)
    need = (warmup_iters + timed_iters) * batch_size
    if len(clips) < need:
        clips = [clips[i % len(clips)] for i in range(need)]
    batches = [make_batch(clips[i * batch_size:(i + 1) * batch_size], model.cfg)
               for i in range(warmup_iters + timed_iters)]
    for b in batches[:warmup_iters]:
        model.sample(b.images, b.histories, 1, 0.0)
    rates = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for b in batches[warmup_iters:]:
            model.sample(b.images, b.histories, 1, 0.0)
        rates.append(timed_iters * batch_size / (time.perf_counter() - t0))
    return float(np.mean(rates)), float(np.std(rates))


# ---- sweep outputs ---------------------------------------------------------

SWEEP_FIELDS = ("axis", "value", "repr", "variant", "interleave", "K", "enc_layers", "cameras",
                "patch_depth", "scene_tokens", "minade6", "clips_per_s", "clips_per_s_std", "status")


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def pareto_front(rows) -> list:
    """Rows not dominated in (lower minade6, higher clips_per_s)."""
    ok = [r for r in rows if r.get("status") == "ok"]
    front = []
    for r in ok:
        dominated = any(o is not r and o["minade6"] <= r["minade6"] and o["clips_per_s"] >= r["clips_per_s"]
                        and (o["minade6"] < r["minade6"] or o["clips_per_s"] > r["clips_per_s"])
                        for o in ok)
        if not dominated:
            front.append(r)
    return sorted(front, key=lambda r: r["clips_per_s"])


def write_pareto_csv(path, rows) -> None:
    write_sweep_csv(path, pareto_front(rows))
