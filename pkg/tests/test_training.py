import json
import math

import numpy as np
import pytest

from flexscene.autodiff import cross_entropy
from flexscene.config import RunConfig
from flexscene.model import DrivingModel, make_batch
from flexscene.patchify import ConfigError
from flexscene.policy import build_layout, causal_mask, prefix_rows
from flexscene.training import (
    AlignmentError,
    Trainer,
    TrainingError,
    batch_indices,
    interleaved_loss,
    load_training_state,
    train,
    write_manifest,
)

TINY = RunConfig(patch_size=16, d_enc=32, patch_heads=2, K=9, enc_layers=1, enc_heads=2, d_llm=32,
                 policy_layers=1, policy_heads=2, batch_size=4, stage1_steps=6, stage2_steps=2,
                 warmup=2, seed=3)


def param_bytes(module):
    return {n: p.data.tobytes() for n, p in module.named_parameters()}


# ---- loss -------------------------------------------------------------------------

def test_uniform_logits_give_ln_v():
    lay = build_layout("interleaved", "flex", 3, 2, 4)
    V = 1033
    logits = np.zeros((2, lay.total_len, V), np.float32)
    targets = np.random.default_rng(0).integers(0, 1024, (2, 3, 4))
    assert interleaved_loss(logits, lay, targets).data == np.float32(math.log(V))


def test_single_timestep_interleaved_equals_non_interleaved(rng):
    a = build_layout("interleaved", "flex", 1, 3, 4)
    b = build_layout("non_interleaved", "flex", 1, 3, 4)
    logits = rng.standard_normal((2, a.total_len, 50)).astype(np.float32)
    targets = rng.integers(0, 50, (2, 1, 4))
    assert a.total_len == b.total_len
    assert interleaved_loss(logits, a, targets).data == interleaved_loss(logits, b, targets).data


def test_non_interleaved_uses_only_the_final_span(rng):
    lay = build_layout("non_interleaved", "flex", 3, 2, 4)
    logits = rng.standard_normal((1, lay.total_len, 30)).astype(np.float32)
    targets = rng.integers(0, 30, (1, 3, 4))
    alt = targets.copy()
    alt[:, :2] = (alt[:, :2] + 1) % 30  # earlier steps are ignored
    assert interleaved_loss(logits, lay, targets).data == interleaved_loss(logits, lay, alt).data


def test_interleaved_loss_equals_mean_of_prefix_split_losses(clips):
    cfg = TINY
    model = DrivingModel(cfg)
    batch = make_batch(clips[:2], cfg)
    x, targets = model.packed(batch)
    lay = model.layout
    packed = interleaved_loss(model.policy(x, model.mask, model.positions), lay, targets)
    split = []
    for k in range(cfg.timesteps):
        rows = prefix_rows(lay, k)
        logits = model.policy(x[:, rows], causal_mask(len(rows)), model.positions[rows])
        H = cfg.horizon
        span = logits[:, len(rows) - H - 1:len(rows) - 1]
        split.append(float(cross_entropy(span.reshape(-1, span.shape[-1]), targets[:, k].reshape(-1)).data))
    assert abs(float(packed.data) - np.mean(split)) < 1e-5
    assert abs(float(model.loss(batch).data) - float(packed.data)) < 1e-6


def test_misaligned_targets_are_rejected(rng):
    lay = build_layout("interleaved", "flex", 3, 2, 4)
    logits = np.zeros((1, lay.total_len, 10), np.float32)
    with pytest.raises(AlignmentError):
        interleaved_loss(logits, lay, np.zeros((1, 2, 4), int))
    with pytest.raises(AlignmentError):
        interleaved_loss(logits, lay, np.zeros((1, 3, 5), int))
    with pytest.raises(AlignmentError):
        interleaved_loss(logits[:, :7], lay, np.zeros((1, 3, 4), int))


# ---- config ------------------------------------------------------------------------

def test_stage_two_lr_must_be_lower():
    with pytest.raises(ConfigError):
        RunConfig(lr1=1e-4, lr2=1e-3).validate()


def test_config_round_trip_and_unknown_keys(tmp_path):
    assert RunConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"depth_of_field": 3})


def test_batch_indices_depend_only_on_seed_and_step():
    pool = list(range(100))
    assert batch_indices(1, 5, pool, 8) == batch_indices(1, 5, pool, 8)
    assert batch_indices(1, 5, pool, 8) != batch_indices(1, 6, pool, 8)
    assert len(batch_indices(0, 0, [3, 4], 5)) == 5


# ---- training loop -----------------------------------------------------------------

def test_identical_seeds_give_bit_identical_first_losses(clips):
    a = Trainer(TINY, clips, train_indices=range(12))
    b = Trainer(TINY, clips, train_indices=range(12))
    for _ in range(2):
        assert a.train_step() == b.train_step()


def test_stage_one_keeps_patchifier_bit_exact_then_stage_two_moves_it(clips, tmp_path):
    tr = Trainer(TINY, clips, train_indices=range(12), out_dir=tmp_path)
    init = param_bytes(tr.model.patchifier)
    others = {n: p.data.copy() for n, p in tr.model.named_parameters() if not n.startswith("patchifier")}
    tr.run(until=TINY.stage1_steps)
    assert param_bytes(tr.model.patchifier) == init
    assert any(not np.array_equal(p.data, others[n]) for n, p in tr.model.named_parameters()
               if n in others)
    # the stage-1 checkpoint carries the untouched patchifier
    fresh = DrivingModel(TINY)
    load_training_state(tmp_path / "ckpt" / "stage1.ckpt", fresh)
    assert param_bytes(fresh.patchifier) == init
    tr.run()
    assert param_bytes(tr.model.patchifier) != init
    assert (tmp_path / "ckpt" / "stage2.ckpt").exists()


def test_metrics_log_fields_and_lr_shape(clips, tmp_path):
    train(TINY, clips, out_dir=tmp_path, train_indices=range(12))
    rows = [json.loads(line) for line in open(tmp_path / "metrics.jsonl")]
    assert [r["step"] for r in rows] == list(range(8))
    assert set(rows[0]) >= {"step", "loss", "lr", "clips_per_s"}
    lrs = [r["lr"] for r in rows]
    assert lrs[1] == pytest.approx(TINY.lr1)  # warmup peaks at step index 1
    assert lrs[6] == lrs[7] == TINY.lr2
    assert all(r["stage"] == (1 if r["step"] < 6 else 2) for r in rows)


def test_resume_reproduces_subsequent_losses_bit_exactly(clips, tmp_path):
    full = Trainer(TINY, clips, train_indices=range(12))
    losses = [full.train_step() for _ in range(8)]

    first = Trainer(TINY, clips, train_indices=range(12), out_dir=tmp_path)
    first.run(until=4)
    first.checkpoint("mid.ckpt")
    second = Trainer(TINY, clips, train_indices=range(12))
    second.resume(tmp_path / "ckpt" / "mid.ckpt")
    assert second.step == 4
    assert [second.train_step() for _ in range(4)] == losses[4:]


def test_resume_across_the_stage_boundary(clips, tmp_path):
    full = Trainer(TINY, clips, train_indices=range(12))
    losses = [full.train_step() for _ in range(8)]
    tr = Trainer(TINY, clips, train_indices=range(12), out_dir=tmp_path)
    tr.run(until=6)
    resumed = Trainer(TINY, clips, train_indices=range(12))
    resumed.resume(tmp_path / "ckpt" / "stage1.ckpt")
    assert [resumed.train_step() for _ in range(2)] == losses[6:]


def test_nan_loss_aborts_with_step(clips):
    tr = Trainer(TINY, clips, train_indices=range(12))
    tr.train_step()
    tr.model.policy.head.bias.data[0] = np.nan
    with pytest.raises(TrainingError, match="step 1"):
        tr.train_step()


def test_empty_training_split_is_an_error(clips):
    with pytest.raises(TrainingError):
        Trainer(TINY, clips, train_indices=[])


def test_manifest_holds_the_config_verbatim(tmp_path):
    path = write_manifest(tmp_path, "train", TINY, "abc123")
    m = json.loads(path.read_text())
    assert RunConfig.from_dict(m["config"]) == TINY
    assert m["seed"] == 3 and m["dataset_header_hash"] == "abc123" and m["config_hash"] == TINY.hash()
    assert write_manifest(tmp_path, "train", TINY, "abc123").read_bytes() == path.read_bytes()


def test_overfit_eight_clips(clips):
    cfg = TINY.updated(stage1_steps=500, stage2_steps=0, warmup=50, lr1=2e-3, lr2=1e-5)
    res = train(cfg, clips, train_indices=range(8))
    losses = np.array([l for _, l in res.losses])
    assert losses[-10:].mean() < 0.3 * losses[0]
    windows = losses[:500].reshape(10, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0)
