"""``flexscene`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error.

Artifacts live under --out-dir::

    manifest.json   effective config, seed, dataset header hash (written first)
    metrics.jsonl   train: step, stage, loss, lr, clips_per_s
    report.json     eval/bench: EvalReport
    sweep.csv       ablate: one row per point (see SWEEP_FIELDS)
    pareto.csv      ablate: rows on the minade6 / clips_per_s Pareto front
    attn/           analyze: FLEXATTN dump, responses.csv, curve.csv, maps/*.pgm|csv
    ckpt/           train: stage1.ckpt, stage2.ckpt (FLEXCKPT)
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .config import RunConfig
from .encoder import VARIANTS, AttentionDumpError
from .patchify import ConfigError
from .worldsim import ClipDataset, DatasetError, WorldConfig, clip_seed, generate_clip, write_dataset
from .worldsim.clip import ConfigError as WorldConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

CSV_HELP = """CSV schemas:
  sweep.csv / pareto.csv: axis,value,repr,variant,interleave,K,enc_layers,cameras,
                          patch_depth,scene_tokens,minade6,clips_per_s,clips_per_s_std,status
  attn/responses.csv:     token_index,mean_max_response,rank
  attn/curve.csv:         rank,mean_max_response   (non-increasing)
  trajectories.csv:       clip_id,sample_idx,step,x,y
Config files are flat JSON objects whose keys are RunConfig fields; flags override them."""

DEFAULT_GRIDS = {
    "tokens": "18,45,90,180",
    "layers": "1,2,4",
    "attention": ",".join(VARIANTS),
    "interleave": "baseline:interleave,baseline:non_interleave,flex:interleave,flex:non_interleave",
    "cameras": "1,2,4",
    "patchifier": "0,2,4",
}


class CliConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON RunConfig file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", help="artifact directory (default: ./out/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override one config field, e.g. --set K=45")

    p = _Parser(prog="flexscene", description=__doc__, epilog=CSV_HELP,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic clip dataset")
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--cameras", type=int, default=2)
    g.add_argument("--timesteps", type=int, default=9)
    g.add_argument("--scenario", help="force a single scenario")

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--dataset")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop after this global step")

    e = sub.add_parser("eval", parents=[common], help="minADE_k on the test split")
    e.add_argument("--dataset")
    e.add_argument("--ckpt")
    e.add_argument("--clips", type=int, help="cap on test clips")
    e.add_argument("--trajectories", action="store_true", help="also write trajectories.csv")

    b = sub.add_parser("bench", parents=[common], help="inference throughput (clips/s)")
    b.add_argument("--dataset")
    b.add_argument("--ckpt")
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--iters", type=int, default=3)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--reps", type=int, default=5)

    a = sub.add_parser("ablate", parents=[common], help="train+eval sweep over one axis")
    a.add_argument("--axis", required=True, choices=sorted(DEFAULT_GRIDS))
    a.add_argument("--grid", help="comma-separated points (defaults per axis)")
    a.add_argument("--dataset")
    a.add_argument("--bench-iters", type=int, default=2)

    n = sub.add_parser("analyze", parents=[common], help="scene-token attention analysis")
    n.add_argument("--dataset")
    n.add_argument("--ckpt")
    n.add_argument("--attn", help="existing FLEXATTN dump to analyse instead of recording")
    n.add_argument("--clips", type=int, default=32)
    n.add_argument("--maps", type=int, default=3, help="heat grids for the top-N tokens")
    return p


# ---- helpers -----------------------------------------------------------------

def effective_config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise CliConfigError(f"{args.config}: config must be a JSON object")
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "dataset", None):
        d["dataset"] = args.dataset
    try:
        return RunConfig.from_dict(d).validate()
    except TypeError as exc:
        raise CliConfigError(str(exc)) from exc


def open_dataset(cfg: RunConfig) -> ClipDataset:
    if not cfg.dataset:
        raise CliConfigError("a dataset path is required (--dataset or config 'dataset')")
    if not Path(cfg.dataset).exists():
        raise CliConfigError(f"dataset not found: {cfg.dataset}")
    ds = ClipDataset(cfg.dataset)
    w = ds.config
    mismatch = {k: (getattr(w, k), getattr(cfg, k)) for k in ("cameras", "timesteps", "horizon", "height", "width")
                if getattr(w, k) != getattr(cfg, k)}
    if mismatch:
        raise CliConfigError(f"dataset/config mismatch (dataset, config): {mismatch}")
    return ds


def load_model(cfg: RunConfig, ckpt: str | None):
    from .model import DrivingModel
    from .training import load_training_state
    model = DrivingModel(cfg)
    if ckpt:
        if not Path(ckpt).exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        load_training_state(ckpt, model)
    return model


def out_dir(args) -> Path:
    return Path(args.out_dir or Path("out") / args.command)


def test_clips(ds: ClipDataset, cap: int | None):
    from .training import split_indices
    _, test = split_indices(ds)
    if not test:
        test = list(range(len(ds)))
    if cap is not None:
        test = test[:cap]
    return [ds[i] for i in test]


# ---- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .training import write_manifest
    if args.clips < 1:
        raise CliConfigError("--clips must be >= 1")
    world = WorldConfig(cameras=args.cameras, timesteps=args.timesteps, scenario=args.scenario)
    try:
        world.validate()
    except (WorldConfigError, ValueError) as exc:
        raise CliConfigError(str(exc)) from exc
    seed = 0 if args.seed is None else args.seed
    target = Path(args.out)
    if not target.parent.exists() or not target.parent.is_dir():
        raise CliConfigError(f"output directory does not exist: {target.parent}")
    od = Path(args.out_dir) if args.out_dir else target.parent
    cfg = RunConfig(cameras=args.cameras, timesteps=args.timesteps, seed=seed, dataset=str(target))
    try:
        write_manifest(od, "gen-data", cfg, extra={"world": world.to_dict(), "clips": args.clips})
    except OSError as exc:
        raise CliConfigError(f"cannot write manifest in {od}: {exc}") from exc
    try:
        n = write_dataset((generate_clip(clip_seed(seed, i), world, i) for i in range(args.clips)),
                          target, world)
    except OSError as exc:
        raise CliConfigError(f"cannot write {target}: {exc}") from exc
    ds = ClipDataset(target)
    train, test = ds.split()
    print(f"wrote {n} clips to {target} (train {len(train)}, test {len(test)})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train, write_manifest
    cfg = effective_config(args)
    ds = open_dataset(cfg)
    od = out_dir(args)
    write_manifest(od, "train", cfg, ds.header_hash())

    def progress(step, loss):
        if step % 50 == 0:
            print(f"step {step} loss {loss:.4f}", flush=True)

    res = train(cfg, ds, od, resume=args.resume, until=args.until, progress=progress)
    if res.losses:
        print(f"final loss {res.losses[-1][1]:.4f} after step {res.losses[-1][0]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .model import make_batch
    from .policy import write_trajectories_csv
    from .training import write_manifest
    cfg = effective_config(args)
    ds = open_dataset(cfg)
    od = out_dir(args)
    write_manifest(od, "eval", cfg, ds.header_hash(), {"ckpt": args.ckpt})
    model = load_model(cfg, args.ckpt)
    clips = test_clips(ds, args.clips if args.clips is not None else cfg.eval_clips)
    report = evaluate(model, clips, cfg.eval_k, cfg.eval_temperature, cfg.seed)
    report.to_json(od / "report.json")
    if args.trajectories:
        b = make_batch(clips, cfg)
        tr = model.sample(b.images, b.histories, cfg.eval_k, cfg.eval_temperature,
                          np.random.default_rng([cfg.seed, 0xE7]))
        write_trajectories_csv(od / "trajectories.csv", b.clip_ids, tr)
    print(f"minADE_{cfg.eval_k} {report.minade6:.4f} over {report.clips} clips "
          + " ".join(f"{k}={v:.4f}" for k, v in report.buckets.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluation import EvalReport, throughput_bench
    from .training import write_manifest
    cfg = effective_config(args)
    ds = open_dataset(cfg)
    od = out_dir(args)
    write_manifest(od, "bench", cfg, ds.header_hash(), {"ckpt": args.ckpt})
    model = load_model(cfg, args.ckpt)
    n = min(len(ds), (args.warmup + args.iters) * args.batch)
    mean, std = throughput_bench(model, [ds[i] for i in range(n)], args.warmup, args.iters,
                                 args.batch, args.reps)
    EvalReport(float("nan"), {}, 0, mean, std, cfg.hash()).to_json(od / "report.json")
    print(f"clips/s {mean:.3f} ± {std:.3f} (scene tokens {cfg.scene_tokens()}, {args.reps} reps)")
    return EXIT_OK


def ablation_points(axis: str, grid: str, base: RunConfig) -> list:
    """(label, config overrides) per sweep point."""
    points = []
    for raw in [g.strip() for g in grid.split(",") if g.strip()]:
        if axis == "tokens":
            kw = {"K": int(raw)}
        elif axis == "layers":
            kw = {"enc_layers": int(raw)}
        elif axis == "attention":
            if raw not in VARIANTS:
                raise CliConfigError(f"unknown attention variant {raw!r}")
            kw = {"variant": raw}
        elif axis == "interleave":
            rep, _, mode = raw.partition(":")
            if rep not in ("baseline", "flex") or mode not in ("interleave", "non_interleave"):
                raise CliConfigError(f"interleave points look like flex:interleave, got {raw!r}")
            kw = {"repr": rep, "interleave": mode == "interleave"}
        elif axis == "cameras":
            kw = {"cameras": int(raw)}
        else:
            kw = {"patch_depth": int(raw)}
        points.append((raw, kw))
    return points


def cmd_ablate(args) -> int:
    from .evaluation import evaluate, throughput_bench, write_pareto_csv, write_sweep_csv
    from .training import Trainer, split_indices, write_manifest
    cfg = effective_config(args)
    ds = open_dataset(cfg)
    od = out_dir(args)
    grid = args.grid or DEFAULT_GRIDS[args.axis]
    points = ablation_points(args.axis, grid, cfg)
    write_manifest(od, "ablate", cfg, ds.header_hash(), {"axis": args.axis, "grid": grid})
    rows = []
    for label, kw in points:
        row = {"axis": args.axis, "value": label}
        try:
            pcfg = cfg.updated(**kw).validate()
            source = ds
            if pcfg.cameras != ds.config.cameras:
                source = camera_dataset(ds, pcfg.cameras, od / "data", cfg.seed)
            trainer = Trainer(pcfg, source, out_dir=od / "points" / f"{args.axis}_{label.replace(':', '_')}")
            trainer.run()
            clips = test_clips(source, pcfg.eval_clips)
            rep = evaluate(trainer.model, clips, pcfg.eval_k, pcfg.eval_temperature, pcfg.seed)
            mean, std = throughput_bench(trainer.model, clips, 1, args.bench_iters, 4, 5)
            row.update(repr=pcfg.repr, variant=pcfg.variant, interleave=pcfg.interleave, K=pcfg.K,
                       enc_layers=pcfg.enc_layers, cameras=pcfg.cameras, patch_depth=pcfg.patch_depth,
                       scene_tokens=pcfg.scene_tokens(), minade6=rep.minade6, clips_per_s=mean,
                       clips_per_s_std=std, status="ok")
        except Exception as exc:  # a failing point is recorded, the sweep continues
            row.update(status=f"error: {type(exc).__name__}: {exc}")
        rows.append(row)
        print(f"{args.axis}={label}: {row.get('status')} minade6={row.get('minade6')} "
              f"clips/s={row.get('clips_per_s')}", flush=True)
        write_sweep_csv(od / "sweep.csv", rows)
    write_pareto_csv(od / "pareto.csv", rows)
    return EXIT_OK


def camera_dataset(ds: ClipDataset, cameras: int, data_dir: Path, seed: int) -> ClipDataset:
    """Regenerate ``ds``'s clips with a different camera rig (cached per count)."""
    data_dir.mkdir(parents=True, exist_ok=True)
    path = data_dir / f"cameras_{cameras}.flex"
    if not path.exists():
        world = WorldConfig.from_dict({**ds.config.to_dict(), "cameras": cameras})
        seeds = [ds[i] for i in range(len(ds))]
        write_dataset((generate_clip(c.seed, world, c.clip_id) for c in seeds), path, world)
    return ClipDataset(path)


def cmd_analyze(args) -> int:
    from . import analysis as an
    from .encoder import load_attention, save_attention
    from .model import make_batch
    from .training import write_manifest
    cfg = effective_config(args)
    od = out_dir(args)
    attn_dir = od / "attn"
    if args.attn:
        write_manifest(od, "analyze", cfg, None, {"attn": args.attn})
        weights, layout, clip_ids = load_attention(args.attn)
    else:
        if cfg.repr != "flex":
            raise CliConfigError("attention analysis needs repr=flex")
        ds = open_dataset(cfg)
        write_manifest(od, "analyze", cfg, ds.header_hash(), {"ckpt": args.ckpt})
        model = load_model(cfg, args.ckpt)
        clips = test_clips(ds, args.clips)
        rec = []
        for i in range(0, len(clips), 8):
            b = make_batch(clips[i:i + 8], cfg)
            model.scene(b.images, record=rec)
        weights = np.concatenate(rec)
        layout = model.key_layout()
        clip_ids = [c.clip_id for c in clips]
        attn_dir.mkdir(parents=True, exist_ok=True)
        save_attention(attn_dir / "attn.flexattn", weights, layout, clip_ids)
    attn_dir.mkdir(parents=True, exist_ok=True)
    per_clip = np.array([an.response_arrays(w)[0] for w in weights])
    mean_max = per_clip.mean(axis=0)
    an.write_responses_csv(attn_dir / "responses.csv", mean_max)
    an.write_curve_csv(attn_dir / "curve.csv", an.sorted_response_curve(per_clip))
    maps = attn_dir / "maps"
    maps.mkdir(exist_ok=True)
    top = np.argsort(-mean_max, kind="stable")[:args.maps]
    for tok in top:
        for (c, t), grid in an.response_map(int(tok), weights[0], layout).items():
            an.write_pgm(maps / f"token{tok}_c{c}_t{t}.pgm", grid)
            an.write_grid_csv(maps / f"token{tok}_c{c}_t{t}.csv", grid)
    print(f"analysed {len(weights)} clips; top tokens {top.tolist()} "
          f"responses {[round(float(mean_max[i]), 4) for i in top]}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "ablate": cmd_ablate, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (CliConfigError, ConfigError, WorldConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, AttentionDumpError, CheckpointError, DatasetError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level exit-code discipline
        traceback.print_exc()
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
