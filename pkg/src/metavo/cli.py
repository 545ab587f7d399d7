"""Command-line entry point: ``metavo {train,adapt,eval,plot,gen-data,selfcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import random
import sys
from pathlib import Path

import numpy as np
import torch

from .adaptation import AdaptConfig, dataset_stream, meta_train, online_adapt
from .config import ConfigError, RunConfig, load_config, write_config
from .data_io import associate, export_kitti_layout, load_kitti_layout, load_tum_layout
from .errors import DataError, DomainError, NumericalError
from .evaluation import (DESK_LENGTHS, KITTI_LENGTHS, TrajectoryEstimate, evaluate, format_pose_row,
                         plot_trajectory, read_trajectory)
from .feature_alignment import write_stats_csv
from .geometry import pose_compose, pose_inverse
from .networks import build_model, load_checkpoint, save_checkpoint
from .selfcheck import MUTATIONS, format_report, run_selfcheck
from .synthetic import SyntheticSceneConfig, generate_synthetic, motion_script

log = logging.getLogger("metavo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def seed_everything(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _apply_run_overrides(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.deterministic:
        kw["deterministic"] = True
    if getattr(args, "out", None):
        kw["output_dir"] = str(args.out)
    return cfg.replace("run", **kw) if kw else cfg


def _load_sequences(cfg: RunConfig):
    size = (cfg.model.height, cfg.model.width)
    if not cfg.data.root:
        raise ConfigError("data.root: required")
    if cfg.data.format == "tum":
        return [load_tum_layout(cfg.data.root, size)]
    if not cfg.data.sequences:
        raise ConfigError("data.sequences: at least one sequence id is required")
    return [load_kitti_layout(cfg.data.root, s, size) for s in cfg.data.sequences]


def cmd_train(args) -> int:
    cfg = _apply_run_overrides(load_config(args.config), args)
    if args.standard:
        cfg = cfg.replace("optim", meta=False)
    if args.iterations is not None:
        cfg = cfg.replace("optim", iterations=args.iterations)
    seed_everything(cfg.run.seed, cfg.run.deterministic)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "effective_config.ini")
    datasets = _load_sequences(cfg)
    state = out / "train_state.pt"
    if not args.resume and state.exists():
        state.unlink()
    model = build_model(cfg.model, seed=cfg.run.seed)
    result = meta_train(datasets, model, cfg.optim, cfg.loss, seed=cfg.run.seed, log_path=out / "train_log.csv",
                        resume_path=state, stop_after=args.stop_after)
    if not result.completed:
        print(f"stopped after {len(result.log)} iterations; resume with --resume")
        return EXIT_OK
    if any(not np.isfinite(r["inner_loss"]) for r in result.log):
        raise NumericalError("non-finite training loss")
    extra = {"seed": cfg.run.seed, "meta": cfg.optim.meta, "iterations": cfg.optim.iterations,
             "window_length": cfg.optim.window_length}
    save_checkpoint(out / "checkpoint.pt", result.model, result.source_stats, extra)
    if state.exists():
        state.unlink()
    print(f"wrote {out / 'checkpoint.pt'} after {len(result.log)} iterations")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _apply_run_overrides(load_config(args.config), args)
    seed_everything(cfg.run.seed, cfg.run.deterministic)
    model, stats, extra = load_checkpoint(args.checkpoint, cfg.model)
    if args.stream_root:
        cfg = cfg.replace("data", root=str(args.stream_root), sequences=(args.sequence,) if args.sequence else ())
    stream = _load_sequences(cfg)[0]
    online = cfg.online
    acfg = AdaptConfig(
        mode=args.mode or online.mode,
        window_length=cfg.optim.window_length,
        alpha=online.alpha if args.alpha is None else args.alpha,
        second_order=online.second_order,
        lstm=online.lstm and not args.no_lstm,
        fa=online.fa and not args.no_fa,
        align=cfg.align,
    )
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "effective_config.ini")
    res = online_adapt(dataset_stream(stream), model, stats, stream.K, acfg, cfg.loss)
    if any(r["skipped"] for r in res.report.rows):
        log.warning("%d windows skipped on non-finite gradients", sum(r["skipped"] for r in res.report.rows))
    with open(out / "poses.txt", "w") as fh:
        for ts, pose in res.poses:
            fh.write(format_pose_row(ts, pose) + "\n")
    res.report.write_csv(out / "report.csv")
    if res.report.stats:
        write_stats_csv(out / "stats.csv", res.report.stats)
    print(f"mode={acfg.mode} lstm={acfg.lstm} fa={res.report.header['fa']} poses={len(res.poses)} "
          f"final_quartile_photometric={res.report.final_quartile():.6f}")
    return EXIT_OK


def _rebase(traj: TrajectoryEstimate) -> TrajectoryEstimate:
    inv = pose_inverse(traj.poses[0])
    return TrajectoryEstimate([pose_compose(inv, p) for p in traj.poses], traj.timestamps)


def _match(est: TrajectoryEstimate, gt: TrajectoryEstimate, tolerance: float):
    if len(est) == len(gt):
        return est, gt
    if est.timestamps is None or gt.timestamps is None:
        raise DataError(f"trajectory lengths differ ({len(est)} vs {len(gt)}) and timestamps are missing")
    idx = associate(est.timestamps, gt.timestamps, tolerance)
    keep = [(k, j) for k, j in enumerate(idx) if j is not None]
    if len(keep) < 2:
        raise DataError("fewer than two estimated poses match ground-truth timestamps")
    e = TrajectoryEstimate([est.poses[k] for k, _ in keep], np.array([est.timestamps[k] for k, _ in keep]))
    g = TrajectoryEstimate([gt.poses[j] for _, j in keep], np.array([gt.timestamps[j] for _, j in keep]))
    return e, g


def cmd_eval(args) -> int:
    est = read_trajectory(args.est, args.format)
    gt = read_trajectory(args.gt, args.format)
    for t in (est, gt):
        if t.timestamps is None:
            t.timestamps = np.arange(len(t), dtype=np.float64) / args.fps
    est, gt = _match(est, gt, args.tolerance)
    est, gt = _rebase(est), _rebase(gt)
    delta = args.rpe_delta if args.rpe_delta else max(1, int(round(args.fps)))
    lengths = DESK_LENGTHS if args.desk else KITTI_LENGTHS
    report = evaluate(est, gt, lengths, min(delta, len(gt) - 1), align=not args.no_align)
    for k, v in report.as_dict().items():
        print(f"{k} {v:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(report.as_dict()))
            w.writerow([repr(v) for v in report.as_dict().values()])
    return EXIT_OK


def cmd_plot(args) -> int:
    trajs = {}
    for item in args.traj:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--traj expects name=path, got {item!r}")
        trajs[name] = _rebase(read_trajectory(path, args.format))
    plot_trajectory(trajs, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


DOMAINS = {
    "a": dict(texture="checker", motion="lateral"),
    "b": dict(texture="perlin", motion="wander", mean_color=(0.35, 0.5, 0.3), contrast=0.5, texture_scale=0.8),
}


def cmd_gen_data(args) -> int:
    preset = dict(DOMAINS[args.domain]) if args.domain else {}
    motion = args.motion or preset.pop("motion", "lateral")
    preset.pop("motion", None)
    if args.texture:
        preset["texture"] = args.texture
    out = Path(args.out)
    for k in range(args.sequences):
        seed = args.seed * 1000 + k
        cfg = SyntheticSceneConfig(
            depth_model=args.depth_model, motion=motion_script(motion, args.frames - 1, seed=seed),
            height=args.height, width=args.width, seed=seed, render=args.render, occluder=args.occluder, **preset,
        )
        ds = generate_synthetic(cfg, f"{k:02d}")
        export_kitti_layout(ds, out)
    print(f"wrote {args.sequences} sequence(s) of {args.frames} frames to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(args.mutate)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metavo", description="Self-supervised monocular VO with online meta-adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out", type=Path, help="output directory (overrides run.output_dir)")

    sp = sub.add_parser("train", help="pre-train a model")
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--standard", action="store_true", help="plain training instead of the meta-objective")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help="stop after this many iterations, leaving resumable state")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="estimate poses on a stream with online adaptation")
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--stream-root", type=Path)
    sp.add_argument("--sequence")
    sp.add_argument("--mode", choices=("none", "naive", "meta"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--no-lstm", action="store_true", help="zero the recurrent state at every step")
    sp.add_argument("--no-fa", action="store_true", help="use instantaneous normalisation statistics")
    run_flags(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="trajectory metrics against ground truth")
    sp.add_argument("--est", required=True, type=Path)
    sp.add_argument("--gt", required=True, type=Path)
    sp.add_argument("--format", choices=("kitti", "tum"), default="kitti")
    sp.add_argument("--desk", action="store_true", help="segment lengths 1..8 units instead of 100..800")
    sp.add_argument("--fps", type=float, default=10.0, help="frame rate assumed when files carry no timestamps")
    sp.add_argument("--rpe-delta", type=int, help="RPE span in frames (default: one second)")
    sp.add_argument("--tolerance", type=float, default=0.02)
    sp.add_argument("--no-align", action="store_true")
    sp.add_argument("--csv", type=Path)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="top-down trajectory plot")
    sp.add_argument("--traj", action="append", required=True, help="name=path, repeatable")
    sp.add_argument("--format", choices=("kitti", "tum"), default="kitti")
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("gen-data", help="write synthetic sequences in the KITTI-style layout")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--domain", choices=sorted(DOMAINS))
    sp.add_argument("--texture", choices=("checker", "perlin", "image-patch"))
    sp.add_argument("--motion", choices=("static", "lateral", "forward", "wander"))
    sp.add_argument("--depth-model", choices=("plane", "heightfield"), default="heightfield")
    sp.add_argument("--render", choices=("warp", "raycast"), default="raycast")
    sp.add_argument("--occluder", action="store_true")
    sp.add_argument("--sequences", type=int, default=1)
    sp.add_argument("--frames", type=int, default=40)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=96)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("selfcheck", help="run the fast invariant suite")
    sp.add_argument("--mutate", choices=MUTATIONS, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
