"""Command-line entry points.

Subcommands: gen-data, train, eval, demo, plot.  Every RunConfig field is
overridable by a flag of the same name; PVM_SEED in the environment
overrides the seed from any source.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .harness import (CheckpointError, ConfigError, DataError, RunConfig,
                      demo, evaluate, read_metrics, smooth_curve, train)
from .hierarchy import NumericError
from .motion import CameraIntrinsics
from .simenv import DatasetError, make_trajectories, record_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for f in dataclasses.fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}",
                            dest=f"cfg_{f.name}", metavar=str(f.type).upper())


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f"cfg_{f.name}", None)
                 for f in dataclasses.fields(RunConfig)}
    cfg = cfg.with_overrides(**{k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get("PVM_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"PVM_SEED must be an integer, got {env_seed!r}")
    return cfg


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    scene = cfg.make_scene()
    k = CameraIntrinsics.from_fov(args.frame_w, args.frame_h, cfg.fov_deg)
    trajectories = make_trajectories(args.pan_profiles, args.tilt_profiles,
                                     seed=cfg.seed,
                                     period_range=(args.period_min, args.period_max))
    files = record_dataset(scene, trajectories, sets=args.sets,
                           frames_per_set=args.frames, seed=cfg.seed,
                           path=args.out, k=k)
    print(f"wrote {len(files)} set(s) x {args.frames} frames to {args.out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    result = train(_build_config(args))
    print(f"trained {result.frames} frames; metrics: {result.train_metrics}")
    for p in result.checkpoints:
        print(f"checkpoint: {p}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    path = evaluate(_build_config(args), checkpoint=args.checkpoint)
    print(f"evaluation metrics: {path}")
    return EXIT_OK


def _cmd_demo(args: argparse.Namespace) -> int:
    result = demo(_build_config(args), checkpoint=args.checkpoint)
    print(f"demo ran {result.steps} steps; {result.fixation_switches} fixation "
          f"switches ({result.triggers} threshold triggers); "
          f"metrics: {result.metrics}")
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = read_metrics(args.metrics)
    if "frame" not in cols or "mse_image" not in cols:
        raise DataError(f"{args.metrics}: not a training metrics file")
    n = len(cols["frame"])
    if n == 0:
        raise DataError(f"{args.metrics}: no rows")
    window = args.window or max(1, n // 8)
    fig, ax = plt.subplots(figsize=(9, 5))
    ax.plot(cols["frame"], smooth_curve(cols["mse_image"], window),
            color="tab:red", label="image-only MSE (smoothed)")
    ax.plot(cols["frame"], smooth_curve(cols["mse_all"], window),
            color="tab:blue", label="all-level MSE (smoothed)")
    if args.test_metrics:
        tcols = read_metrics(args.test_metrics)
        if len(tcols.get("epoch", [])):
            epochs = np.unique(tcols["epoch"])
            means = [tcols["mse_image"][tcols["epoch"] == e].mean()
                     for e in epochs]
            per_epoch = n / len(epochs)
            ax.plot((epochs + 1) * per_epoch, means, "o--", color="tab:red",
                    alpha=0.6, label="test image-only MSE (per epoch)")
    ax.set_xlabel("frame")
    ax.set_ylabel("mean squared error")
    ax.set_title(f"prediction error (smoothing window {window} frames)")
    ax.legend()
    fig.tight_layout()
    out = args.out or str(Path(args.metrics).with_suffix(".png"))
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"plot written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvm",
        description="Self-supervised predictive vision engine on a simulated "
                    "pan-tilt rig")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render frame/pose dataset files")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sets", type=int, default=50)
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--frame-w", type=int, default=128)
    p.add_argument("--frame-h", type=int, default=96)
    p.add_argument("--pan-profiles", type=int, default=20)
    p.add_argument("--tilt-profiles", type=int, default=20)
    p.add_argument("--period-min", type=float, default=30.0)
    p.add_argument("--period-max", type=float, default=300.0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on recorded sets")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluation-only pass over test sets")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("demo", help="closed-loop saccade demo on a static scene")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="trained checkpoint to start from")
    p.set_defaults(func=_cmd_demo)

    p = sub.add_parser("plot", help="plot smoothed error curves from metrics")
    p.add_argument("--metrics", required=True, help="train metrics CSV")
    p.add_argument("--test-metrics", help="test metrics CSV to overlay")
    p.add_argument("--window", type=int, help="smoothing window in frames")
    p.add_argument("--out", help="output image path (PNG)")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
