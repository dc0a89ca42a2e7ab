"""Command-line entry point.

Subcommands cover the full pipeline: dataset and stimulus generation,
motion-energy export, training, evaluation, the shape task, the
experiment service, and report emission.  Every run echoes its resolved
configuration into the output directory, and ``--seed`` makes each
subcommand deterministic.  Exit codes: 0 success, 1 usage error, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "GM_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path: str | None) -> dict:
    """Flat ``key = value`` config file; values parsed as JSON scalars."""
    if not path:
        return {}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, rhs = (s.strip() for s in line.split("=", 1))
        try:
            values[key.replace("-", "_")] = json.loads(rhs)
        except json.JSONDecodeError:
            values[key.replace("-", "_")] = rhs
    return values


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Config file values fill in anything the command line left at default."""
    overrides = _load_config_file(getattr(args, "config", None))
    if not overrides:
        return
    explicit = set()
    for token in sys.argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise UsageError(f"config key {key!r} does not match any option")
        if key not in explicit:
            setattr(args, key, value)


def _data_root(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise UsageError(f"--data not given and {DATA_DIR_ENV} is not set")


def _echo_config(out_dir: Path, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k != "func"}
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, default=str))


def _ablation_from_args(args):
    from .motion_energy import AblationConfig

    return AblationConfig(
        v1_nonlinearity=args.v1_nonlinearity,
        mt_nonlinearity=args.mt_nonlinearity,
        norm_kind=args.norm_kind,
        include_v1_blur=not args.no_v1_blur,
        include_mt_blur=not args.no_mt_blur,
        include_mt_linear=not args.no_mt_linear,
        include_mt_stage=not args.no_mt_stage,
    )


def _add_ablation_flags(p: argparse.ArgumentParser):
    p.add_argument("--v1-nonlinearity", choices=["square", "relu"], default="square")
    p.add_argument("--mt-nonlinearity", choices=["rectified_square", "relu"],
                   default="rectified_square")
    p.add_argument("--norm-kind", choices=["channel", "instance", "none"], default="channel")
    p.add_argument("--no-v1-blur", action="store_true")
    p.add_argument("--no-mt-blur", action="store_true")
    p.add_argument("--no-mt-linear", action="store_true")
    p.add_argument("--no-mt-stage", action="store_true")


def _make_segmenter(args, checkpoint: Path):
    from .evaluation import Segmenter
    from .segmentation import load_checkpoint
    from .sources import make_source

    net, meta = load_checkpoint(checkpoint)
    source = make_source(
        meta["motion_source"] or args.motion,
        levels=meta["levels"],
        ablation=_ablation_from_args(args),
        flow_root=Path(args.flow_root) if getattr(args, "flow_root", None) else None,
    )
    return Segmenter(source, net, name=meta["motion_source"] or args.motion)


# ---------------------------------------------------------------- commands


def cmd_gen_dataset(args) -> int:
    from .dataset import SceneConfig, sample_scene, write_dataset

    out = Path(args.out)
    config = SceneConfig(
        frame_size=(args.size, args.size),
        duration_frames=args.frames,
        shape_speed=(args.shape_speed_min, args.shape_speed_max),
        background_speed=(args.bg_speed_min, args.bg_speed_max),
        min_relative_speed=args.min_relative_speed,
    )
    n = args.train + args.test
    scenes = [sample_scene(args.seed + i, config) for i in range(n)]
    manifest = write_dataset(scenes, out, train_fraction=args.train / n if n else 0.9)
    _echo_config(out, args)
    print(f"wrote {n} videos; manifest at {manifest}")
    return 0


def _gen_dots_for_video(job) -> str:
    video_dir, seed, num, lifetime, radius = job
    from .dataset import load_flows
    from .dots import DotConfig, make_kinematogram
    from .trial_bank import _save_png

    flows = load_flows(video_dir)
    volume = make_kinematogram(
        flows, DotConfig(num_dots=num, lifetime=lifetime, radius=radius), seed
    )
    dots_dir = Path(video_dir) / "dots"
    dots_dir.mkdir(exist_ok=True)
    for t in range(volume.num_frames):
        _save_png(dots_dir / f"{t:05d}.png", volume.frames[t])
    return Path(video_dir).name


def cmd_gen_dots(args) -> int:
    from .dataset import read_manifest

    root = _data_root(args)
    splits = read_manifest(root / "manifest.txt")
    dirs = splits.get(args.split, []) if args.split != "all" else [
        d for vs in splits.values() for d in vs
    ]
    if not dirs:
        raise UsageError(f"no videos in split {args.split!r}")
    jobs = [
        (d, args.seed + i, args.num_dots, args.lifetime, args.dot_radius)
        for i, d in enumerate(sorted(dirs))
    ]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            done = list(pool.map(_gen_dots_for_video, jobs))
    else:
        done = [_gen_dots_for_video(j) for j in jobs]
    print(f"generated dot stimuli for {len(done)} videos")
    return 0


def cmd_gen_shape_trials(args) -> int:
    from .dots import DotConfig, ShapeTrialConfig
    from .trial_bank import write_trial_bank

    config = ShapeTrialConfig(
        frame_size=(args.size, args.size),
        duration_frames=args.frames,
        speed=(args.speed_min, args.speed_max),
        dots=DotConfig(num_dots=args.num_dots, lifetime=args.lifetime,
                       radius=args.dot_radius),
    )
    path = write_trial_bank(Path(args.out), args.count, config, seed=args.seed)
    _echo_config(Path(args.out), args)
    print(f"wrote {args.count} trials; bank at {path}")
    return 0


def cmd_energy(args) -> int:
    from .dataset import load_video
    from .filterbank import build_filter_bank
    from .motion_energy import motion_energy, write_energy_maps
    from .sources import valid_target_frames

    frames = load_video(args.video, args.subdir)
    bank = build_filter_bank(args.params)
    maps = motion_energy(frames, bank, _ablation_from_args(args),
                         levels=args.levels, dtype=np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    targets = list(valid_target_frames(len(frames)))
    for i, t in enumerate(targets):
        write_energy_maps(out / f"{t:05d}.mem", maps.frame(i))
    _echo_config(out, args)
    print(f"wrote {len(targets)} energy-map files to {out}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .segmentation import TrainConfig, train
    from .sources import make_source

    torch.set_num_threads(1)
    root = _data_root(args)
    out = Path(args.out)
    config = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        features=args.features,
        levels=args.levels,
        checkpoint_interval=args.checkpoint_interval,
        out_dir=out,
    )
    source = make_source(
        args.motion,
        levels=args.levels,
        ablation=_ablation_from_args(args),
        flow_root=Path(args.flow_root) if args.flow_root else None,
    )
    _echo_config(out, args)
    train(root / "manifest.txt", args.motion, config, source=source)
    print(f"trained {args.steps} steps; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_masks, load_video, read_manifest
    from .evaluation import emit_report, evaluate_video, zero_shot_eval

    root = _data_root(args)
    segmenter = _make_segmenter(args, Path(args.checkpoint))
    out_csv = Path(args.out)
    if args.condition == "both":
        rows = zero_shot_eval(segmenter, root / "manifest.txt")
    else:
        rows = []
        for vdir in read_manifest(root / "manifest.txt").get("test", []):
            subdir = "dots" if args.condition == "random_dots" else "frames"
            frames = load_video(vdir, subdir)
            rows += evaluate_video(
                segmenter, frames, load_masks(vdir), args.condition,
                Path(vdir).name, vdir,
            )
    summary = emit_report(rows, out_csv)
    print(summary, end="")
    return 0


def cmd_shape_eval(args) -> int:
    from .evaluation import evaluate_shape_trials

    segmenter = _make_segmenter(args, Path(args.checkpoint))
    result = evaluate_shape_trials(segmenter, Path(args.trials), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in result.items() if k != "psychometric"}
    if "psychometric" in result:
        fit = result["psychometric"]
        payload["psychometric"] = {
            "alpha": fit.alpha, "beta": fit.beta,
            "converged": fit.converged, "identifiable": fit.identifiable,
        }
    out.write_text(json.dumps(payload, indent=2))
    print(f"accuracy {result['accuracy']:.3f} over {result['n_trials']} trials "
          f"(p={result['p_value_vs_chance']:.2e} vs chance)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(Path(args.bank), Path(args.state))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_report(args) -> int:
    from .evaluation import aggregate, read_rows_csv

    rows = []
    for path in args.csv:
        rows += read_rows_csv(path)
    if not rows:
        raise UsageError("no rows in the given CSV files")
    summary = aggregate(rows)
    if args.out:
        Path(args.out).write_text(summary)
    print(summary, end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gmotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="flat key = value config file; flags win")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gen-dataset", help="render a synthetic figure-ground dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--shape-speed-min", type=float, default=0.8)
    p.add_argument("--shape-speed-max", type=float, default=1.6)
    p.add_argument("--bg-speed-min", type=float, default=0.3)
    p.add_argument("--bg-speed-max", type=float, default=1.0)
    p.add_argument("--min-relative-speed", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("gen-dots", help="random-dot counterparts from ground-truth flow")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--num-dots", type=int, default=500)
    p.add_argument("--lifetime", type=int, default=8)
    p.add_argument("--dot-radius", type=float, default=1.5)
    common(p)
    p.set_defaults(func=cmd_gen_dots)

    p = sub.add_parser("gen-shape-trials", help="2AFC shape-identification stimulus bank")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--speed-min", type=float, default=0.5)
    p.add_argument("--speed-max", type=float, default=1.2)
    p.add_argument("--num-dots", type=int, default=500)
    p.add_argument("--lifetime", type=int, default=8)
    p.add_argument("--dot-radius", type=float, default=1.5)
    common(p)
    p.set_defaults(func=cmd_gen_shape_trials)

    p = sub.add_parser("energy", help="export motion-energy maps for a video")
    p.add_argument("--video", required=True, help="video directory")
    p.add_argument("--subdir", default="frames")
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None, help="filter bank parameter file")
    p.add_argument("--levels", type=int, default=5)
    _add_ablation_flags(p)
    common(p)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("train", help="train the segmentation head")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--motion", choices=["motion_energy", "flow_multiscale", "flow_multiframe"],
                   default="motion_energy")
    p.add_argument("--steps", type=int, default=40000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--checkpoint-interval", type=int, default=2000)
    p.add_argument("--flow-root", default=None,
                   help="externally supplied <video>/flow/%%05d.flo predictions")
    _add_ablation_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion", default="motion_energy")
    p.add_argument("--condition", choices=["original", "random_dots", "both"], default="both")
    p.add_argument("--out", required=True, help="per-frame CSV path")
    p.add_argument("--flow-root", default=None)
    _add_ablation_flags(p)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shape-eval", help="run the shape task with a model observer")
    p.add_argument("--trials", required=True, help="trial bank directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion", default="motion_energy")
    p.add_argument("--out", required=True, help="JSON results path")
    p.add_argument("--flow-root", default=None)
    _add_ablation_flags(p)
    common(p)
    p.set_defaults(func=cmd_shape_eval)

    p = sub.add_parser("serve", help="run the experiment HTTP service")
    p.add_argument("--bank", required=True, help="stimulus bank directory")
    p.add_argument("--state", required=True, help="session state directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="aggregate evaluation CSVs into a summary table")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _apply_config(args, parser)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
