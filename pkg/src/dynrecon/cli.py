"""Command-line entry point: gen-data, train, render, eval and ablate.

Exit codes: 0 success, 2 usage error, 3 missing or unreadable input,
4 training divergence.
"""

from __future__ import annotations

import os

# BLAS reads its thread count at import time, so honor the cap before numpy loads.
if os.environ.get("RECON_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["RECON_THREADS"])

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .deformation import write_poses  # noqa: E402
from .evaluation import (  # noqa: E402
    ABLATION_GRIDS,
    ablation_configs,
    evaluate_model,
    evaluate_renders,
    render_views,
    select_frames,
    write_rendered,
)
from .fields import CheckpointError, load_checkpoint  # noqa: E402
from .fileio import Dataset, MissingInputError, read_dataset, write_dataset  # noqa: E402
from .oracle import default_cameras, default_skeleton, generate_dataset, swing_poses  # noqa: E402
from .trainer import DivergenceError, TrainConfig, train_stage1, train_stage2_novel_pose  # noqa: E402

log = logging.getLogger("dynrecon")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value training config file")
    common.add_argument("--preset", choices=("full", "desk"), default="full", help="base architecture before --config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", type=Path, required=True, help="dataset directory")

    cam = argparse.ArgumentParser(add_help=False)
    cam.add_argument("--camera", default="test", help="'train', 'test' or a camera index")
    cam.add_argument("--frames", default="all", help="'all', 'every:N' or a comma list of frame indices")

    p = argparse.ArgumentParser(prog="dynrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic capsule scene")
    g.add_argument("--num-frames", type=int, default=30)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--noise-sigma", type=float, default=0.0)

    t = sub.add_parser("train", parents=[common, data], help="stage-1 training (stage 2 with --novel-frames)")
    t.add_argument("--steps", type=int, help="overrides steps_stage1")
    t.add_argument("--novel-frames", type=int, default=0, help="fit blend codes for N unseen swing poses")

    r = sub.add_parser("render", parents=[common, data, cam], help="render views from a checkpoint")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--normals", action="store_true", help="also write density-gradient normals")

    e = sub.add_parser("eval", parents=[common, data, cam], help="score a checkpoint or a render directory")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--renders", type=Path, help="directory with frames/ and depth/ laid out like a dataset")

    a = sub.add_parser("ablate", parents=[common, data, cam], help="train and score each row of an ablation grid")
    a.add_argument("--grid", default="default", help=f"one of {sorted(ABLATION_GRIDS)}")
    a.add_argument("--steps", type=int, help="overrides steps_stage1")
    return p


def load_config(args) -> TrainConfig:
    base = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    cfg = base
    if args.config is not None:
        if not args.config.exists():
            raise MissingInputError(f"missing file: {args.config}")
        try:
            cfg = TrainConfig.load(args.config, base)
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(steps_stage1=args.steps)
    return cfg


def parse_frames(text: str, dataset: Dataset) -> list[int]:
    if text == "all":
        return select_frames(dataset)
    if text.startswith("every:"):
        return select_frames(dataset, int(text.split(":", 1)[1]))
    try:
        frames = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"--frames: cannot parse {text!r}") from None
    known = {p.frame for p in dataset.poses}
    for f in frames:
        if f not in known:
            raise UsageError(f"--frames: frame {f} not in dataset")
    return frames


def _camera_check(dataset: Dataset, camera: str) -> None:
    try:
        if not dataset.camera_indices(camera):
            raise UsageError(f"--camera {camera}: no such cameras in dataset")
    except ValueError as exc:
        raise UsageError(f"--camera {camera}: {exc}") from None


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    return args.out


def _load_params(path: Path):
    if not path.exists():
        raise MissingInputError(f"missing file: {path}")
    params, _ = load_checkpoint(path)
    return params


def cmd_gen_data(args) -> int:
    out = _require_out(args)
    seed = 0 if args.seed is None else args.seed
    skel = default_skeleton()
    poses = swing_poses(skel, args.num_frames)
    cams = default_cameras(args.width, args.height)
    roles = ["train"] * (len(cams) - 1) + ["test"]
    records = generate_dataset(skel, poses, cams, args.noise_sigma, seed)
    write_dataset(out, Dataset(records, cams, roles, skel, poses, seed, args.noise_sigma))
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args)
    cfg = load_config(args)
    dataset = read_dataset(args.dataset)
    params, recs = train_stage1(dataset, cfg, out)
    last = recs[-1] if recs else None
    if last is not None:
        print(f"stage 1: {last.step} steps, final total loss {last.total:.5f}, batch PSNR {last.psnr:.2f} dB")
    if args.novel_frames > 0:
        novel = swing_poses(dataset.skeleton, args.novel_frames, phase=np.pi / args.novel_frames)
        res = train_stage2_novel_pose(params, dataset, novel, cfg)
        write_poses(out / "novel_poses.txt", novel)
        np.savetxt(out / "novel_blend_codes.txt", res.codes)
        if res.losses:
            print(f"stage 2: weight loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_render(args) -> int:
    out = _require_out(args)
    cfg = load_config(args)
    dataset = read_dataset(args.dataset)
    _camera_check(dataset, args.camera)
    params = _load_params(args.checkpoint)
    frames = parse_frames(args.frames, dataset)
    n = 0
    for rec, view in render_views(params, dataset, cfg, args.camera, frames, with_normals=args.normals):
        write_rendered(out, rec, view)
        n += 1
    print(f"rendered {n} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    dataset = read_dataset(args.dataset)
    _camera_check(dataset, args.camera)
    frames = parse_frames(args.frames, dataset)
    if args.renders is not None:
        if not args.renders.is_dir():
            raise MissingInputError(f"missing render directory: {args.renders}")
        report = evaluate_renders(args.renders, dataset, cfg, args.camera, frames)
    else:
        report = evaluate_model(_load_params(args.checkpoint), dataset, cfg, args.camera, frames)
    print(report.to_table(), end="")
    print(report.to_record(), end="")
    if args.out is not None:
        report.save(args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _require_out(args)
    base = load_config(args)
    dataset = read_dataset(args.dataset)
    _camera_check(dataset, args.camera)
    frames = parse_frames(args.frames, dataset)
    try:
        rows = ablation_configs(base, args.grid)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    table = [f"{'config':<14} {'PSNR':>7} {'SSIM':>7} {'MSE':>10} {'DepErr':>8}"]
    for name, cfg in rows:
        run_dir = out / name.replace("+", "plus_")
        params, _ = train_stage1(dataset, cfg, run_dir)
        report = evaluate_model(params, dataset, cfg, args.camera, frames)
        report.meta["row"] = name
        report.save(run_dir)
        a = report.aggregate()
        table.append(f"{name:<14} {a['psnr']:7.2f} {a['ssim']:7.4f} {a['mse']:10.6f} {a['depth_error']:8.4f}")
        print(table[-1], flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dynrecon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, FileNotFoundError, CheckpointError) as exc:
        print(f"dynrecon: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"dynrecon: training aborted: {exc}", file=sys.stderr)
        print(f"dynrecon: diagnostics: step={exc.step} total={exc.value:.6g} reference={exc.reference:.6g}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
