"""Command-line interface.

Subcommands:
  gen       emit parametric meshes (OBJ) and sampled scene poses
  render    emit the four NOCS maps of sampled scenes
  estimate  recover a pose from four NOCS map files
  eval      aggregate a trial CSV into mAP numbers
  bench     run a full experiment from a config file
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..metrics import map_at_thresholds
from ..nocs import read_nocs_map, write_nocs_map, write_obj
from ..solver import estimate_pose_decoupled, estimate_pose_joint
from ..stereo import StereoRig
from .configio import format_pose, load_experiment_config
from .experiment import (
    ExperimentConfig,
    plot_reports,
    read_csv_triples,
    run_experiment,
    run_handle_ablation,
    summarize,
    write_csv,
)
from .meshes import CATEGORIES
from .scene import SceneConfig, render_scene_nocs, sample_scene


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereonocs", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for trials")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument("--timing", action="store_true", help="record per-trial runtimes in the CSV (breaks byte determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="emit meshes and scene poses")
    p_gen.add_argument("--category", choices=CATEGORIES, default="bottle")
    p_gen.add_argument("--count", type=int, default=1)

    p_render = sub.add_parser("render", help="emit four NOCS maps per scene")
    p_render.add_argument("--category", choices=CATEGORIES, default="bottle")
    p_render.add_argument("--count", type=int, default=1)

    p_est = sub.add_parser("estimate", help="estimate a pose from NOCS map files")
    p_est.add_argument("--left-front", type=Path, required=True)
    p_est.add_argument("--left-back", type=Path)
    p_est.add_argument("--right-front", type=Path, required=True)
    p_est.add_argument("--right-back", type=Path)
    p_est.add_argument("--method", choices=("decoupled", "joint"), default="decoupled")
    p_est.add_argument("--focal", type=float, default=600.0, help="focal length in pixels")
    p_est.add_argument("--baseline", type=float, default=0.06, help="rig baseline in meters")

    p_eval = sub.add_parser("eval", help="aggregate a trial CSV")
    p_eval.add_argument("--csv", type=Path, required=True)

    sub.add_parser("bench", help="run the experiment in --config")

    p_abl = sub.add_parser("ablation", help="mug handle-away back-view ablation")
    p_abl.add_argument("--trials", type=int, default=200)
    p_abl.add_argument("--sigma", type=float, default=0.01)
    p_abl.add_argument("--dropout", type=float, default=0.1)
    return parser


def _scene_config(args) -> SceneConfig:
    if args.config is not None:
        return load_experiment_config(args.config).scene
    return SceneConfig()


def _cmd_gen(args) -> int:
    cfg = replace(_scene_config(args), category=args.category)
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    for i in range(args.count):
        scene = sample_scene(cfg, rng)
        mesh_path = args.out / f"{args.category}_{i:03d}_mesh.obj"
        pose_path = args.out / f"{args.category}_{i:03d}_pose.txt"
        write_obj(scene.mesh_nocs, mesh_path)
        pose_path.write_text(format_pose(scene.pose), encoding="utf-8")
        if not args.quiet:
            print(f"wrote {mesh_path} and {pose_path}")
    return 0


def _cmd_render(args) -> int:
    cfg = replace(_scene_config(args), category=args.category)
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    tags = ("left_front", "left_back", "right_front", "right_back")
    for i in range(args.count):
        scene = sample_scene(cfg, rng)
        maps = render_scene_nocs(scene)
        for tag, nmap in zip(tags, maps):
            path = args.out / f"{args.category}_{i:03d}_{tag}.nocs"
            write_nocs_map(nmap, path)
        pose_path = args.out / f"{args.category}_{i:03d}_pose.txt"
        pose_path.write_text(format_pose(scene.pose), encoding="utf-8")
        if not args.quiet:
            print(f"wrote {args.category}_{i:03d}_* ({maps[0].mask.sum()} masked pixels)")
    return 0


def _cmd_estimate(args) -> int:
    lf = read_nocs_map(args.left_front)
    rf = read_nocs_map(args.right_front)
    K = SceneConfig(image_width=lf.width, image_height=lf.height, focal_px=args.focal, baseline_m=args.baseline).intrinsics()
    rig = StereoRig.rectified(K, K, args.baseline)
    if args.method == "joint":
        est = estimate_pose_joint(lf, rf, rig)
    else:
        if args.left_back is None or args.right_back is None:
            print("decoupled estimation needs --left-back and --right-back", file=sys.stderr)
            return 2
        lb = read_nocs_map(args.left_back)
        rb = read_nocs_map(args.right_back)
        est = estimate_pose_decoupled(lf, lb, rf, rb, rig)
    sys.stdout.write(format_pose(est.pose))
    if not args.quiet:
        print(f"# method={est.method} inliers={est.inlier_count} mean_residual_px={est.mean_residual_px:.4f}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    groups = read_csv_triples(args.csv)
    if not groups:
        print("no trials in CSV", file=sys.stderr)
        return 1
    print(f"{'method':<10} {'sigma':>8} {'trials':>7} {'3D_25':>7} {'3D_50':>7} {'10d5cm':>7} {'10d10cm':>8}")
    for (method, sigma), triples in sorted(groups.items()):
        rep = map_at_thresholds(triples)
        print(
            f"{method:<10} {sigma:>8.4g} {rep.trial_count:>7d} {rep.map_3d_25:>7.3f} "
            f"{rep.map_3d_50:>7.3f} {rep.map_10deg_5cm:>7.3f} {rep.map_10deg_10cm:>8.3f}"
        )
    return 0


def _cmd_bench(args) -> int:
    if args.config is not None:
        cfg = load_experiment_config(args.config)
    else:
        cfg = ExperimentConfig()
    cfg = replace(cfg, master_seed=args.seed, jobs=args.jobs, measure_timing=args.timing or cfg.measure_timing)
    args.out.mkdir(parents=True, exist_ok=True)

    progress = None
    if not args.quiet:
        total = len(cfg.noise_sigmas) * cfg.trials

        def progress(tid):
            print(f"trial {tid + 1}/{total} done", file=sys.stderr)

    records, reports = run_experiment(cfg, progress=progress)
    csv_path = args.out / "trials.csv"
    write_csv(records, csv_path)
    summary = summarize(records, reports)
    (args.out / "summary.txt").write_text(summary, encoding="utf-8")
    plot_reports(reports, args.out / "accuracy.svg")
    if not args.quiet:
        print(summary, end="")
        print(f"wrote {csv_path}, summary.txt, accuracy.svg")
    return 0


def _cmd_ablation(args) -> int:
    rep = run_handle_ablation(
        trials=args.trials, sigma=args.sigma, dropout=args.dropout,
        master_seed=args.seed, jobs=args.jobs,
    )
    print(rep.table(), end="")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "render": _cmd_render,
    "estimate": _cmd_estimate,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablation": _cmd_ablation,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
