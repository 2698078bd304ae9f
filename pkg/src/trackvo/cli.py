"""Command-line surface for the pipeline.

Subcommands: features, vo, label, emit-pairs, eval-pnp, eval-traj, synth.
Exit codes: 0 success, 2 usage error (argparse), 1 runtime error. Messages go
to stderr; data goes only to the declared output paths. Stochastic commands
require --seed so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .backend import BAConfig, VOState, process_frame
from .evalkit import (
    PnPConfig,
    pose_pair_eval,
    sim3_align,
    trajectory_positions,
    trajectory_relative_errors,
    weights_from_labels,
)
from .fileio import (
    LABEL_IGNORE,
    LABEL_STABLE,
    LABEL_UNSTABLE,
    load_labels,
    load_manifest,
    load_trajectory,
    read_pgm,
    save_labels,
    save_pairs,
    save_trajectory,
)
from .frontend import DEFAULT_MAX_POINTS, detect_and_describe, load_features, save_features
from .labeler import (
    STABLE_MEAN_MAX,
    STABLE_MIN_LENGTH,
    UNSTABLE_MAX_MIN,
    emit_training_pairs,
    label_sequence,
)
from .synth import SceneConfig, generate_scene, write_scene
from .tracking import match_bidirectional


def _g(x) -> str:
    return "%.10g" % float(x)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _int_list(text: str):
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str):
    try:
        return [float(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _tau_of(args) -> float | None:
    # tau <= 0 disables the distance gate entirely
    return args.tau if args.tau > 0 else None


def _load_sequence(manifest, stride: int = 1):
    """Load feature files from a manifest, re-indexed 0..n-1 after striding."""
    files = manifest.feature_files()
    if not files:
        raise FileNotFoundError(
            f"no feature files match {manifest.frames_glob!r} under {manifest.base_dir}"
        )
    files = files[::stride]
    return [load_features(path, frame_index=k) for k, path in enumerate(files)]


def _ba_config(args) -> BAConfig:
    return BAConfig(n_last=args.n_last, max_iterations=args.max_iters)


def _run_vo(features_seq, intrinsics, config, tau, weight_fn=None, stats_rows=None):
    """Drive the tracker + backend over a sequence, optionally logging stats."""
    state = VOState(intrinsics, config)
    prev = None
    for feats in features_seq:
        matches = (
            match_bidirectional(prev.descriptors, feats.descriptors, tau)
            if prev is not None
            else []
        )
        process_frame(state, feats, matches, weight_fn=weight_fn)
        if stats_rows is not None:
            r = state.last_result
            stats_rows.append(
                (
                    feats.frame_index,
                    len(matches),
                    len(state.problem.points),
                    r.iterations if r else 0,
                    r.final_cost if r else 0.0,
                    r.status if r else "skipped",
                )
            )
        prev = feats
    return state


def _add_vo_flags(p, with_weights: bool) -> None:
    p.add_argument("--n-last", type=int, default=30, help="sliding window size")
    p.add_argument("--max-iters", type=int, default=100, help="LM iteration cap per frame")
    p.add_argument("--tau", type=float, default=0.7, help="match distance gate; <= 0 disables")
    p.add_argument("--stride", type=int, default=1, help="use every Nth frame")
    if with_weights:
        p.add_argument("--labels", help="directory of label files for weighted VO")
        p.add_argument("--w-stable", type=float, default=1.0)
        p.add_argument("--w-unstable", type=float, default=0.1)
        p.add_argument("--w-ignore", type=float, default=1.0)


def _load_label_dir(path):
    files = sorted(glob.glob(os.path.join(path, "*.labels")))
    if not files:
        raise FileNotFoundError(f"no *.labels files in {path}")
    return [load_labels(f) for f in files]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_features(args) -> int:
    files = sorted(glob.glob(args.images))
    if not files:
        raise FileNotFoundError(f"no images match {args.images!r}")
    os.makedirs(args.out, exist_ok=True)
    for k, path in enumerate(files):
        img = read_pgm(path)
        feats = detect_and_describe(img, max_points=args.max_points, frame_index=k)
        save_features(os.path.join(args.out, f"frame_{k:06d}.features"), feats)
    _say(f"wrote features for {len(files)} frames to {args.out}")
    return 0


def _cmd_vo(args) -> int:
    manifest = load_manifest(args.manifest)
    features_seq = _load_sequence(manifest, args.stride)
    intrinsics = manifest.load_intrinsics()

    weight_fn = None
    if args.labels:
        labels_per_frame = _load_label_dir(args.labels)
        if len(labels_per_frame) != len(features_seq):
            raise ValueError(
                f"{len(labels_per_frame)} label files vs {len(features_seq)} frames"
            )
        weight_fn = weights_from_labels(
            labels_per_frame,
            {
                LABEL_STABLE: args.w_stable,
                LABEL_UNSTABLE: args.w_unstable,
                LABEL_IGNORE: args.w_ignore,
            },
        )

    stats_rows = [] if args.stats else None
    state = _run_vo(
        features_seq, intrinsics, _ba_config(args), _tau_of(args), weight_fn, stats_rows
    )

    fps = manifest.fps / args.stride
    save_trajectory(args.traj, state.trajectory(), fps)
    if args.stats:
        with open(args.stats, "w") as f:
            f.write("frame,matches,points_in_window,iterations,final_cost,status\n")
            for frame, m, npts, it, cost, status in stats_rows:
                f.write(f"{frame},{m},{npts},{it},{_g(cost)},{status}\n")
    _say(f"wrote {len(state.trajectory())} poses to {args.traj}")
    return 0


def _cmd_label(args) -> int:
    manifest = load_manifest(args.manifest)
    features_seq = _load_sequence(manifest, args.stride)
    intrinsics = manifest.load_intrinsics()

    state = _run_vo(features_seq, intrinsics, _ba_config(args), _tau_of(args))
    labels_per_frame, stats = label_sequence(
        state, features_seq, args.min_length, args.mean_max, args.max_min
    )

    os.makedirs(args.out, exist_ok=True)
    for k, rows in enumerate(labels_per_frame):
        save_labels(os.path.join(args.out, f"frame_{k:06d}.labels"), rows)
    n_stable = sum(
        1 for rows in labels_per_frame for r in rows if r[3] == LABEL_STABLE
    )
    n_unstable = sum(
        1 for rows in labels_per_frame for r in rows if r[3] == LABEL_UNSTABLE
    )
    _say(
        f"labeled {len(labels_per_frame)} frames ({len(stats)} tracks scored, "
        f"{n_stable} stable / {n_unstable} unstable keypoints) in {args.out}"
    )
    return 0


def _cmd_emit_pairs(args) -> int:
    labels_per_frame = _load_label_dir(args.labels)
    pairs = emit_training_pairs(
        labels_per_frame,
        pair_window=args.pair_window,
        pairs_per_frame=args.pairs_per_frame,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    for pair in pairs:
        rows = [
            (pa[0], pa[1], pb[0], pb[1], tid, label)
            for pa, pb, tid, label in pair.correspondences
        ]
        save_pairs(
            os.path.join(args.out, f"pair_{pair.frame_a:06d}_{pair.frame_b:06d}.pairs"),
            pair.frame_a,
            pair.frame_b,
            rows,
        )
    _say(f"wrote {len(pairs)} pair files to {args.out}")
    return 0


def _cmd_eval_pnp(args) -> int:
    manifest = load_manifest(args.manifest)
    if manifest.trajectory_path is None:
        raise ValueError("manifest has no trajectory entry (ground truth required)")
    depth_files = manifest.depth_files()
    if not depth_files:
        raise ValueError("manifest has no depths entry (ground-truth depth required)")

    features_seq = _load_sequence(manifest)
    _, gt_poses = load_trajectory(manifest.trajectory_path)
    if len(gt_poses) != len(features_seq) or len(depth_files) != len(features_seq):
        raise ValueError(
            f"frame count mismatch: {len(features_seq)} features, "
            f"{len(depth_files)} depth maps, {len(gt_poses)} gt poses"
        )
    depth_maps = [read_pgm(p) for p in depth_files]
    intrinsics = manifest.load_intrinsics()

    children = np.random.SeedSequence(args.seed).spawn(len(args.frame_diffs))
    results = []
    for child, diff in zip(children, args.frame_diffs):
        results.append(
            pose_pair_eval(
                features_seq,
                depth_maps,
                gt_poses,
                intrinsics,
                frame_diff=diff,
                n_pairs=args.pairs,
                seed=int(child.generate_state(1)[0]),
                depth_scale=manifest.depth_scale,
                pnp_config=PnPConfig(),
                tau=_tau_of(args),
            )
        )

    with open(args.out, "w") as f:
        f.write("frame_diff,rot_lt_5deg,trans_lt_5cm,n_pairs\n")
        for r in results:
            f.write(f"{r.frame_diff},{_g(r.rot_lt_5deg)},{_g(r.trans_lt_5cm)},{r.n_pairs}\n")
    _say(f"wrote {len(results)} rows to {args.out}")
    return 0


def _cmd_eval_traj(args) -> int:
    ts_est, est_poses = load_trajectory(args.est)
    ts_gt, gt_poses = load_trajectory(args.gt)
    if len(est_poses) != len(gt_poses):
        raise ValueError(
            f"trajectory lengths differ: {len(est_poses)} ({args.est}) vs "
            f"{len(gt_poses)} ({args.gt})"
        )
    if len(ts_est) and np.max(np.abs(np.asarray(ts_est) - np.asarray(ts_gt))) > 1e-6:
        raise ValueError("trajectory timestamps do not line up")

    if args.sim3:
        align = sim3_align(trajectory_positions(est_poses), trajectory_positions(gt_poses))
        est_poses = [align.apply_pose(p) for p in est_poses]
        _say(f"sim3: scale {_g(align.scale)}, rms {_g(align.rms)}")

    rows = trajectory_relative_errors(est_poses, gt_poses, args.lengths, args.fps)
    with open(args.out, "w") as f:
        f.write("length_s,n_frames,rot_deg,trans,n_samples\n")
        for r in rows:
            f.write(
                f"{_g(r.length_s)},{r.n_frames},{_g(r.rot_deg)},{_g(r.trans)},{r.n_samples}\n"
            )
    _say(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    cfg = SceneConfig(
        n_frames=args.frames,
        n_points=args.points,
        width=args.width,
        height=args.height,
        focal=args.focal,
        pixel_noise=args.noise,
        outlier_fraction=args.outlier_frac,
        outlier_mode=args.outlier_mode,
        fps=args.fps,
        seed=args.seed,
    )
    scene = generate_scene(cfg)
    write_scene(scene, args.out, write_depth=not args.no_depth)
    n_obs = sum(len(f.keypoints) for f in scene.features)
    _say(f"wrote {cfg.n_frames}-frame scene ({n_obs} observations) to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackvo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="detect keypoints + descriptors in images")
    p.add_argument("--images", required=True, help="glob of grayscale PGM images")
    p.add_argument("--out", required=True, help="output directory for feature files")
    p.add_argument("--max-points", type=int, default=DEFAULT_MAX_POINTS)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("vo", help="run sliding-window VO over a feature sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--traj", required=True, help="output trajectory (TUM format)")
    p.add_argument("--stats", help="optional per-frame solver stats CSV")
    _add_vo_flags(p, with_weights=True)
    p.set_defaults(func=_cmd_vo)

    p = sub.add_parser("label", help="run VO and emit per-frame stability labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for label files")
    p.add_argument("--min-length", type=int, default=STABLE_MIN_LENGTH)
    p.add_argument("--mean-max", type=float, default=STABLE_MEAN_MAX)
    p.add_argument("--max-min", type=float, default=UNSTABLE_MAX_MIN)
    _add_vo_flags(p, with_weights=False)
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("emit-pairs", help="sample labeled training pairs")
    p.add_argument("--labels", required=True, help="directory of label files")
    p.add_argument("--out", required=True, help="output directory for pair files")
    p.add_argument("--pair-window", type=int, default=60)
    p.add_argument("--pairs-per-frame", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_emit_pairs)

    p = sub.add_parser("eval-pnp", help="pose-pair PnP accuracy against gt depth/poses")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--frame-diffs", type=_int_list, default=[1, 5, 10])
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tau", type=float, default=0.0, help="match gate; <= 0 disables (default)")
    p.set_defaults(func=_cmd_eval_pnp)

    p = sub.add_parser("eval-traj", help="sub-trajectory relative errors of est vs gt")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--lengths", type=_float_list, default=[2.0, 5.0, 10.0])
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("--sim3", action="store_true", help="sim(3)-align est onto gt first")
    p.set_defaults(func=_cmd_eval_traj)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--points", type=int, default=300)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--focal", type=float, default=500.0)
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--outlier-mode", choices=["uniform", "drift"], default="uniform")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--no-depth", action="store_true", help="skip depth map output")
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        _say(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
