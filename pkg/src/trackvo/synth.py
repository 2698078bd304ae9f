"""Seeded synthetic scenes with exact ground truth.

A scene is a smooth camera path over a static point cloud, rendered into the
same feature/depth/trajectory/manifest formats the pipeline ingests, plus the
ground-truth correspondence and corruption annotations the tests need.
Corruption models: isotropic pixel noise, uniform-random outlier detections,
and slowly drifting tracks (the t-junction failure mode the labeler exists
to catch).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import fileio
from .frontend import FrameFeatures, save_features
from .geometry import Intrinsics, Pose, so3_exp

_VIS_MIN_DEPTH = 1e-3  # camera depth below this counts as not visible
_DEPTH_SPLAT_RADIUS = 3


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the generator; defaults give a clean, fully-visible scene."""

    n_frames: int = 100
    n_points: int = 300
    width: int = 640
    height: int = 480
    focal: float = 500.0
    depth_range: tuple = (0.7, 1.6)
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    outlier_mode: str = "uniform"  # "uniform" | "drift"
    drift_rate_range: tuple = (0.6, 1.2)  # px per frame along a fixed direction
    drift_max_px: float = 12.0  # offset at which the drifting feature dies
    drift_relock_frames: int = 6  # clean frames between a re-lock and the next slide
    drift_tail_frames: int = 4  # re-locked frames a track survives before re-detection
    drift_onset_frame: int = 0  # drifted points behave cleanly before this frame
    drift_direction: str = "tangential"  # "tangential" | "swirl" | "random"
    descriptor_dim: int = 32
    descriptor_noise: float = 0.05
    rotation_max: float = 0.02  # rad, per-frame cap
    translation_max: float = 0.05  # scene units, per-frame cap
    margin: float = 20.0  # px border kept free when sampling points
    fps: float = 30.0
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            self.focal, self.focal, self.width / 2.0, self.height / 2.0,
            self.width, self.height,
        )

    @staticmethod
    def stress_depth(**kw) -> "SceneConfig":
        """Points sampled outside the soft depth corridor to hit the regularizer."""
        return replace(SceneConfig(depth_range=(0.05, 7.0)), **kw)

    @staticmethod
    def stress_descriptors(**kw) -> "SceneConfig":
        """Descriptor noise high enough to produce mismatches."""
        return replace(SceneConfig(descriptor_noise=0.8), **kw)


@dataclass
class SyntheticScene:
    config: SceneConfig
    intrinsics: Intrinsics
    poses: list  # world-to-camera gt, one per frame
    points: np.ndarray  # (m, 3) world
    descriptors: np.ndarray  # (m, d) base descriptors (drifting points re-draw on re-lock)
    features: list  # FrameFeatures per frame
    correspondence: list  # per frame: {keypoint_index: point_id}
    exact_pixels: list  # per frame: (n, 2) noise/corruption-free projections
    outlier_observations: set  # {(frame, keypoint_index)} uniform replacements
    drifted_points: set  # point ids given drift corruption
    drift_offsets: list  # per frame: (n,) injected drift magnitude per keypoint

    def depth_map(self, frame: int) -> np.ndarray:
        """Sparse 16-bit depth render: gt points splatted into small patches.

        Nearest (smallest) depth wins where patches overlap; empty pixels are
        0 = invalid. Stored value = depth * depth_scale (1000), millimeters
        at metric scale.
        """
        cfg = self.config
        K = self.intrinsics
        depth = np.full((cfg.height, cfg.width), np.inf)
        pose = self.poses[frame]
        xc = self.points @ pose.R.T + pose.t
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * xc[:, 0] / z + K.cx
            v = K.fy * xc[:, 1] / z + K.cy
        visible = (z > _VIS_MIN_DEPTH) & (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height)
        r = _DEPTH_SPLAT_RADIUS
        for pid in np.nonzero(visible)[0]:
            ci, ri = int(round(u[pid])), int(round(v[pid]))
            y0, y1 = max(0, ri - r), min(cfg.height, ri + r + 1)
            x0, x1 = max(0, ci - r), min(cfg.width, ci + r + 1)
            patch = depth[y0:y1, x0:x1]
            np.minimum(patch, z[pid], out=patch)
        raw = np.where(np.isfinite(depth), np.round(depth * 1000.0), 0.0)
        return np.clip(raw, 0, 65535).astype(np.uint16)


def _smooth_trajectory(cfg: SceneConfig, rng: np.random.Generator) -> list:
    """Orbital camera path: near-constant speed, bounded excursion.

    A sinusoid stalls twice per period and a stalled camera starves the
    solver of parallax, so the path orbits in a random plane (constant
    angular rate) with a small out-of-plane wobble. Per-frame translation
    stays within translation_max and never drops below ~40% of it.
    """
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    e1 = np.cross(n, [0.0, 0.0, 1.0] if abs(n[2]) < 0.9 else [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)

    omega = 2 * math.pi / rng.uniform(24, 48)
    radius = min(rng.uniform(0.55, 0.95) * cfg.translation_max / omega, 0.25)
    wob_amp = rng.uniform(0.0, 0.04)
    wob_freq = 2 * math.pi / rng.uniform(30, 80)
    wob_phase = rng.uniform(0, 2 * math.pi)

    k = np.arange(cfg.n_frames)
    t = omega * k
    pos = (radius * ((np.cos(t) - 1.0)[:, None] * e1 + np.sin(t)[:, None] * e2)
           + (wob_amp * (np.sin(wob_freq * k + wob_phase) - math.sin(wob_phase)))[:, None] * n)
    step = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    if step.max() > 0.95 * cfg.translation_max:
        pos *= 0.95 * cfg.translation_max / step.max()

    rot_amp = rng.uniform(0.01, 0.04, size=3)
    rot_freq = rng.uniform(2 * math.pi / 240, 2 * math.pi / 60, size=3)
    rot_phase = rng.uniform(0, 2 * math.pi, size=3)
    rot_amp = np.minimum(rot_amp, 0.9 * cfg.rotation_max / rot_freq)
    ang = rot_amp * np.sin(rot_freq * k[:, None] + rot_phase) - rot_amp * np.sin(rot_phase)

    poses = []
    for i in range(cfg.n_frames):
        R_cw = so3_exp(ang[i])
        poses.append(Pose(R_cw.T, -R_cw.T @ pos[i]))
    return poses


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Build a deterministic scene from config.seed.

    Per-frame random draws are made for every point regardless of visibility,
    so the random streams (and therefore all outputs) depend only on the
    config, never on intermediate visibility outcomes.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics()

    poses = _smooth_trajectory(cfg, rng)

    # points: sampled on the frame-0 image plane with margin, then lifted
    z0 = rng.uniform(cfg.depth_range[0], cfg.depth_range[1], size=cfg.n_points)
    px0 = rng.uniform(
        [cfg.margin, cfg.margin],
        [cfg.width - cfg.margin, cfg.height - cfg.margin],
        size=(cfg.n_points, 2),
    )
    points = np.stack(
        [
            z0 * (px0[:, 0] - K.cx) / K.fx,
            z0 * (px0[:, 1] - K.cy) / K.fy,
            z0,
        ],
        axis=1,
    )

    base_desc = rng.normal(size=(cfg.n_points, cfg.descriptor_dim))
    base_desc /= np.linalg.norm(base_desc, axis=1, keepdims=True)

    drifted: set = set()
    is_drifter = np.zeros(cfg.n_points, dtype=bool)
    drift_dir = np.zeros((cfg.n_points, 2))
    drift_rate = np.zeros(cfg.n_points)
    drift_ramp = np.ones(cfg.n_points, dtype=int)  # frames of slide per cycle
    drift_cycle = np.ones(cfg.n_points, dtype=int)
    drift_delay = np.zeros(cfg.n_points, dtype=int)
    if cfg.outlier_mode == "drift" and cfg.outlier_fraction > 0:
        n_drift = int(round(cfg.outlier_fraction * cfg.n_points))
        ids = rng.choice(cfg.n_points, size=n_drift, replace=False)
        drifted = set(int(i) for i in ids)
        is_drifter[ids] = True
        theta = rng.uniform(0, 2 * math.pi, size=n_drift)
        if cfg.drift_direction in ("tangential", "swirl"):
            # slide perpendicular to the radial direction at the seed pixel,
            # which keeps the injected error out of the image's scale mode;
            # "swirl" gives every point the same rotational sense, so the
            # corruption mimics a coherent rotation-rate bias
            radial = px0[ids] - np.array([K.cx, K.cy])
            radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-9)
            if cfg.drift_direction == "swirl":
                signs = np.ones(n_drift)
            else:
                signs = np.where(theta < math.pi, 1.0, -1.0)
            drift_dir[ids] = signs[:, None] * np.stack(
                [-radial[:, 1], radial[:, 0]], axis=1
            )
        elif cfg.drift_direction == "random":
            drift_dir[ids] = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        else:
            raise ValueError(f"unknown drift_direction {cfg.drift_direction!r}")
        if not 0 <= cfg.drift_tail_frames < cfg.drift_relock_frames:
            raise ValueError("drift_tail_frames must lie within the re-lock span")
        drift_rate[ids] = rng.uniform(*cfg.drift_rate_range, size=n_drift)
        drift_ramp[ids] = np.ceil(cfg.drift_max_px / drift_rate[ids]).astype(int)
        drift_cycle[ids] = drift_ramp[ids] + cfg.drift_relock_frames
        drift_delay[ids] = rng.integers(0, drift_cycle[ids])  # stagger first slides
    elif cfg.outlier_mode not in ("uniform", "drift"):
        raise ValueError(f"unknown outlier_mode {cfg.outlier_mode!r}")

    features: list = []
    correspondence: list = []
    exact_pixels: list = []
    drift_offsets: list = []
    outlier_obs: set = set()
    run_start = np.zeros(cfg.n_points, dtype=int)
    was_visible = np.zeros(cfg.n_points, dtype=bool)
    cur_desc = base_desc.copy()
    cur_gen = np.zeros(cfg.n_points, dtype=int)
    epoch_base = np.zeros(cfg.n_points, dtype=int)  # re-locks before the current run
    epoch_prev_run = np.zeros(cfg.n_points, dtype=int)

    for k in range(cfg.n_frames):
        pose = poses[k]
        xc = points @ pose.R.T + pose.t
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.stack(
                [K.fx * xc[:, 0] / z + K.cx, K.fy * xc[:, 1] / z + K.cy], axis=1
            )
        in_view = (
            (z > _VIS_MIN_DEPTH)
            & (u[:, 0] >= 0) & (u[:, 0] < cfg.width)
            & (u[:, 1] >= 0) & (u[:, 1] < cfg.height)
        )

        # fixed-order draws, one per point, independent of visibility
        noise = rng.normal(0.0, 1.0, size=(cfg.n_points, 2)) * cfg.pixel_noise
        desc_noise = rng.normal(size=(cfg.n_points, cfg.descriptor_dim))
        unif_flags = rng.random(cfg.n_points)
        unif_px = rng.uniform(
            [0.0, 0.0], [cfg.width - 1e-6, cfg.height - 1e-6], size=(cfg.n_points, 2)
        )

        reentered = in_view & ~was_visible
        epoch_base[reentered] += epoch_prev_run[reentered]
        epoch_prev_run[reentered] = 0
        run_start[reentered] = k

        # drift = slide away from the true pixel at the per-point rate until
        # the offset reaches drift_max_px, then snap back to the true location.
        # The track survives the snap by drift_tail_frames, after which the
        # feature is re-detected (descriptor re-drawn, so the tracker starts a
        # fresh track); the slide repeats after drift_relock_frames clean ones.
        age = k - np.maximum(run_start, cfg.drift_onset_frame) - drift_delay
        cyc, phase = np.divmod(np.maximum(age, 0), drift_cycle)
        relocked = (phase >= drift_ramp) | (age < 0)
        offset_len = drift_rate * phase
        offset_len[relocked] = 0.0
        offset = offset_len[:, None] * drift_dir
        observed = u + offset + noise

        epoch_run = np.where(
            is_drifter & (age >= 0),
            cyc + (phase >= drift_ramp + cfg.drift_tail_frames),
            0,
        )
        gen = epoch_base + epoch_run
        for pid in np.nonzero(gen != cur_gen)[0]:
            # new track identity after a re-lock; child stream keeps the draw
            # independent of visibility history
            fresh = np.random.default_rng([cfg.seed, 104729, int(pid), int(gen[pid])])
            d = fresh.normal(size=cfg.descriptor_dim)
            cur_desc[pid] = d / np.linalg.norm(d)
            cur_gen[pid] = gen[pid]
        obs_ok = (
            in_view
            & (observed[:, 0] >= 0) & (observed[:, 0] < cfg.width)
            & (observed[:, 1] >= 0) & (observed[:, 1] < cfg.height)
        )

        if cfg.outlier_mode == "uniform" and cfg.outlier_fraction > 0:
            replace_mask = obs_ok & (unif_flags < cfg.outlier_fraction)
            observed = np.where(replace_mask[:, None], unif_px, observed)
        else:
            replace_mask = np.zeros(cfg.n_points, dtype=bool)

        pids = np.nonzero(obs_ok)[0]
        perm = rng.permutation(len(pids))
        pids = pids[perm]

        desc = cur_desc[pids] + cfg.descriptor_noise * desc_noise[pids]
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        feats = FrameFeatures(
            frame_index=k,
            keypoints=observed[pids],
            descriptors=desc,
            scores=np.ones(len(pids)),
        )
        features.append(feats)
        correspondence.append({int(i): int(pid) for i, pid in enumerate(pids)})
        exact_pixels.append(u[pids])
        drift_offsets.append(np.linalg.norm(offset[pids], axis=1))
        for i, pid in enumerate(pids):
            if replace_mask[pid]:
                outlier_obs.add((k, int(i)))

        # a dropped observation ends the visibility run for drift purposes
        was_visible = obs_ok
        epoch_prev_run[obs_ok] = epoch_run[obs_ok]

    if all(len(f.keypoints) == 0 for f in features):
        raise ValueError("scene config yields zero visible points in every frame")

    return SyntheticScene(
        config=cfg,
        intrinsics=K,
        poses=poses,
        points=points,
        descriptors=base_desc,
        features=features,
        correspondence=correspondence,
        exact_pixels=exact_pixels,
        outlier_observations=outlier_obs,
        drifted_points=drifted,
        drift_offsets=drift_offsets,
    )


def write_scene(scene: SyntheticScene, out_dir, write_depth: bool = True) -> None:
    """Write the scene in pipeline format: features, gt, depth, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for k, feats in enumerate(scene.features):
        save_features(os.path.join(out_dir, f"frame_{k:06d}.features"), feats)
        if write_depth:
            fileio.write_pgm(
                os.path.join(out_dir, f"depth_{k:06d}.pgm"), scene.depth_map(k)
            )
    fileio.save_intrinsics(os.path.join(out_dir, "intrinsics.txt"), scene.intrinsics)
    fileio.save_trajectory(
        os.path.join(out_dir, "gt.tum"),
        list(enumerate(scene.poses)),
        scene.config.fps,
    )
    fileio.save_manifest(
        os.path.join(out_dir, "manifest.txt"),
        fps=scene.config.fps,
        intrinsics="intrinsics.txt",
        frames="frame_*.features",
        depth_scale=1000.0,
        depths="depth_*.pgm" if write_depth else None,
        trajectory="gt.tum",
    )
