"""Synthetic-scene generator: determinism, exactness, corruption models."""

import numpy as np
import pytest

from trackvo.fileio import load_manifest, load_trajectory
from trackvo.synth import SceneConfig, SyntheticScene, generate_scene, write_scene


def test_same_config_same_scene():
    cfg = SceneConfig(n_frames=12, n_points=40, pixel_noise=0.3,
                      outlier_fraction=0.1, outlier_mode="drift", seed=9)
    a = generate_scene(cfg)
    b = generate_scene(cfg)
    assert np.array_equal(a.points, b.points)
    for fa, fb in zip(a.features, b.features):
        assert np.array_equal(fa.keypoints, fb.keypoints)
        assert np.array_equal(fa.descriptors, fb.descriptors)
    assert a.correspondence == b.correspondence
    assert a.drifted_points == b.drifted_points
    for pa, pb in zip(a.poses, b.poses):
        assert np.array_equal(pa.R, pb.R) and np.array_equal(pa.t, pb.t)


def test_different_seed_different_scene():
    a = generate_scene(SceneConfig(n_frames=4, n_points=30, seed=1))
    b = generate_scene(SceneConfig(n_frames=4, n_points=30, seed=2))
    assert not np.array_equal(a.points, b.points)


def test_clean_observations_are_exact_projections():
    cfg = SceneConfig(n_frames=20, n_points=50, seed=3)
    scene = generate_scene(cfg)
    K = scene.intrinsics
    for k, feats in enumerate(scene.features):
        assert len(feats) == len(scene.correspondence[k]) == len(scene.exact_pixels[k])
        assert len(feats) > 0
        pose = scene.poses[k]
        for kp, pid in scene.correspondence[k].items():
            xc = pose.R @ scene.points[pid] + pose.t
            assert xc[2] > 0
            u = np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])
            assert np.max(np.abs(feats.keypoints[kp] - u)) < 1e-12
            assert np.max(np.abs(scene.exact_pixels[k][kp] - u)) < 1e-12
            assert 0 <= u[0] < cfg.width and 0 <= u[1] < cfg.height


def test_descriptors_separate_points():
    scene = generate_scene(SceneConfig(n_frames=2, n_points=60, seed=5))
    f0, f1 = scene.features
    inv1 = {pid: kp for kp, pid in scene.correspondence[1].items()}
    for kp0, pid in scene.correspondence[0].items():
        if pid not in inv1:
            continue
        d_same = np.linalg.norm(f0.descriptors[kp0] - f1.descriptors[inv1[pid]])
        d_other = min(
            np.linalg.norm(f0.descriptors[kp0] - f1.descriptors[kp1])
            for kp1 in range(len(f1))
            if kp1 != inv1[pid]
        )
        # same-point distances must clear the default matching threshold,
        # different-point distances must not
        assert d_same < 0.7 < d_other


def test_stress_presets():
    deep = generate_scene(SceneConfig.stress_depth(n_frames=2, n_points=80, seed=7))
    z0 = deep.points[:, 2]
    assert (z0 < 0.1).any() and (z0 > 5.0).any()

    noisy_cfg = SceneConfig.stress_descriptors(n_frames=2, n_points=80, seed=7)
    assert noisy_cfg.descriptor_noise == pytest.approx(0.8)
    generate_scene(noisy_cfg)  # must still be a valid scene


def test_depth_map_values():
    scene = generate_scene(SceneConfig(n_frames=3, n_points=40, seed=11))
    depth = scene.depth_map(0)
    assert depth.dtype == np.uint16
    pose = scene.poses[0]
    K = scene.intrinsics
    best = None
    for kp, pid in scene.correspondence[0].items():
        z = (pose.R @ scene.points[pid] + pose.t)[2]
        if best is None or z < best[1]:
            best = (kp, z)
    kp, z = best
    u, v = scene.features[0].keypoints[kp]
    assert depth[int(round(v)), int(round(u))] == round(z * 1000)
    # every splat is at most our own depth where defined
    vals = depth[depth > 0]
    assert vals.min() >= 100  # nothing closer than 0.1 scene units


def test_all_invisible_scene_raises():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(n_frames=3, n_points=5, depth_range=(-3.0, -2.0)))


def test_unknown_outlier_mode_raises():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(outlier_fraction=0.1, outlier_mode="bogus"))


def test_uniform_outliers_flagged_and_replaced():
    cfg = SceneConfig(n_frames=15, n_points=80, outlier_fraction=0.1,
                      outlier_mode="uniform", seed=13)
    scene = generate_scene(cfg)
    n_obs = sum(len(f) for f in scene.features)
    frac = len(scene.outlier_observations) / n_obs
    assert 0.05 < frac < 0.16
    for k, feats in enumerate(scene.features):
        for kp in range(len(feats)):
            d = np.linalg.norm(feats.keypoints[kp] - scene.exact_pixels[k][kp])
            if (k, kp) in scene.outlier_observations:
                assert 0 <= feats.keypoints[kp][0] < cfg.width
            else:
                assert d < 1e-12


def test_drift_offsets_ramp_snap_and_redetect():
    cfg = SceneConfig(n_frames=60, n_points=100, outlier_fraction=0.1,
                      outlier_mode="drift", seed=17)
    scene = generate_scene(cfg)
    assert len(scene.drifted_points) == 10

    timelines = {}
    descs = {}
    for k, feats in enumerate(scene.features):
        for kp, pid in scene.correspondence[k].items():
            off = scene.drift_offsets[k][kp]
            d = np.linalg.norm(feats.keypoints[kp] - scene.exact_pixels[k][kp])
            assert d == pytest.approx(off, abs=1e-9)
            if pid not in scene.drifted_points:
                assert off == 0.0
            else:
                assert off <= cfg.drift_max_px + 1e-9
                timelines.setdefault(pid, []).append((k, off))
            descs.setdefault(pid, []).append(feats.descriptors[kp])

    n_gross = n_redetected = 0
    for pid, tl in timelines.items():
        frames = [k for k, _ in tl]
        offs = np.array([o for _, o in tl])
        assert offs.max() > 0.0  # every drifter slides at some point
        n_gross += offs.max() >= 5.0
        # within a visibility run the offset either grows by the point's
        # fixed per-frame rate or snaps back to exactly zero
        rates = set()
        for i in range(1, len(frames)):
            if frames[i] - frames[i - 1] > 1:
                continue
            d = offs[i] - offs[i - 1]
            if d > 1e-9:
                rates.add(round(float(d), 6))
            else:
                assert offs[i] == 0.0
        assert len(rates) == 1
        (rate,) = rates
        assert cfg.drift_rate_range[0] - 1e-6 <= rate <= cfg.drift_rate_range[1] + 1e-6
    assert n_gross >= 8  # most drifters reach a labelable excursion

    # a completed slide cycle ends in re-detection: the descriptor is re-drawn
    # so the matcher starts a new track; clean points keep theirs throughout
    for pid, ds in descs.items():
        jumps = sum(
            1 for a, b in zip(ds, ds[1:]) if np.linalg.norm(b - a) > 0.7
        )
        if pid in scene.drifted_points:
            n_redetected += jumps > 0
        else:
            assert jumps == 0
    assert n_redetected >= 7


def test_write_scene_layout(tmp_path):
    cfg = SceneConfig(n_frames=4, n_points=25, seed=19, fps=10.0)
    scene = generate_scene(cfg)
    write_scene(scene, tmp_path)
    man = load_manifest(tmp_path / "manifest.txt")
    assert man.fps == pytest.approx(10.0)
    assert len(man.feature_files()) == 4
    assert len(man.depth_files()) == 4
    ts, poses = load_trajectory(tmp_path / "gt.tum")
    assert len(poses) == 4
    assert ts[1] - ts[0] == pytest.approx(0.1)
    intr = man.load_intrinsics()
    assert intr.width == cfg.width

    bare = tmp_path / "bare"
    write_scene(scene, bare, write_depth=False)
    man2 = load_manifest(bare / "manifest.txt")
    assert man2.depth_files() == []
