"""Mutual-NN matching and track-graph formation."""

import numpy as np
import pytest

from trackvo.frontend import FrameFeatures
from trackvo.synth import SceneConfig, generate_scene
from trackvo.tracking import (
    DEFAULT_MATCH_TAU,
    Match,
    Track,
    TrackGraph,
    extend_tracks,
    match_bidirectional,
)


def _brute_force(desc_a, desc_b, tau):
    """Literal mutual-NN definition, O(n^2) loops, lowest-index ties."""
    na, nb = len(desc_a), len(desc_b)
    out = []
    for i in range(na):
        best_j, best_d = None, np.inf
        for j in range(nb):
            d = np.linalg.norm(desc_a[i] - desc_b[j])
            if d < best_d:
                best_j, best_d = j, d
        back, back_d = None, np.inf
        for i2 in range(na):
            d = np.linalg.norm(desc_a[i2] - desc_b[best_j])
            if d < back_d:
                back, back_d = i2, d
        if back == i and (tau is None or best_d <= tau):
            out.append((i, best_j, best_d))
    return out


def test_hand_built_three_by_three_case():
    a = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    b = np.array([[0.1, 0.0], [20.0, 20.0], [0.0, 9.8]])
    got = match_bidirectional(a, b, tau=None)
    assert [(m.index_a, m.index_b) for m in got] == [(0, 0), (2, 2)]
    assert got[0].distance == pytest.approx(0.1)
    assert got[1].distance == pytest.approx(0.2)

    tight = match_bidirectional(a, b, tau=0.15)
    assert [(m.index_a, m.index_b) for m in tight] == [(0, 0)]


def test_matches_equal_brute_force():
    rng = np.random.default_rng(11)
    for na, nb in [(5, 8), (40, 25), (130, 70)]:  # last crosses the row chunk
        desc_a = rng.normal(size=(na, 16))
        desc_b = rng.normal(size=(nb, 16))
        for tau in (None, 5.0):
            got = [(m.index_a, m.index_b) for m in match_bidirectional(desc_a, desc_b, tau)]
            want = [(i, j) for (i, j, _) in _brute_force(desc_a, desc_b, tau)]
            assert got == want


def test_matches_are_sorted_and_one_to_one():
    rng = np.random.default_rng(5)
    for trial in range(20):
        desc_a = rng.normal(size=(60, 8))
        desc_b = rng.normal(size=(55, 8))
        ms = match_bidirectional(desc_a, desc_b, tau=None)
        ia = [m.index_a for m in ms]
        ib = [m.index_b for m in ms]
        assert ia == sorted(ia)
        assert len(set(ia)) == len(ia)
        assert len(set(ib)) == len(ib)


def test_tau_boundary_keeps_equality_and_none_disables():
    a = np.array([[0.0, 0.0]])
    b = np.array([[0.8, 0.0]])
    assert match_bidirectional(a, b) == []  # 0.8 > default 0.7
    kept = match_bidirectional(a, b, tau=0.8)
    assert len(kept) == 1 and kept[0].distance == pytest.approx(0.8)
    assert len(match_bidirectional(a, b, tau=None)) == 1


def test_empty_sides_match_nothing():
    assert match_bidirectional(np.zeros((0, 4)), np.zeros((3, 4))) == []
    assert match_bidirectional(np.zeros((3, 4)), np.zeros((0, 4))) == []


def test_three_frame_chain_builds_expected_tracks():
    e0 = np.array([1.0, 0.0]) * 10
    e1 = np.array([0.0, 1.0]) * 10
    f0 = FrameFeatures(0, [[0, 0], [5, 5]], [e0, e1], [1.0, 1.0])
    f1 = FrameFeatures(1, [[1, 1], [6, 6]], [e1, e0], [1.0, 1.0])
    f2 = FrameFeatures(2, [[7, 7]], [e0], [1.0])

    g = TrackGraph()
    g.seed_frame(f0)
    extend_tracks(g, match_bidirectional(f0.descriptors, f1.descriptors), (0, 1), f1)
    extend_tracks(g, match_bidirectional(f1.descriptors, f2.descriptors), (1, 2), f2)

    assert len(g.tracks) == 2
    t0, t1 = g.tracks[0], g.tracks[1]
    assert [(f, k) for (f, k, _) in t0.observations] == [(0, 0), (1, 1), (2, 0)]
    assert np.allclose([p for (_, _, p) in t0.observations], [[0, 0], [6, 6], [7, 7]])
    assert t0.live
    assert [(f, k) for (f, k, _) in t1.observations] == [(0, 1), (1, 0)]
    assert not t1.live


def test_unmatched_tracks_terminate_for_good():
    desc = np.eye(3) * 10
    f0 = FrameFeatures(0, np.zeros((3, 2)), desc, np.ones(3))
    f1 = FrameFeatures(1, np.ones((2, 2)), desc[:2], np.ones(2))
    g = TrackGraph()
    g.seed_frame(f0)
    extend_tracks(g, match_bidirectional(f0.descriptors, f1.descriptors), (0, 1), f1)
    assert not g.tracks[2].live

    # the same descriptor reappearing later starts a new track, not a revival
    f2 = FrameFeatures(2, np.ones((3, 2)), desc, np.ones(3))
    extend_tracks(g, match_bidirectional(f1.descriptors, f2.descriptors), (1, 2), f2)
    revived = g.track_of(2, 2)
    assert revived.track_id == 3
    assert not g.tracks[2].live
    assert len(g.tracks[2]) == 1


def test_every_keypoint_in_exactly_one_track():
    rng = np.random.default_rng(8)
    base = rng.normal(size=(30, 12))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    frames = []
    for k in range(8):
        keep = rng.random(30) < 0.8
        idx = np.nonzero(keep)[0]
        rng.shuffle(idx)
        desc = base[idx] + 0.02 * rng.normal(size=(len(idx), 12))
        frames.append(FrameFeatures(k, rng.uniform(0, 100, (len(idx), 2)), desc, np.ones(len(idx))))

    g = TrackGraph()
    g.seed_frame(frames[0])
    for k in range(1, 8):
        ms = match_bidirectional(frames[k - 1].descriptors, frames[k].descriptors)
        extend_tracks(g, ms, (k - 1, k), frames[k])

    seen = {}
    for tid, tr in g.tracks.items():
        for (f, kp, _) in tr.observations:
            assert (f, kp) not in seen, "keypoint owned by two tracks"
            seen[(f, kp)] = tid
    for k, feats in enumerate(frames):
        at = g.tracks_at(k)
        assert sorted(at.keys()) == list(range(len(feats)))
        for kp, tid in at.items():
            assert seen[(k, kp)] == tid


def test_noise_free_tracks_follow_ground_truth_runs():
    cfg = SceneConfig(n_frames=40, n_points=60, descriptor_noise=0.0, seed=4)
    scene = generate_scene(cfg)
    g = TrackGraph()
    g.seed_frame(scene.features[0])
    for k in range(1, cfg.n_frames):
        ms = match_bidirectional(
            scene.features[k - 1].descriptors, scene.features[k].descriptors
        )
        extend_tracks(g, ms, (k - 1, k), scene.features[k])

    # observed-frame timeline per ground-truth point
    observed = {}
    for k, corr in enumerate(scene.correspondence):
        for kp, pid in corr.items():
            observed.setdefault(pid, []).append(k)

    runs = {}
    for pid, frames in observed.items():
        frames = sorted(frames)
        runs[pid] = 1 + sum(b - a > 1 for a, b in zip(frames, frames[1:]))

    per_pid_tracks = {}
    for tid, tr in g.tracks.items():
        pids = {scene.correspondence[f][kp] for (f, kp, _) in tr.observations}
        assert len(pids) == 1, "track mixes ground-truth points"
        pid = pids.pop()
        per_pid_tracks.setdefault(pid, []).append(tr)
        # pixels must be the exact noise-free projections
        for (f, kp, p) in tr.observations:
            i = list(scene.correspondence[f].keys())[
                list(scene.correspondence[f].values()).index(pid)
            ]
            assert kp == i

    for pid, frames in observed.items():
        tracks = per_pid_tracks.get(pid, [])
        assert len(tracks) == runs[pid]
        assert sum(len(t) for t in tracks) == len(frames)


def test_extend_validates_frame_bookkeeping():
    f0 = FrameFeatures(0, [[0, 0]], np.eye(1, 4), [1.0])
    f1 = FrameFeatures(1, [[1, 1]], np.eye(1, 4), [1.0])
    f3 = FrameFeatures(3, [[1, 1]], np.eye(1, 4), [1.0])
    g = TrackGraph()
    g.seed_frame(f0)
    with pytest.raises(ValueError):
        extend_tracks(g, [], (0, 2), f3)
    with pytest.raises(ValueError):
        extend_tracks(g, [], (1, 2), f1)
    with pytest.raises(ValueError):
        extend_tracks(g, [], (0, 1), f3)
    with pytest.raises(ValueError):
        g.seed_frame(f1)

    fresh = TrackGraph()
    fresh.seed_frame(f0)
    with pytest.raises(ValueError):
        extend_tracks(fresh, [Match(5, 0, 0.0)], (0, 1), f1)


def test_track_rejects_gapped_observations():
    t = Track(0)
    t.add(3, 0, [1.0, 2.0])
    with pytest.raises(ValueError):
        t.add(5, 1, [2.0, 3.0])
    assert t.first_frame == 3 and t.last_frame == 3 and len(t) == 1
