"""Track-stability labeling and self-supervised training-pair emission.

A track is judged by the reprojection statistics of its final reconstruction:
long, consistently tight tracks are stable; long tracks with at least one
gross residual are unstable (the drifting t-junction signature); everything
else is ignored. Labels attach to every (frame, keypoint) of the track so
they can supervise a per-keypoint confidence head downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import VOState
from .fileio import LABEL_IGNORE, LABEL_STABLE, LABEL_UNSTABLE, NO_TRACK_ID
from .geometry import EPS_Z

# Eq-style thresholds for the three-way rule, in observations / pixels.
STABLE_MIN_LENGTH = 10
STABLE_MEAN_MAX = 1.0
UNSTABLE_MAX_MIN = 5.0


@dataclass(frozen=True)
class TrackStats:
    """Reprojection summary of one track at the final reconstruction."""

    track_id: int
    n_obs: int
    mean_error: float  # mean pixel residual over the track's observations
    max_error: float  # worst pixel residual


def label_track(
    stats: TrackStats,
    min_length: int = STABLE_MIN_LENGTH,
    mean_max: float = STABLE_MEAN_MAX,
    max_min: float = UNSTABLE_MAX_MIN,
) -> int:
    """Three-way stability rule; the stable branch wins when both fire."""
    if stats.n_obs >= min_length and stats.mean_error <= mean_max:
        return LABEL_STABLE
    elif stats.n_obs >= min_length and stats.max_error >= max_min:
        return LABEL_UNSTABLE
    return LABEL_IGNORE


def track_statistics(state: VOState, track) -> TrackStats | None:
    """Residual stats of a track, or None if it never got a 3-D point.

    Frames still in the window use the window solution; frames already slid
    out use their exported trajectory pose; the point is its final estimate
    (archived when it left the window). Behind-camera projections evaluate
    at clamped depth, matching the optimizer's cost.
    """
    X = state.point_of_track(track.track_id)
    if X is None:
        return None
    poses = state.pose_of_frame()
    intr = state.intrinsics
    errors = np.empty(len(track.observations))
    for i, (frame, _, pixel) in enumerate(track.observations):
        pose = poses[frame]
        xc = pose.R @ X + pose.t
        z = max(xc[2], EPS_Z)
        dx = intr.fx * xc[0] / z + intr.cx - pixel[0]
        dy = intr.fy * xc[1] / z + intr.cy - pixel[1]
        errors[i] = np.hypot(dx, dy)
    return TrackStats(
        track.track_id, len(track.observations), float(errors.mean()), float(errors.max())
    )


def label_sequence(
    state: VOState,
    features_seq,
    min_length: int = STABLE_MIN_LENGTH,
    mean_max: float = STABLE_MEAN_MAX,
    max_min: float = UNSTABLE_MAX_MIN,
):
    """Label every keypoint of every frame from the finished VO state.

    Returns (labels_per_frame, stats). labels_per_frame[k] lists one
    (x, y, track_id, label) row per keypoint of frame k, in keypoint order;
    keypoints whose track never produced a point (or that sit in no track)
    get ignore. stats is the list of TrackStats for all labeled tracks.
    """
    track_labels: dict[int, int] = {}
    stats: list[TrackStats] = []
    for tid in sorted(state.graph.tracks):
        st = track_statistics(state, state.graph.tracks[tid])
        if st is None:
            continue
        stats.append(st)
        track_labels[tid] = label_track(st, min_length, mean_max, max_min)

    labels_per_frame = []
    for feats in features_seq:
        by_kp = state.graph.tracks_at(feats.frame_index)
        rows = []
        for kp, (x, y) in enumerate(feats.keypoints):
            tid = by_kp.get(kp, NO_TRACK_ID)
            label = track_labels.get(tid, LABEL_IGNORE)
            rows.append((float(x), float(y), tid, label))
        labels_per_frame.append(rows)
    return labels_per_frame, stats


@dataclass
class TrainingPair:
    """Correspondences between two labeled frames of the same sequence."""

    frame_a: int
    frame_b: int
    correspondences: list = field(default_factory=list)  # (pix_a, pix_b, tid, label)
    unmatched_a: list = field(default_factory=list)  # pixels with implicit ignore
    unmatched_b: list = field(default_factory=list)


def emit_training_pairs(
    labels_per_frame,
    pair_window: int = 60,
    pairs_per_frame: int = 1,
    seed: int = 0,
):
    """Sample labeled frame pairs within +-pair_window, deterministically.

    For each frame a, up to pairs_per_frame partners b are drawn uniformly
    (without replacement) from the valid indices with 1 <= |a - b| <=
    pair_window. Correspondences are tracks observed in both frames, carrying
    the track's sequence-level label; remaining keypoints are listed as
    unmatched with implicit ignore.
    """
    rng = np.random.default_rng(seed)
    n = len(labels_per_frame)
    by_track = []
    for rows in labels_per_frame:
        by_track.append(
            {tid: (x, y, label) for (x, y, tid, label) in rows if tid != NO_TRACK_ID}
        )

    pairs = []
    for a in range(n):
        lo, hi = max(0, a - pair_window), min(n - 1, a + pair_window)
        valid = np.array([b for b in range(lo, hi + 1) if b != a], dtype=int)
        if len(valid) == 0:
            continue
        take = min(pairs_per_frame, len(valid))
        chosen = rng.choice(valid, size=take, replace=False)
        for b in np.sort(chosen):
            b = int(b)
            shared = sorted(by_track[a].keys() & by_track[b].keys())
            pair = TrainingPair(a, b)
            for tid in shared:
                xa, ya, label = by_track[a][tid]
                xb, yb, _ = by_track[b][tid]
                pair.correspondences.append(
                    (np.array([xa, ya]), np.array([xb, yb]), tid, label)
                )
            shared_set = set(shared)
            pair.unmatched_a = [
                np.array([x, y])
                for (x, y, tid, _) in labels_per_frame[a]
                if tid not in shared_set
            ]
            pair.unmatched_b = [
                np.array([x, y])
                for (x, y, tid, _) in labels_per_frame[b]
                if tid not in shared_set
            ]
            pairs.append(pair)
    return pairs
