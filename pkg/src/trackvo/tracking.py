"""Descriptor matching and connect-the-dots track formation.

Tracks are strictly consecutive: one observation per frame, no gaps. A track
that fails to match in the next frame is terminated for good; if the same
scene point is re-acquired later it starts a new track.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import FrameFeatures

DEFAULT_MATCH_TAU = 0.7

# Row chunk for the pairwise-distance computation; bounds peak memory while
# keeping the per-pair arithmetic identical to the direct definition.
_CHUNK = 64


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


def match_bidirectional(desc_a: np.ndarray, desc_b: np.ndarray, tau=DEFAULT_MATCH_TAU):
    """Mutual nearest-neighbor descriptor matches, optionally thresholded.

    A pair (i, j) is kept when j is i's nearest neighbor in desc_b, i is j's
    nearest in desc_a, and the L2 distance is <= tau. Argmin ties resolve to
    the lowest index on both sides; tau=None disables the threshold. Matches
    come back sorted by index_a.
    """
    desc_a = np.asarray(desc_a, dtype=float)
    desc_b = np.asarray(desc_b, dtype=float)
    na, nb = len(desc_a), len(desc_b)
    if na == 0 or nb == 0:
        return []

    d2 = np.empty((na, nb))
    for start in range(0, na, _CHUNK):
        stop = min(start + _CHUNK, na)
        diff = desc_a[start:stop, None, :] - desc_b[None, :, :]
        d2[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)

    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    matches = []
    for i in range(na):
        j = int(nn_ab[i])
        if int(nn_ba[j]) != i:
            continue
        dist = float(np.sqrt(d2[i, j]))
        if tau is not None and dist > tau:
            continue
        matches.append(Match(i, j, dist))
    return matches


@dataclass
class Track:
    """One keypoint tracked through consecutive frames."""

    track_id: int
    observations: list = field(default_factory=list)  # (frame, kp_index, pixel)
    live: bool = True

    def add(self, frame_index: int, keypoint_index: int, pixel: np.ndarray) -> None:
        if self.observations and frame_index != self.last_frame + 1:
            raise ValueError(
                f"track {self.track_id}: observation for frame {frame_index} "
                f"does not follow frame {self.last_frame}"
            )
        self.observations.append(
            (frame_index, keypoint_index, np.asarray(pixel, dtype=float).reshape(2))
        )

    @property
    def first_frame(self) -> int:
        return self.observations[0][0]

    @property
    def last_frame(self) -> int:
        return self.observations[-1][0]

    def __len__(self) -> int:
        return len(self.observations)


class TrackGraph:
    """All tracks of a sequence plus a per-frame keypoint index."""

    def __init__(self):
        self.tracks: dict[int, Track] = {}
        self._by_frame: dict[int, dict[int, int]] = {}
        self._next_id = 0
        self.last_frame: int | None = None

    def _new_track(self, frame_index: int, keypoint_index: int, pixel) -> Track:
        track = Track(self._next_id)
        self._next_id += 1
        track.add(frame_index, keypoint_index, pixel)
        self.tracks[track.track_id] = track
        self._by_frame.setdefault(frame_index, {})[keypoint_index] = track.track_id
        return track

    def seed_frame(self, features: FrameFeatures) -> None:
        """Ingest the first frame: every keypoint starts a singleton track."""
        if self.last_frame is not None:
            raise ValueError("seed_frame is only valid on an empty graph")
        for k, pixel in enumerate(features.keypoints):
            self._new_track(features.frame_index, k, pixel)
        self.last_frame = features.frame_index

    def track_of(self, frame_index: int, keypoint_index: int):
        tid = self._by_frame.get(frame_index, {}).get(keypoint_index)
        return self.tracks[tid] if tid is not None else None

    def tracks_at(self, frame_index: int) -> dict:
        """keypoint_index -> track_id for one frame."""
        return dict(self._by_frame.get(frame_index, {}))

    def live_tracks(self):
        return [t for t in self.tracks.values() if t.live]


def extend_tracks(
    graph: TrackGraph, matches, frame_pair, features_next: FrameFeatures
) -> TrackGraph:
    """Connect frame i+1 into the graph from matches against frame i.

    Matched keypoints extend the track that owns their frame-i keypoint;
    unmatched keypoints in frame i+1 seed new candidate tracks; tracks that
    were live at frame i but found no match are terminated (live=False).
    """
    i, j = frame_pair
    if j != i + 1:
        raise ValueError(f"frame pair must be consecutive, got {frame_pair}")
    if graph.last_frame != i:
        raise ValueError(
            f"graph is current through frame {graph.last_frame}, cannot extend {frame_pair}"
        )
    if features_next.frame_index != j:
        raise ValueError("features_next.frame_index does not match frame_pair")

    matched_next = set()
    extended_ids = set()
    for m in matches:
        track = graph.track_of(i, m.index_a)
        if track is None:
            raise ValueError(
                f"frame {i} keypoint {m.index_a} is in no track; was the first "
                "frame seeded with seed_frame()?"
            )
        track.add(j, m.index_b, features_next.keypoints[m.index_b])
        graph._by_frame.setdefault(j, {})[m.index_b] = track.track_id
        matched_next.add(m.index_b)
        extended_ids.add(track.track_id)

    for track in graph.tracks.values():
        if track.live and track.track_id not in extended_ids:
            track.live = False

    for k, pixel in enumerate(features_next.keypoints):
        if k not in matched_next:
            graph._new_track(j, k, pixel)

    graph.last_frame = j
    return graph
