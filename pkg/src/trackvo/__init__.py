"""Monocular visual odometry with track-stability self-labeling.

Keypoint tracks feed a sliding-window bundle adjustment backend; finished
tracks are scored and labeled by their reprojection behavior, the labels are
exported as training pairs, and two evaluation harnesses (PnP pose pairs,
sub-trajectory relative errors) close the loop. A synthetic-scene generator
provides ground truth for all of it.
"""

from .backend import (
    BAConfig,
    BAProblem,
    OptimizeResult,
    VOState,
    objective,
    optimize,
    process_frame,
    run_sequence,
)
from .evalkit import (
    DegenerateGeometryError,
    PairEvalResult,
    PnPConfig,
    PnPError,
    PoseError,
    RelativeErrorRow,
    Sim3Alignment,
    p3p_minimal,
    pnp_ransac,
    pose_pair_eval,
    relative_pose_error,
    run_weighted_vo,
    sim3_align,
    trajectory_positions,
    trajectory_relative_errors,
    weights_from_labels,
)
from .fileio import (
    LABEL_IGNORE,
    LABEL_STABLE,
    LABEL_UNSTABLE,
    NO_TRACK_ID,
    Manifest,
    ParseError,
    load_manifest,
    load_trajectory,
    save_trajectory,
)
from .frontend import FrameFeatures, detect_and_describe, load_features, save_features
from .geometry import (
    BehindCameraError,
    Intrinsics,
    Pose,
    depth_regularizer,
    project,
    robust_loss,
    rotation_angle_deg,
    se3_retract,
)
from .labeler import (
    TrackStats,
    TrainingPair,
    emit_training_pairs,
    label_sequence,
    label_track,
    track_statistics,
)
from .synth import SceneConfig, SyntheticScene, generate_scene, write_scene
from .tracking import Match, Track, TrackGraph, extend_tracks, match_bidirectional

__version__ = "0.1.0"

__all__ = [
    "BAConfig",
    "BAProblem",
    "BehindCameraError",
    "DegenerateGeometryError",
    "FrameFeatures",
    "Intrinsics",
    "LABEL_IGNORE",
    "LABEL_STABLE",
    "LABEL_UNSTABLE",
    "Manifest",
    "Match",
    "NO_TRACK_ID",
    "OptimizeResult",
    "PairEvalResult",
    "ParseError",
    "PnPConfig",
    "PnPError",
    "Pose",
    "PoseError",
    "RelativeErrorRow",
    "SceneConfig",
    "Sim3Alignment",
    "SyntheticScene",
    "Track",
    "TrackGraph",
    "TrackStats",
    "TrainingPair",
    "VOState",
    "depth_regularizer",
    "detect_and_describe",
    "emit_training_pairs",
    "extend_tracks",
    "generate_scene",
    "label_sequence",
    "label_track",
    "load_features",
    "load_manifest",
    "load_trajectory",
    "match_bidirectional",
    "objective",
    "optimize",
    "p3p_minimal",
    "pnp_ransac",
    "pose_pair_eval",
    "process_frame",
    "project",
    "relative_pose_error",
    "robust_loss",
    "rotation_angle_deg",
    "run_sequence",
    "run_weighted_vo",
    "save_features",
    "save_trajectory",
    "se3_retract",
    "sim3_align",
    "track_statistics",
    "trajectory_positions",
    "trajectory_relative_errors",
    "weights_from_labels",
    "write_scene",
]
