"""Windowed bundle adjustment and the streaming VO state machine.

The objective is a robustified sum over observations: for observation (i, j)
with weight w_ij, the contribution is w_ij * rho(e_ij^2 + d(Z'_ij)) where
e_ij is the reprojection residual, d a soft two-sided depth penalty, and rho
a Huber loss applied to the combined squared magnitude. The solver is
Levenberg-Marquardt with the point block eliminated via a Schur complement,
so the dense system solved each iteration is only (6 * free poses)^2.

Local pose updates are 6-vectors [translation, rotation] applied through the
SE(3) exponential on the left (camera-frame perturbation); the first window
pose can be held fixed to pin the gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import FrameFeatures
from .geometry import (
    DEFAULT_DEPTH_BOUNDS,
    DEFAULT_HUBER_DELTA,
    EPS_Z,
    Intrinsics,
    Pose,
    _se3_exp,
)
from .tracking import DEFAULT_MATCH_TAU, TrackGraph, extend_tracks, match_bidirectional

_DAMPING_FLOOR = 1e-12
_DAMPING_MAX = 1e32


@dataclass
class BAConfig:
    """Solver and window parameters (defaults match the design operating point)."""

    n_last: int = 30
    max_iterations: int = 100
    huber_delta: float = DEFAULT_HUBER_DELTA
    depth_bounds: tuple = DEFAULT_DEPTH_BOUNDS
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    rel_cost_tol: float = 1e-8
    grad_tol: float = 1e-10


@dataclass
class BAProblem:
    """A bundle-adjustment window.

    observations holds flat (pose_index, track_id, pixel (2,), weight) tuples;
    pose_index refers into poses/frame_indices, track_id into points.
    """

    intrinsics: Intrinsics
    poses: list = field(default_factory=list)
    frame_indices: list = field(default_factory=list)
    points: dict = field(default_factory=dict)
    observations: list = field(default_factory=list)
    fix_first_pose: bool = True


@dataclass
class OptimizeResult:
    iterations: int
    accepted_steps: int
    final_cost: float
    status: str  # "converged" | "max_iterations" | "degenerate"


class _Packed:
    """Array view of a BAProblem, shared by objective() and optimize()."""

    def __init__(self, problem: BAProblem, config: BAConfig):
        n_poses = len(problem.poses)
        self.R = np.stack([p.R for p in problem.poses]) if n_poses else np.zeros((0, 3, 3))
        self.t = np.stack([p.t for p in problem.poses]) if n_poses else np.zeros((0, 3))
        self.track_ids = sorted(problem.points)
        tid_to_col = {tid: m for m, tid in enumerate(self.track_ids)}
        self.X = (
            np.stack([np.asarray(problem.points[tid], dtype=float) for tid in self.track_ids])
            if self.track_ids
            else np.zeros((0, 3))
        )
        n = len(problem.observations)
        self.pose_i = np.zeros(n, dtype=int)
        self.point_j = np.zeros(n, dtype=int)
        self.uv = np.zeros((n, 2))
        self.w = np.zeros(n)
        for k, (pi, tid, pixel, weight) in enumerate(problem.observations):
            if not 0 <= pi < n_poses:
                raise ValueError(f"observation {k}: pose index {pi} out of range")
            if tid not in tid_to_col:
                raise ValueError(f"observation {k}: track {tid} has no point entry")
            if not 0.0 <= weight <= 1.0:
                raise ValueError(f"observation {k}: weight {weight} outside [0, 1]")
            self.pose_i[k] = pi
            self.point_j[k] = tid_to_col[tid]
            self.uv[k] = np.asarray(pixel, dtype=float)
            self.w[k] = weight
        # sort by (pose, point) so per-pose rows are contiguous segments
        order = np.lexsort((self.point_j, self.pose_i))
        self.pose_i = self.pose_i[order]
        self.point_j = self.point_j[order]
        self.uv = self.uv[order]
        self.w = self.w[order]
        self.intr = problem.intrinsics
        self.config = config

    def writeback(self, problem: BAProblem) -> None:
        problem.poses[:] = [Pose(self.R[i].copy(), self.t[i].copy()) for i in range(len(self.R))]
        for m, tid in enumerate(self.track_ids):
            problem.points[tid] = self.X[m].copy()


def _residual_terms(packed: _Packed, R, t, X):
    """Residuals, robust terms, and intermediates for given parameter arrays.

    Behind-camera observations use depth clamped to EPS_Z for the pixel
    residual while the depth penalty sees the true (non-positive) depth,
    which keeps the cost finite and pushes the point back in front.
    """
    intr, cfg = packed.intr, packed.config
    d_min, d_max = cfg.depth_bounds
    xc = (R[packed.pose_i] @ X[packed.point_j][:, :, None])[:, :, 0] + t[packed.pose_i]
    z = xc[:, 2]
    behind = z <= EPS_Z
    zc = np.where(behind, EPS_Z, z)
    pred = np.stack(
        [intr.fx * xc[:, 0] / zc + intr.cx, intr.fy * xc[:, 1] / zc + intr.cy], axis=1
    )
    r_uv = pred - packed.uv
    r_hi = np.maximum(0.0, z - d_max)
    r_lo = np.minimum(z - d_min, 0.0)
    s = np.sum(r_uv * r_uv, axis=1) + r_hi * r_hi + r_lo * r_lo

    d2 = cfg.huber_delta * cfg.huber_delta
    outlier = s > d2
    root = np.sqrt(np.maximum(s, d2))
    rho = np.where(outlier, 2.0 * cfg.huber_delta * root - d2, s)
    drho = np.where(outlier, cfg.huber_delta / root, 1.0)
    cost = float(np.sum(packed.w * rho))
    return {
        "xc": xc, "z": z, "zc": zc, "behind": behind,
        "r_uv": r_uv, "r_hi": r_hi, "r_lo": r_lo,
        "s": s, "cost": cost, "alpha": np.sqrt(packed.w * drho),
    }


def _residual_jacobians(packed: _Packed, R, terms):
    """Per-observation Jacobians of the 4-vector residual (robust-scaled).

    Returns (r_bar (n,4), J_pose (n,4,6), J_point (n,4,3)).
    """
    intr, cfg = packed.intr, packed.config
    d_min, d_max = cfg.depth_bounds
    xc, z, zc, behind = terms["xc"], terms["z"], terms["zc"], terms["behind"]
    n = len(z)

    J_xc = np.zeros((n, 4, 3))
    inv_z = 1.0 / zc
    J_xc[:, 0, 0] = intr.fx * inv_z
    J_xc[:, 1, 1] = intr.fy * inv_z
    # the clamp freezes the pixel's dependence on depth once behind the camera
    J_xc[:, 0, 2] = np.where(behind, 0.0, -intr.fx * xc[:, 0] * inv_z * inv_z)
    J_xc[:, 1, 2] = np.where(behind, 0.0, -intr.fy * xc[:, 1] * inv_z * inv_z)
    J_xc[:, 2, 2] = (z > d_max).astype(float)
    J_xc[:, 3, 2] = (z < d_min).astype(float)

    J_point = J_xc @ R[packed.pose_i]

    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -xc[:, 2]
    sk[:, 0, 2] = xc[:, 1]
    sk[:, 1, 0] = xc[:, 2]
    sk[:, 1, 2] = -xc[:, 0]
    sk[:, 2, 0] = -xc[:, 1]
    sk[:, 2, 1] = xc[:, 0]
    J_pose = np.zeros((n, 4, 6))
    J_pose[:, :, :3] = J_xc
    J_pose[:, :, 3:] = -(J_xc @ sk)

    r = np.zeros((n, 4))
    r[:, :2] = terms["r_uv"]
    r[:, 2] = terms["r_hi"]
    r[:, 3] = terms["r_lo"]

    alpha = terms["alpha"][:, None]
    return r * alpha, J_pose * alpha[..., None], J_point * alpha[..., None]


def _scatter_blocks(idx: np.ndarray, blocks: np.ndarray, count: int) -> np.ndarray:
    """Sum (n, a, b) blocks into (count, a, b) bins via one bincount."""
    n, a, b = blocks.shape
    comp = np.arange(a * b)
    flat_idx = (idx[:, None] * (a * b) + comp[None, :]).ravel()
    out = np.bincount(flat_idx, weights=blocks.reshape(n * a * b), minlength=count * a * b)
    return out.reshape(count, a, b)


def objective(problem: BAProblem, config: BAConfig | None = None) -> float:
    """Exact robustified objective of the window; raises on non-finite cost."""
    config = config or BAConfig()
    packed = _Packed(problem, config)
    cost = _residual_terms(packed, packed.R, packed.t, packed.X)["cost"]
    if not np.isfinite(cost):
        raise ValueError("non-finite cost: corrupted observations or parameters")
    return cost


def optimize(problem: BAProblem, config: BAConfig | None = None) -> OptimizeResult:
    """Run LM with point-block Schur elimination on the window, in place.

    The first pose is held fixed when problem.fix_first_pose. Iterations
    count linear solves (accepted or rejected). Termination: gradient
    max-norm below config.grad_tol, relative cost decrease of an accepted
    step below config.rel_cost_tol, the iteration cap, or a non-positive-
    definite reduced system ("degenerate", reported rather than raised).
    """
    config = config or BAConfig()
    if len(problem.poses) > config.n_last:
        raise ValueError(
            f"window of {len(problem.poses)} poses exceeds n_last={config.n_last}"
        )
    packed = _Packed(problem, config)
    n_poses = len(packed.R)
    n_points = len(packed.X)
    first_free = 1 if (problem.fix_first_pose and n_poses > 0) else 0
    n_free = n_poses - first_free

    if len(packed.w) == 0 or (n_free == 0 and n_points == 0):
        cost = _residual_terms(packed, packed.R, packed.t, packed.X)["cost"]
        return OptimizeResult(0, 0, cost, "converged")

    R, t, X = packed.R, packed.t, packed.X
    terms = _residual_terms(packed, R, t, X)
    cost = terms["cost"]
    if not np.isfinite(cost):
        raise ValueError("non-finite cost: corrupted observations or parameters")

    lam = config.damping_init
    iterations = 0
    accepted = 0
    status = "max_iterations"

    # observations are sorted by pose, so free-pose rows form a tail slice
    # and can be summed with reduceat over contiguous per-pose segments
    k0 = int(np.searchsorted(packed.pose_i, first_free))
    fp = packed.pose_i[k0:] - first_free
    fj = packed.point_j[k0:]
    if len(fp):
        seg_starts = np.flatnonzero(np.r_[True, np.diff(fp) > 0])
        seg_pose = fp[seg_starts]
        comb = fp * max(n_points, 1) + fj
        hcp_unique = bool(np.all(np.diff(comb) > 0)) if len(comb) > 1 else True
    else:
        seg_starts = np.empty(0, dtype=int)
        seg_pose = np.empty(0, dtype=int)
        hcp_unique = True

    while iterations < config.max_iterations:
        r_bar, J_pose, J_point = _residual_jacobians(packed, R, terms)

        # gradient of the true objective is 2 J^T r (robust-scaled)
        Jp_T = J_pose.transpose(0, 2, 1)
        Jx_T = J_point.transpose(0, 2, 1)
        g_free = np.zeros((n_free, 6))
        if len(fp):
            g_free[seg_pose] = np.add.reduceat(
                (Jp_T[k0:] @ r_bar[k0:, :, None])[:, :, 0], seg_starts, axis=0
            )
        g_point = _scatter_blocks(packed.point_j, Jx_T @ r_bar[:, :, None], n_points)[..., 0]
        grad_max = 0.0
        if n_free:
            grad_max = max(grad_max, np.abs(g_free).max(initial=0.0))
        if n_points:
            grad_max = max(grad_max, np.abs(g_point).max(initial=0.0))
        if 2.0 * grad_max < config.grad_tol:
            status = "converged"
            break

        U = np.zeros((n_free, 6, 6))
        if len(fp):
            U[seg_pose] = np.add.reduceat(
                (Jp_T[k0:] @ J_pose[k0:]).reshape(len(fp), 36), seg_starts, axis=0
            ).reshape(-1, 6, 6)
        V = _scatter_blocks(packed.point_j, Jx_T @ J_point, n_points)
        W_blocks = Jp_T[k0:] @ J_point[k0:]
        if hcp_unique:
            Hcp = np.zeros((n_free, n_points, 6, 3))
            Hcp[fp, fj] = W_blocks
        else:
            Hcp = _scatter_blocks(
                fp * n_points + fj, W_blocks, n_free * n_points
            ).reshape(n_free, n_points, 6, 3)

        b_c = -g_free
        b_p = -g_point

        iterations += 1

        # scale-aware damping on the block diagonals
        i6, i3 = np.arange(6), np.arange(3)
        U_d = U.copy()
        U_d[:, i6, i6] += lam * np.maximum(U[:, i6, i6], _DAMPING_FLOOR)
        V_d = V.copy()
        V_d[:, i3, i3] += lam * np.maximum(V[:, i3, i3], _DAMPING_FLOOR)

        try:
            Vinv = np.linalg.inv(V_d) if n_points else V_d
        except np.linalg.LinAlgError:
            status = "degenerate"
            break

        if n_free:
            H2 = Hcp.transpose(0, 2, 1, 3).reshape(6 * n_free, 3 * n_points)
            A = Hcp @ Vinv[None, :, :, :]
            A2 = A.transpose(0, 2, 1, 3).reshape(6 * n_free, 3 * n_points)
            S = -A2 @ H2.T if n_points else np.zeros((6 * n_free, 6 * n_free))
            for f in range(n_free):
                S[6 * f : 6 * f + 6, 6 * f : 6 * f + 6] += U_d[f]
            rhs = b_c.reshape(-1) - (A2 @ b_p.reshape(-1) if n_points else 0.0)
            try:
                np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                status = "degenerate"
                break
            delta_c = np.linalg.solve(S, rhs)
            resid_p = b_p.reshape(-1) - H2.T @ delta_c
        else:
            delta_c = np.zeros(0)
            resid_p = b_p.reshape(-1)
        delta_p = (
            (Vinv @ resid_p.reshape(-1, 3)[:, :, None])[:, :, 0]
            if n_points
            else np.zeros((0, 3))
        )

        R_new, t_new = R.copy(), t.copy()
        for f in range(n_free):
            Rd, td = _se3_exp(delta_c[6 * f : 6 * f + 6])
            p = first_free + f
            R_new[p] = Rd @ R[p]
            t_new[p] = Rd @ t[p] + td
        X_new = X + delta_p

        terms_new = _residual_terms(packed, R_new, t_new, X_new)
        if not np.isfinite(terms_new["cost"]):
            lam *= config.damping_up
            continue

        if terms_new["cost"] < cost:
            rel_drop = (cost - terms_new["cost"]) / max(cost, 1e-300)
            R, t, X = R_new, t_new, X_new
            terms = terms_new
            cost = terms_new["cost"]
            accepted += 1
            lam = max(lam * config.damping_down, 1e-12)
            if rel_drop < config.rel_cost_tol:
                status = "converged"
                break
        else:
            lam *= config.damping_up
            if lam > _DAMPING_MAX:
                status = "converged"
                break

    packed.R, packed.t, packed.X = R, t, X
    packed.writeback(problem)
    return OptimizeResult(iterations, accepted, cost, status)


# ---------------------------------------------------------------------------
# Streaming VO


class VOState:
    """Track graph, sliding BA window, and exported trajectory of one run."""

    def __init__(self, intrinsics: Intrinsics, config: BAConfig | None = None):
        self.config = config or BAConfig()
        self.graph = TrackGraph()
        self.problem = BAProblem(intrinsics=intrinsics)
        self.history: list = []  # [(frame_index, Pose)] frames slid out of the window
        self.archived_points: dict = {}  # track_id -> final X once out of the window
        self.last_result: OptimizeResult | None = None

    @property
    def intrinsics(self) -> Intrinsics:
        return self.problem.intrinsics

    def trajectory(self) -> list:
        """history + window as one consistent [(frame_index, Pose)] sequence."""
        return self.history + list(zip(self.problem.frame_indices, self.problem.poses))

    def pose_of_frame(self):
        """frame_index -> Pose over the whole run so far."""
        return {fi: pose for fi, pose in self.trajectory()}

    def point_of_track(self, track_id: int):
        if track_id in self.problem.points:
            return self.problem.points[track_id]
        return self.archived_points.get(track_id)


def _instantiate_point(state: VOState, track) -> np.ndarray:
    """Unit-depth back-projection along the track's first observation ray."""
    frame0, _, pixel0 = track.observations[0]
    pose0 = dict(zip(state.problem.frame_indices, state.problem.poses))[frame0]
    intr = state.intrinsics
    ray = np.array([(pixel0[0] - intr.cx) / intr.fx, (pixel0[1] - intr.cy) / intr.fy, 1.0])
    return pose0.R.T @ (ray - pose0.t)


def process_frame(state: VOState, features: FrameFeatures, matches, weight_fn=None) -> VOState:
    """Advance the VO state by one frame.

    Args:
        state: state returned by a previous call (or freshly constructed).
        features: features of the new frame; frame_index must be consecutive.
        matches: Match list against the previous frame's features (ignored
            for the first frame).
        weight_fn: optional (frame_index, keypoint_index) -> weight in [0, 1]
            used for newly added observations; defaults to 1.0.

    New poses start at the previous estimate; a track reaching length 2 gets
    a 3-D point at unit depth along its first observation ray, and its whole
    observation history enters the window. When the window exceeds n_last the
    oldest pose is exported to the trajectory history and points that lose
    all window observations are archived at their final positions.
    """
    problem = state.problem
    k = features.frame_index

    if not problem.poses:
        state.graph.seed_frame(features)
        problem.poses.append(Pose.identity())
        problem.frame_indices.append(k)
        return state

    if k != problem.frame_indices[-1] + 1:
        raise ValueError(
            f"frame {k} does not follow frame {problem.frame_indices[-1]}"
        )
    extend_tracks(state.graph, matches, (k - 1, k), features)

    problem.poses.append(problem.poses[-1].copy())
    problem.frame_indices.append(k)
    pose_index = len(problem.poses) - 1

    def weight(frame, kp):
        return 1.0 if weight_fn is None else float(weight_fn(frame, kp))

    frame_to_pose_index = {fi: i for i, fi in enumerate(problem.frame_indices)}
    for m in matches:
        track = state.graph.track_of(k - 1, m.index_a)
        tid = track.track_id
        if tid in problem.points:
            problem.observations.append(
                (pose_index, tid, features.keypoints[m.index_b].copy(), weight(k, m.index_b))
            )
        elif len(track) == 2:
            problem.points[tid] = _instantiate_point(state, track)
            for frame, kp, pixel in track.observations:
                problem.observations.append(
                    (frame_to_pose_index[frame], tid, pixel.copy(), weight(frame, kp))
                )

    while len(problem.poses) > state.config.n_last:
        state.history.append((problem.frame_indices[0], problem.poses[0]))
        problem.poses.pop(0)
        problem.frame_indices.pop(0)
        problem.observations = [
            (pi - 1, tid, px, w) for (pi, tid, px, w) in problem.observations if pi != 0
        ]
        remaining = {tid for (_, tid, _, _) in problem.observations}
        for tid in [tid for tid in problem.points if tid not in remaining]:
            state.archived_points[tid] = problem.points.pop(tid)

    state.last_result = optimize(problem, state.config)
    return state


def run_sequence(
    features_seq,
    intrinsics: Intrinsics,
    config: BAConfig | None = None,
    tau: float | None = DEFAULT_MATCH_TAU,
    weight_fn=None,
) -> VOState:
    """Run matching + process_frame over an ordered feature sequence."""
    state = VOState(intrinsics, config)
    prev = None
    for feats in features_seq:
        matches = (
            match_bidirectional(prev.descriptors, feats.descriptors, tau) if prev else []
        )
        process_frame(state, feats, matches, weight_fn=weight_fn)
        prev = feats
    return state
