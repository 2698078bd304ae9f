"""Evaluation harnesses: PnP pose-pair accuracy and sub-trajectory errors.

Two protocols are implemented. The pose-pair protocol back-projects one
frame's keypoints through ground-truth depth and solves PnP (P3P + RANSAC +
LM refinement) against a second frame, reporting the fraction of pairs with
rotation error < 5 deg and translation error < 5 cm. The trajectory protocol
averages relative-pose errors over all sub-trajectories of fixed durations.
Stability-weighted VO is wired here too: label files become per-observation
weights for the backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import BAConfig, run_sequence
from .fileio import LABEL_STABLE, LABEL_UNSTABLE
from .geometry import EPS_Z, Intrinsics, Pose, _se3_exp, rotation_angle_deg
from .tracking import DEFAULT_MATCH_TAU, match_bidirectional


class DegenerateGeometryError(ValueError):
    """Input geometry admits no well-defined solution (e.g. collinear points)."""


class PnPError(RuntimeError):
    """RANSAC found no model with the minimum inlier support."""


@dataclass
class PnPConfig:
    iterations: int = 100
    inlier_threshold: float = 8.0  # px
    confidence: float = 0.99
    refine: bool = True


@dataclass(frozen=True)
class PoseError:
    rot_deg: float
    trans: float


def relative_pose_error(estimated: Pose, ground_truth: Pose) -> PoseError:
    """Rotation angle and translation norm of est o gt^-1."""
    delta = estimated.compose(ground_truth.inverse())
    rot = rotation_angle_deg(np.eye(3), delta.R)
    return PoseError(rot, float(np.linalg.norm(delta.t)))


# ---------------------------------------------------------------------------
# P3P minimal solver.
#
# With distance ratios u = s2/s1, v = s3/s1 the law-of-cosines system reduces
# to two quadrics in u whose u-resultant is a quartic in v; the closed-form
# resultant of two quadratics (af - cd)^2 - (ae - bd)(bf - ce) avoids copying
# a coefficient table. Each surviving (u, v) gives ray depths, camera-frame
# points, and an absolute-orientation pose.


def _absolute_orientation(world: np.ndarray, camera: np.ndarray) -> Pose:
    """Rigid transform with camera = R @ world + t (least squares, SVD)."""
    cw = world.mean(axis=0)
    cc = camera.mean(axis=0)
    C = (world - cw).T @ (camera - cc)
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cc - R @ cw)


def p3p_minimal(world_points: np.ndarray, pixels: np.ndarray, intrinsics: Intrinsics):
    """Candidate poses (up to 4) putting three world points on three pixels.

    Every returned pose reprojects the three inputs to < 1e-6 px with positive
    depth. Raises DegenerateGeometryError for collinear points or coincident
    bearings.
    """
    X = np.asarray(world_points, dtype=float).reshape(3, 3)
    px = np.asarray(pixels, dtype=float).reshape(3, 2)

    L = max(np.linalg.norm(X[1] - X[0]), np.linalg.norm(X[2] - X[0]), np.linalg.norm(X[2] - X[1]))
    area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    if L <= 0 or area <= 1e-9 * L * L:
        raise DegenerateGeometryError("collinear or coincident world points")

    f = np.stack(
        [
            (px[:, 0] - intrinsics.cx) / intrinsics.fx,
            (px[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(3),
        ],
        axis=1,
    )
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    ca = float(f[1] @ f[2])  # angle subtending side a = |X2 X3|
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])
    if max(abs(ca), abs(cb), abs(cg)) >= 1.0 - 1e-12:
        raise DegenerateGeometryError("coincident or opposite bearing directions")

    a2 = float((X[1] - X[2]) @ (X[1] - X[2]))
    b2 = float((X[0] - X[2]) @ (X[0] - X[2]))
    c2 = float((X[0] - X[1]) @ (X[0] - X[1]))

    # quadratics in u with polynomial-in-v coefficients (highest power first)
    q = np.array([1.0, -2.0 * cb, 1.0])  # 1 + v^2 - 2 v cb
    A2c = np.array([-b2])
    A1c = np.array([2.0 * b2 * cg])
    A0c = c2 * q - np.array([0.0, 0.0, b2])
    B2c = np.array([-b2])
    B1c = np.array([2.0 * b2 * ca, 0.0])
    B0c = a2 * q - np.array([b2, 0.0, 0.0])

    P1 = np.polysub(np.polymul(A2c, B0c), np.polymul(B2c, A0c))
    P2 = np.polysub(np.polymul(A2c, B1c), np.polymul(B2c, A1c))
    P3 = np.polysub(np.polymul(A1c, B0c), np.polymul(B1c, A0c))
    res = np.polysub(np.polymul(P1, P1), np.polymul(P2, P3))

    lead = np.max(np.abs(res))
    if lead == 0.0:
        raise DegenerateGeometryError("degenerate resultant polynomial")
    res = np.trim_zeros(np.where(np.abs(res) < 1e-14 * lead, 0.0, res), "f")
    if len(res) < 2:
        return []
    dres = np.polyder(res)

    candidates = []
    for v in np.roots(res):
        if abs(v.imag) > 1e-8 * (1.0 + abs(v.real)):
            continue
        v = float(v.real)
        for _ in range(2):  # Newton polish on the quartic
            dv = np.polyval(dres, v)
            if dv != 0.0:
                v -= np.polyval(res, v) / dv
        if v <= 1e-12:
            continue
        qv = 1.0 + v * v - 2.0 * v * cb
        if qv <= 1e-15:
            continue
        s1 = math.sqrt(b2 / qv)
        disc = cg * cg + (c2 * qv - b2) / b2
        if disc < 0.0:
            continue
        for u in (cg + math.sqrt(disc), cg - math.sqrt(disc)):
            if u <= 1e-12:
                continue
            eb = a2 * qv - b2 * (u * u + v * v - 2.0 * u * v * ca)
            if abs(eb) > 1e-6 * b2 * (1.0 + u * u + v * v):
                continue
            cam = np.array([s1, u * s1, v * s1])[:, None] * f
            pose = _absolute_orientation(X, cam)
            worst = 0.0
            ok = True
            for i in range(3):
                xc = pose.R @ X[i] + pose.t
                if xc[2] <= EPS_Z:
                    ok = False
                    break
                ex = intrinsics.fx * xc[0] / xc[2] + intrinsics.cx - px[i, 0]
                ey = intrinsics.fy * xc[1] / xc[2] + intrinsics.cy - px[i, 1]
                worst = max(worst, math.hypot(ex, ey))
            if ok and worst < 1e-6:
                candidates.append((worst, pose))

    candidates.sort(key=lambda c: c[0])
    kept = []
    for _, pose in candidates:
        dup = any(
            rotation_angle_deg(pose.R, other.R) < 1e-4
            and np.linalg.norm(pose.t - other.t) < 1e-6 * (1.0 + np.linalg.norm(other.t))
            for other in kept
        )
        if not dup:
            kept.append(pose)
        if len(kept) == 4:
            break
    return kept


def _project_all(intrinsics: Intrinsics, pose: Pose, X: np.ndarray):
    """Vectorized projection; returns (pixels (n,2), depth (n,))."""
    xc = X @ pose.R.T + pose.t
    z = xc[:, 2]
    zc = np.maximum(z, EPS_Z)
    return (
        np.stack(
            [
                intrinsics.fx * xc[:, 0] / zc + intrinsics.cx,
                intrinsics.fy * xc[:, 1] / zc + intrinsics.cy,
            ],
            axis=1,
        ),
        z,
    )


def _refine_pose(world, pixels, intrinsics, pose: Pose, iterations: int = 20) -> Pose:
    """Pose-only LM on plain squared reprojection error over the inlier set."""
    X = np.asarray(world, dtype=float)
    uv = np.asarray(pixels, dtype=float)
    lam = 1e-6

    def cost_of(p):
        pred, z = _project_all(intrinsics, p, X)
        r = pred - uv
        return float(np.sum(r * r)), r, z

    cost, r, z = cost_of(pose)
    for _ in range(iterations):
        xc = X @ pose.R.T + pose.t
        zc = np.maximum(xc[:, 2], EPS_Z)
        n = len(X)
        J_xc = np.zeros((n, 2, 3))
        J_xc[:, 0, 0] = intrinsics.fx / zc
        J_xc[:, 1, 1] = intrinsics.fy / zc
        J_xc[:, 0, 2] = -intrinsics.fx * xc[:, 0] / (zc * zc)
        J_xc[:, 1, 2] = -intrinsics.fy * xc[:, 1] / (zc * zc)
        sk = np.zeros((n, 3, 3))
        sk[:, 0, 1] = -xc[:, 2]
        sk[:, 0, 2] = xc[:, 1]
        sk[:, 1, 0] = xc[:, 2]
        sk[:, 1, 2] = -xc[:, 0]
        sk[:, 2, 0] = -xc[:, 1]
        sk[:, 2, 1] = xc[:, 0]
        J = np.zeros((n, 2, 6))
        J[:, :, :3] = J_xc
        J[:, :, 3:] = -np.einsum("nab,nbc->nac", J_xc, sk)

        H = np.einsum("nka,nkb->ab", J, J)
        g = np.einsum("nka,nk->a", J, r)
        H_d = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
        try:
            delta = np.linalg.solve(H_d, -g)
        except np.linalg.LinAlgError:
            break
        Rd, td = _se3_exp(delta)
        cand = Pose(Rd @ pose.R, Rd @ pose.t + td)
        new_cost, new_r, new_z = cost_of(cand)
        if new_cost < cost:
            pose, cost, r, z = cand, new_cost, new_r, new_z
            lam = max(lam * 0.1, 1e-12)
            if abs(delta).max() < 1e-12:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return pose


def pnp_ransac(
    world_points: np.ndarray,
    pixels: np.ndarray,
    intrinsics: Intrinsics,
    config: PnPConfig | None = None,
    seed: int = 0,
):
    """P3P-RANSAC with optional LM refinement on the inlier set.

    Returns (Pose, sorted inlier indices). Raises ValueError for fewer than
    4 correspondences and PnPError when no model reaches 4 inliers. The
    returned model's inlier count is >= that of every sampled candidate.
    """
    config = config or PnPConfig()
    X = np.asarray(world_points, dtype=float).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 4:
        raise ValueError(f"PnP needs at least 4 correspondences, got {n}")

    rng = np.random.default_rng(seed)
    best_pose = None
    best_count = 0
    best_inliers = None
    max_iters = config.iterations
    it = 0
    while it < max_iters:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            candidates = p3p_minimal(X[sample], uv[sample], intrinsics)
        except DegenerateGeometryError:
            continue
        for pose in candidates:
            pred, z = _project_all(intrinsics, pose, X)
            err = np.linalg.norm(pred - uv, axis=1)
            inliers = (err < config.inlier_threshold) & (z > EPS_Z)
            count = int(inliers.sum())
            if count > best_count:
                best_pose, best_count, best_inliers = pose, count, inliers
                ratio = count / n
                if ratio >= 1.0:
                    max_iters = min(max_iters, it)
                elif ratio > 0.0:
                    needed = math.log(max(1e-12, 1.0 - config.confidence)) / math.log(
                        1.0 - ratio**3
                    )
                    max_iters = min(max_iters, it + int(math.ceil(needed)))

    if best_pose is None or best_count < 4:
        raise PnPError(f"no PnP model with >= 4 inliers (best {best_count})")

    if config.refine:
        idx = np.nonzero(best_inliers)[0]
        refined = _refine_pose(X[idx], uv[idx], intrinsics, best_pose)
        pred, z = _project_all(intrinsics, refined, X)
        err = np.linalg.norm(pred - uv, axis=1)
        inliers = (err < config.inlier_threshold) & (z > EPS_Z)
        if int(inliers.sum()) >= best_count:
            best_pose, best_inliers = refined, inliers

    return best_pose, np.nonzero(best_inliers)[0]


# ---------------------------------------------------------------------------
# Sim(3) alignment (closed-form similarity, Umeyama-style).


@dataclass
class Sim3Alignment:
    """Similarity q = scale * R @ p + t mapping estimate positions onto gt."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rms: float

    def apply_positions(self, p: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(p, dtype=float) @ self.rotation.T) + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        """Re-express a world-to-camera pose in the aligned world frame."""
        center = -pose.R.T @ pose.t
        new_center = self.apply_positions(center[None, :])[0]
        R_new = pose.R @ self.rotation.T
        return Pose(R_new, -R_new @ new_center)


def sim3_align(estimated_positions: np.ndarray, gt_positions: np.ndarray) -> Sim3Alignment:
    """Least-squares similarity aligning estimated positions onto gt.

    Raises DegenerateGeometryError when the point sets cannot pin a rotation
    (fewer than 3 points, or collinear/coincident geometry).
    """
    p = np.asarray(estimated_positions, dtype=float).reshape(-1, 3)
    q = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("position arrays must have matching shapes")
    n = len(p)
    if n < 3:
        raise DegenerateGeometryError("need at least 3 positions to align")
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mp, q - mq
    var_p = float(np.sum(pc * pc)) / n
    if var_p <= 0.0:
        raise DegenerateGeometryError("estimated positions are coincident")
    C = qc.T @ pc / n
    U, D, Vt = np.linalg.svd(C)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateGeometryError("collinear positions cannot pin the rotation")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S)) / var_p
    t = mq - scale * R @ mp
    resid = q - (scale * (p @ R.T) + t)
    rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return Sim3Alignment(scale, R, t, rms)


def trajectory_positions(items) -> np.ndarray:
    """Camera centers of [(frame, world-to-camera Pose), ...] or [Pose, ...]."""
    poses = [it[1] if isinstance(it, tuple) else it for it in items]
    return np.stack([-p.R.T @ p.t for p in poses])


# ---------------------------------------------------------------------------
# Sub-trajectory relative errors.


@dataclass(frozen=True)
class RelativeErrorRow:
    length_s: float
    n_frames: int
    rot_deg: float
    trans: float
    n_samples: int


def trajectory_relative_errors(est_poses, gt_poses, lengths_s, fps: float):
    """Mean relative-pose error over all sub-trajectories of each duration.

    est_poses / gt_poses are equal-length lists of world-to-camera poses
    sampled at fps. For duration L the relative motion over n = round(L*fps)
    frames is compared at every start index; rotation errors are invariant
    to any global rigid alignment of the trajectories.
    """
    if len(est_poses) != len(gt_poses):
        raise ValueError(
            f"trajectory lengths differ: {len(est_poses)} vs {len(gt_poses)}"
        )
    N = len(est_poses)
    rows = []
    for L in lengths_s:
        n = int(round(L * fps))
        if n < 1 or n >= N:
            raise ValueError(
                f"sub-trajectory of {L} s = {n} frames does not fit a "
                f"{N}-frame trajectory"
            )
        rot = np.empty(N - n)
        trans = np.empty(N - n)
        for k in range(N - n):
            d_est = est_poses[k + n].compose(est_poses[k].inverse())
            d_gt = gt_poses[k + n].compose(gt_poses[k].inverse())
            err = relative_pose_error(d_est, d_gt)
            rot[k] = err.rot_deg
            trans[k] = err.trans
        rows.append(
            RelativeErrorRow(float(L), n, float(rot.mean()), float(trans.mean()), N - n)
        )
    return rows


# ---------------------------------------------------------------------------
# Pose-pair evaluation protocol.


@dataclass(frozen=True)
class PairEvalResult:
    frame_diff: int
    rot_lt_5deg: float
    trans_lt_5cm: float
    n_pairs: int


def _backproject_with_depth(keypoints, depth_map, intrinsics, depth_scale):
    """Lift keypoints through a depth map; returns (indices kept, points (m,3)).

    Nearest-pixel lookup; zero/invalid depth drops the keypoint rather than
    fabricating geometry.
    """
    kept, pts = [], []
    h, w = depth_map.shape
    for i, (x, y) in enumerate(keypoints):
        c, r = int(round(x)), int(round(y))
        if not (0 <= c < w and 0 <= r < h):
            continue
        raw = int(depth_map[r, c])
        if raw <= 0:
            continue
        z = raw / depth_scale
        pts.append(
            np.array(
                [
                    z * (x - intrinsics.cx) / intrinsics.fx,
                    z * (y - intrinsics.cy) / intrinsics.fy,
                    z,
                ]
            )
        )
        kept.append(i)
    return kept, pts


def pose_pair_eval(
    features_seq,
    depth_maps,
    gt_poses,
    intrinsics: Intrinsics,
    frame_diff: int,
    n_pairs: int = 50,
    seed: int = 0,
    depth_scale: float = 1000.0,
    pnp_config: PnPConfig | None = None,
    tau: float | None = None,
    rot_threshold_deg: float = 5.0,
    trans_threshold: float = 0.05,
) -> PairEvalResult:
    """Fraction of sampled frame pairs with accurate PnP relative poses.

    Pairs (A, A + frame_diff) are sampled uniformly with a seeded generator;
    each PnP solve gets an independent child seed. Frame-A keypoints are
    back-projected through gt depth into the frame-A camera frame, matched to
    frame B by mutual nearest neighbor (no tau threshold by default, per the
    protocol), and the PnP pose is compared against the gt relative pose.
    Pairs where PnP cannot run or fails count as inaccurate.
    """
    pnp_config = pnp_config or PnPConfig()
    N = len(features_seq)
    if len(depth_maps) != N or len(gt_poses) != N:
        raise ValueError("features, depth maps and gt poses must align per frame")
    n_starts = N - frame_diff
    if n_starts < 1:
        raise ValueError(
            f"insufficient valid pairs: frame_diff {frame_diff} leaves {max(n_starts, 0)} starts"
        )

    children = np.random.SeedSequence(seed).spawn(n_pairs + 1)
    sampler = np.random.default_rng(children[0])
    starts = sampler.integers(0, n_starts, size=n_pairs)

    rot_ok = 0
    trans_ok = 0
    for pair_idx, A in enumerate(starts):
        A = int(A)
        B = A + frame_diff
        fa, fb = features_seq[A], features_seq[B]
        matches = match_bidirectional(fa.descriptors, fb.descriptors, tau)
        if not matches:
            continue
        kept, pts = _backproject_with_depth(
            fa.keypoints[[m.index_a for m in matches]],
            depth_maps[A],
            intrinsics,
            depth_scale,
        )
        if len(kept) < 4:
            continue
        world = np.stack(pts)
        target = np.stack([fb.keypoints[matches[i].index_b] for i in kept])
        pair_seed = int(children[pair_idx + 1].generate_state(1)[0])
        try:
            est, _ = pnp_ransac(world, target, intrinsics, pnp_config, seed=pair_seed)
        except (PnPError, ValueError):
            continue
        gt_rel = gt_poses[B].compose(gt_poses[A].inverse())
        err = relative_pose_error(est, gt_rel)
        if err.rot_deg < rot_threshold_deg:
            rot_ok += 1
        if err.trans < trans_threshold:
            trans_ok += 1

    return PairEvalResult(frame_diff, rot_ok / n_pairs, trans_ok / n_pairs, n_pairs)


# ---------------------------------------------------------------------------
# Stability-weighted VO wiring.

DEFAULT_LABEL_WEIGHTS = {
    LABEL_STABLE: 1.0,
    LABEL_UNSTABLE: 0.1,
    # ignore falls through to 1.0: unjudged is not evidence of badness
}


def weights_from_labels(labels_per_frame, weight_map: dict | None = None):
    """Build a (frame_index, keypoint_index) -> weight function from labels.

    labels_per_frame[k] holds (x, y, track_id, label) rows in keypoint order,
    exactly as written to / read from label files. Unlisted keypoints weigh
    1.0.
    """
    weight_map = DEFAULT_LABEL_WEIGHTS if weight_map is None else weight_map
    table = {}
    for frame, rows in enumerate(labels_per_frame):
        for kp, (_, _, _, label) in enumerate(rows):
            w = weight_map.get(label, 1.0)
            if w != 1.0:
                table[(frame, kp)] = w

    def weight_fn(frame_index: int, keypoint_index: int) -> float:
        return table.get((frame_index, keypoint_index), 1.0)

    return weight_fn


def run_weighted_vo(
    features_seq,
    intrinsics: Intrinsics,
    labels_per_frame=None,
    config: BAConfig | None = None,
    tau: float | None = None,
    weight_map: dict | None = None,
):
    """Run VO with label-derived observation weights (w = 1.0 when unlabeled)."""
    weight_fn = (
        weights_from_labels(labels_per_frame, weight_map) if labels_per_frame else None
    )
    tau = DEFAULT_MATCH_TAU if tau is None else tau
    return run_sequence(features_seq, intrinsics, config, tau=tau, weight_fn=weight_fn)
