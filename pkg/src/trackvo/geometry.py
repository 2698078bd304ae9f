"""Pinhole camera geometry, robust-cost primitives, and SE(3) helpers.

Conventions used throughout the package:
  * poses are world-to-camera: X_cam = R @ X_world + t
  * pixels are (x, y) with x along image columns
  * camera-frame depth is the third camera coordinate Z'
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Depth below this value counts as "behind the camera" for projection.
EPS_Z = 1e-9

# Soft depth corridor for the bounded-depth penalty, scene units.
DEFAULT_DEPTH_BOUNDS = (0.1, 5.0)

# Huber parameter, pixels; applied to the squared residual magnitude.
DEFAULT_HUBER_DELTA = 2.0

_ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """Raised when a point projects with camera depth <= EPS_Z."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the image size they apply to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass
class Pose:
    """World-to-camera rigid transform (R, t)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"R is not orthonormal (|R^T R - I|_max = {err:.3e})")
        if abs(np.linalg.det(self.R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must have determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, point: np.ndarray) -> np.ndarray:
        """Map a world point into the camera frame."""
        return self.R @ np.asarray(point, dtype=float) + self.t

    def compose(self, other: "Pose") -> "Pose":
        """Return self o other (apply `other` first)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; stable series for small angles."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = skew(omega)
    if theta2 < 1e-16:
        # second-order series keeps the result orthonormal to machine precision
        return np.eye(3) + W + 0.5 * (W @ W)
    theta = math.sqrt(theta2)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * W
        + ((1.0 - math.cos(theta)) / theta2) * (W @ W)
    )


def _se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map of a twist [translation(3), rotation(3)] -> (R, t)."""
    rho = np.asarray(xi[:3], dtype=float)
    omega = np.asarray(xi[3:6], dtype=float)
    theta2 = float(omega @ omega)
    W = skew(omega)
    R = so3_exp(omega)
    if theta2 < 1e-16:
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        theta = math.sqrt(theta2)
        V = (
            np.eye(3)
            + ((1.0 - math.cos(theta)) / theta2) * W
            + ((theta - math.sin(theta)) / (theta2 * theta)) * (W @ W)
        )
    return R, V @ rho


def se3_retract(pose: Pose, xi: np.ndarray) -> Pose:
    """Left-multiply `pose` by the SE(3) exponential of the 6-vector `xi`.

    xi[:3] is translation, xi[3:] rotation; the update acts in the camera
    frame of the current pose, matching the optimizer's local coordinates.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    R_d, t_d = _se3_exp(xi)
    return Pose(R_d @ pose.R, R_d @ pose.t + t_d)


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def project(intrinsics: Intrinsics, pose: Pose, point: np.ndarray):
    """Project a world point; returns (pixel (2,), camera depth Z').

    Raises BehindCameraError for Z' <= EPS_Z.
    """
    xc = pose.transform(point)
    z = float(xc[2])
    if z <= EPS_Z:
        raise BehindCameraError(f"point projects behind the camera (Z' = {z:.3e})")
    pixel = np.array(
        [
            intrinsics.fx * xc[0] / z + intrinsics.cx,
            intrinsics.fy * xc[1] / z + intrinsics.cy,
        ]
    )
    return pixel, z


def reprojection_error_sq(
    intrinsics: Intrinsics, pose: Pose, point: np.ndarray, observed: np.ndarray
) -> float:
    """Squared pixel distance between the projection and an observation."""
    pixel, _ = project(intrinsics, pose, point)
    d = pixel - np.asarray(observed, dtype=float).reshape(2)
    return float(d @ d)


def depth_regularizer(z: float, bounds=DEFAULT_DEPTH_BOUNDS):
    """Soft two-sided depth penalty; returns (value, d value / d Z').

    Zero inside [d_min, d_max], quadratic outside, C^1 at both corners.
    """
    d_min, d_max = bounds
    hi = max(0.0, z - d_max)
    lo = min(z - d_min, 0.0)
    return hi * hi + lo * lo, 2.0 * hi + 2.0 * lo


def robust_loss(s: float, delta: float = DEFAULT_HUBER_DELTA):
    """Huber loss on an already-squared residual; returns (value, d/ds).

    Identity for s <= delta^2, then grows like 2*delta*sqrt(s); the first
    derivative is continuous at the branch point and lies in (0, 1].
    """
    if s < 0.0:
        raise ValueError("robust_loss expects a squared (non-negative) argument")
    d2 = delta * delta
    if s <= d2:
        return s, 1.0
    r = math.sqrt(s)
    return 2.0 * delta * r - d2, delta / r


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> (qx, qy, qz, qw), unit norm, qw >= 0."""
    t = np.trace(R)
    if t > 0.0:
        w = math.sqrt(1.0 + t) / 2.0
        x = (R[2, 1] - R[1, 2]) / (4.0 * w)
        y = (R[0, 2] - R[2, 0]) / (4.0 * w)
        z = (R[1, 0] - R[0, 1]) / (4.0 * w)
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(0.0, 1.0 + R[i, i] - R[j, j] - R[k, k])) * 2.0
        q = np.empty(3)
        q[i] = s / 4.0
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        w = (R[k, j] - R[j, k]) / s
        x, y, z = q
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) -> rotation matrix; q need not be unit norm."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
