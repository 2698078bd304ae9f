"""Per-frame keypoint detection, patch descriptors, and feature files.

The detector is deliberately simple plumbing: Shi-Tomasi corner response with
3x3 non-maximum suppression, descriptors are mean-subtracted, L2-normalized
11x11 intensity patches. Everything downstream (tracking, BA, labeling) only
assumes FrameFeatures, so a learned frontend can be swapped in via the same
feature-file format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import ParseError, _fmt

PATCH_RADIUS = 5  # 11x11 descriptor window
DESCRIPTOR_DIM = (2 * PATCH_RADIUS + 1) ** 2
DEFAULT_MAX_POINTS = 500


@dataclass
class FrameFeatures:
    """Keypoints, descriptors and scores for one frame."""

    frame_index: int
    keypoints: np.ndarray  # (n, 2) float pixels, (x, y)
    descriptors: np.ndarray  # (n, d) float
    scores: np.ndarray  # (n,) in [0, 1]

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        n = len(self.keypoints)
        if self.descriptors.ndim != 2 or len(self.descriptors) != n or len(self.scores) != n:
            raise ValueError("keypoints, descriptors and scores must agree in length")
        if not (np.all(np.isfinite(self.keypoints)) and np.all(np.isfinite(self.descriptors))):
            raise ValueError("non-finite keypoint or descriptor value")
        if n and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.keypoints)


def _shi_tomasi_response(img: np.ndarray) -> np.ndarray:
    """Smaller structure-tensor eigenvalue, 3x3 window, borders zero."""
    img = img.astype(float)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])

    def box3(a):
        p = np.pad(a, 1)
        return sum(
            p[1 + dy : p.shape[0] - 1 + dy, 1 + dx : p.shape[1] - 1 + dx]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        )

    sxx, syy, sxy = box3(gx * gx), box3(gy * gy), box3(gx * gy)
    half_tr = 0.5 * (sxx + syy)
    root = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    return np.maximum(half_tr - root, 0.0)


def _nms_peaks(response: np.ndarray) -> np.ndarray:
    """3x3 non-max suppression; plateau ties go to the lowest (y, x).

    Returns peak coordinates as an (n, 2) int array of (y, x).
    """
    r = response
    p = np.pad(r, 1, constant_values=-np.inf)

    def shifted(dy, dx):
        return p[1 + dy : p.shape[0] - 1 + dy, 1 + dx : p.shape[1] - 1 + dx]

    earlier = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]  # raster order before (y, x)
    later = [(0, 1), (1, -1), (1, 0), (1, 1)]
    peak = r > 0.0
    for dy, dx in earlier:
        peak &= r > shifted(dy, dx)
    for dy, dx in later:
        peak &= r >= shifted(dy, dx)
    peak[0, :] = peak[-1, :] = False
    peak[:, 0] = peak[:, -1] = False
    ys, xs = np.nonzero(peak)
    return np.stack([ys, xs], axis=1)


def describe_patches(img: np.ndarray, keypoints_yx: np.ndarray):
    """Mean-subtracted, L2-normalized 11x11 patches, zero-padded at borders.

    Returns (patches (n, 121), valid mask); flat patches cannot be normalized
    and come back invalid.
    """
    padded = np.pad(img.astype(float), PATCH_RADIUS)
    offs = np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)
    ys = keypoints_yx[:, 0][:, None, None] + offs[None, :, None] + PATCH_RADIUS
    xs = keypoints_yx[:, 1][:, None, None] + offs[None, None, :] + PATCH_RADIUS
    patches = padded[ys, xs].reshape(len(keypoints_yx), -1)
    patches -= patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    valid = norms[:, 0] > 1e-12
    patches[valid] /= norms[valid]
    return patches, valid


def detect_and_describe(
    image: np.ndarray, max_points: int = DEFAULT_MAX_POINTS, frame_index: int = 0
) -> FrameFeatures:
    """Detect corners and build patch descriptors for one grayscale frame.

    Keypoints are ranked by corner score and truncated to max_points; score
    ties break on (y, x) so the result is deterministic. Scores are divided
    by the frame's top response, so they land in (0, 1].
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    response = _shi_tomasi_response(image)
    peaks = _nms_peaks(response)
    if len(peaks) == 0:
        d = DESCRIPTOR_DIM
        return FrameFeatures(frame_index, np.zeros((0, 2)), np.zeros((0, d)), np.zeros(0))

    scores = response[peaks[:, 0], peaks[:, 1]]
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -scores))
    peaks, scores = peaks[order][:max_points], scores[order][:max_points]

    descriptors, valid = describe_patches(image, peaks)
    peaks, scores, descriptors = peaks[valid], scores[valid], descriptors[valid]
    if len(peaks) == 0:
        d = DESCRIPTOR_DIM
        return FrameFeatures(frame_index, np.zeros((0, 2)), np.zeros((0, d)), np.zeros(0))
    keypoints = peaks[:, ::-1].astype(float)  # (x, y)
    return FrameFeatures(frame_index, keypoints, descriptors, scores / scores.max())


# ---------------------------------------------------------------------------
# Feature files: "VOF1 <count> <dim>" then one "x y score d1 ... d_dim" row
# per keypoint, named frame_%06d.features in a sequence directory.


def save_features(path, features: FrameFeatures) -> None:
    n = len(features)
    dim = features.descriptors.shape[1] if n else DESCRIPTOR_DIM
    with open(path, "w") as f:
        f.write(f"VOF1 {n} {dim}\n")
        for (x, y), score, desc in zip(
            features.keypoints, features.scores, features.descriptors
        ):
            row = [_fmt(x), _fmt(y), _fmt(score)]
            row += [_fmt(v) for v in desc]
            f.write(" ".join(row) + "\n")


def load_features(path, frame_index: int = 0) -> FrameFeatures:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty feature file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "VOF1":
        raise ParseError(path, 1, "expected header 'VOF1 <count> <dim>'")
    try:
        count, dim = int(header[1]), int(header[2])
    except ValueError:
        raise ParseError(path, 1, "non-integer count or dim in header") from None
    if count < 0 or dim <= 0:
        raise ParseError(path, 1, "count must be >= 0 and dim > 0")

    keypoints = np.zeros((count, 2))
    scores = np.zeros(count)
    descriptors = np.zeros((count, dim))
    for i in range(count):
        lineno = i + 2
        if i + 1 >= len(lines) or not lines[i + 1].strip():
            raise ParseError(
                path, lineno, f"header declares {count} rows, file ends after {i}"
            )
        parts = lines[i + 1].split()
        if len(parts) != 3 + dim:
            raise ParseError(
                path, lineno, f"expected {3 + dim} fields, got {len(parts)}"
            )
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError:
            raise ParseError(path, lineno, "non-numeric feature field") from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(path, lineno, "non-finite feature value")
        keypoints[i] = vals[:2]
        scores[i] = vals[2]
        descriptors[i] = vals[3:]
    try:
        return FrameFeatures(frame_index, keypoints, descriptors, scores)
    except ValueError as e:
        raise ParseError(path, 1, str(e)) from None
