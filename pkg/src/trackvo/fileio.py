"""Readers and writers for the pipeline's on-disk formats.

All text formats are whitespace-separated ASCII with a one-line header where
noted. Floats are written with repr-faithful "%.10g" so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion

FLOAT_FMT = "%.10g"

# Integer labels used in label and pair files.
LABEL_UNSTABLE = 0
LABEL_STABLE = 1
LABEL_IGNORE = 2

# track_id written for keypoints that belong to no surviving track.
NO_TRACK_ID = -1


class ParseError(ValueError):
    """Malformed input file; message carries path and 1-based line number."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


# ---------------------------------------------------------------------------
# PGM (P5) images: 8-bit for grayscale frames, 16-bit big-endian for depth.


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5); returns uint8 or uint16 array of shape (h, w)."""
    with open(path, "rb") as f:
        data = f.read()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ParseError(path, 1, "truncated PGM header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    if tokens[0] != b"P5":
        raise ParseError(path, 1, f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ParseError(path, 1, "non-integer PGM dimensions") from None
    if width <= 0 or height <= 0 or not (0 < maxval < 65536):
        raise ParseError(path, 1, "invalid PGM dimensions or maxval")

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    raw = data[pos : pos + n * dtype.itemsize]
    if len(raw) < n * dtype.itemsize:
        raise ParseError(path, 1, "truncated PGM pixel data")
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return img.astype(np.uint16) if maxval > 255 else img.copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write a binary PGM; uint8 -> maxval 255, uint16 -> maxval 65535."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    else:
        raise ValueError("PGM image must be uint8 or uint16")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(payload)


# ---------------------------------------------------------------------------
# Intrinsics: one line "fx fy cx cy width height".


def load_intrinsics(path) -> Intrinsics:
    with open(path) as f:
        line = f.readline()
    parts = line.split()
    if len(parts) != 6:
        raise ParseError(path, 1, f"expected 6 fields (fx fy cx cy width height), got {len(parts)}")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = (int(p) for p in parts[4:])
    except ValueError:
        raise ParseError(path, 1, "non-numeric intrinsics field") from None
    try:
        return Intrinsics(fx, fy, cx, cy, width, height)
    except ValueError as e:
        raise ParseError(path, 1, str(e)) from None


def save_intrinsics(path, intr: Intrinsics) -> None:
    with open(path, "w") as f:
        f.write(
            f"{_fmt(intr.fx)} {_fmt(intr.fy)} {_fmt(intr.cx)} {_fmt(intr.cy)} "
            f"{intr.width} {intr.height}\n"
        )


# ---------------------------------------------------------------------------
# TUM trajectories: "timestamp tx ty tz qx qy qz qw" per line, camera-to-world
# on disk. The in-memory convention stays world-to-camera; conversion happens
# here so a save/load round trip is the identity.


def save_trajectory(path, items, fps: float) -> None:
    """Write [(frame_index, world-to-camera Pose), ...]; timestamps = index/fps."""
    with open(path, "w") as f:
        for frame_index, pose in items:
            R_cw = pose.R.T
            t_cw = -pose.R.T @ pose.t
            q = rotation_to_quaternion(R_cw)
            fields = [f"{frame_index / fps:.6f}"]
            fields += [_fmt(v) for v in t_cw]
            fields += [_fmt(v) for v in q]
            f.write(" ".join(fields) + "\n")


def load_trajectory(path):
    """Read a TUM file; returns (timestamps (n,), [world-to-camera Pose, ...])."""
    timestamps, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(path, lineno, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(path, lineno, "non-numeric trajectory field") from None
            if not all(np.isfinite(vals)):
                raise ParseError(path, lineno, "non-finite trajectory value")
            t_cw = np.array(vals[1:4])
            R_cw = quaternion_to_rotation(np.array(vals[4:8]))
            timestamps.append(vals[0])
            poses.append(Pose(R_cw.T, -R_cw.T @ t_cw))
    return np.array(timestamps), poses


# ---------------------------------------------------------------------------
# Label files: "VOL1 <count>" then "x y track_id label" per keypoint.


def save_labels(path, rows) -> None:
    """rows: iterable of (x, y, track_id, label)."""
    rows = list(rows)
    with open(path, "w") as f:
        f.write(f"VOL1 {len(rows)}\n")
        for x, y, track_id, label in rows:
            f.write(f"{_fmt(x)} {_fmt(y)} {int(track_id)} {int(label)}\n")


def load_labels(path):
    """Returns list of (x, y, track_id, label)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty label file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "VOL1":
        raise ParseError(path, 1, "expected header 'VOL1 <count>'")
    try:
        count = int(header[1])
    except ValueError:
        raise ParseError(path, 1, "non-integer label count") from None
    rows = []
    for lineno in range(2, 2 + count):
        if lineno - 2 >= len(lines) - 1:
            raise ParseError(path, lineno, f"expected {count} label rows, file ends after {len(lines) - 1}")
        parts = lines[lineno - 1].split()
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
        try:
            x, y = float(parts[0]), float(parts[1])
            track_id, label = int(parts[2]), int(parts[3])
        except ValueError:
            raise ParseError(path, lineno, "malformed label row") from None
        if label not in (LABEL_UNSTABLE, LABEL_STABLE, LABEL_IGNORE):
            raise ParseError(path, lineno, f"label must be 0, 1 or 2, got {label}")
        rows.append((x, y, track_id, label))
    return rows


# ---------------------------------------------------------------------------
# Training-pair files: "VOP1 <frame_a> <frame_b> <count>" then
# "xa ya xb yb track_id label" per correspondence.


def save_pairs(path, frame_a: int, frame_b: int, rows) -> None:
    rows = list(rows)
    with open(path, "w") as f:
        f.write(f"VOP1 {int(frame_a)} {int(frame_b)} {len(rows)}\n")
        for xa, ya, xb, yb, track_id, label in rows:
            f.write(
                f"{_fmt(xa)} {_fmt(ya)} {_fmt(xb)} {_fmt(yb)} {int(track_id)} {int(label)}\n"
            )


def load_pairs(path):
    """Returns (frame_a, frame_b, [(xa, ya, xb, yb, track_id, label), ...])."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty pair file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "VOP1":
        raise ParseError(path, 1, "expected header 'VOP1 <frame_a> <frame_b> <count>'")
    try:
        frame_a, frame_b, count = (int(h) for h in header[1:])
    except ValueError:
        raise ParseError(path, 1, "non-integer pair header field") from None
    rows = []
    for lineno in range(2, 2 + count):
        if lineno - 2 >= len(lines) - 1:
            raise ParseError(path, lineno, f"expected {count} rows, file ends after {len(lines) - 1}")
        parts = lines[lineno - 1].split()
        if len(parts) != 6:
            raise ParseError(path, lineno, f"expected 6 fields, got {len(parts)}")
        try:
            xa, ya, xb, yb = (float(p) for p in parts[:4])
            track_id, label = int(parts[4]), int(parts[5])
        except ValueError:
            raise ParseError(path, lineno, "malformed pair row") from None
        rows.append((xa, ya, xb, yb, track_id, label))
    return frame_a, frame_b, rows


# ---------------------------------------------------------------------------
# Sequence manifest: "key value" lines, paths and globs relative to the
# manifest's directory. Required: fps, intrinsics, frames. Optional:
# depth_scale, depths, trajectory.


@dataclass
class Manifest:
    base_dir: str
    fps: float
    intrinsics_path: str
    frames_glob: str
    depth_scale: float = 1000.0
    depths_glob: str | None = None
    trajectory_path: str | None = None
    extra: dict = field(default_factory=dict)

    def load_intrinsics(self) -> Intrinsics:
        return load_intrinsics(self.intrinsics_path)

    def feature_files(self) -> list:
        return sorted(glob.glob(os.path.join(self.base_dir, self.frames_glob)))

    def depth_files(self) -> list:
        if self.depths_glob is None:
            return []
        return sorted(glob.glob(os.path.join(self.base_dir, self.depths_glob)))


def load_manifest(path) -> Manifest:
    base = os.path.dirname(os.path.abspath(path))
    entries = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 'key value', got {line!r}")
            entries[parts[0]] = parts[1].strip()
    for key in ("fps", "intrinsics", "frames"):
        if key not in entries:
            raise ParseError(path, 1, f"manifest missing required key '{key}'")
    try:
        fps = float(entries.pop("fps"))
        depth_scale = float(entries.pop("depth_scale", "1000"))
    except ValueError:
        raise ParseError(path, 1, "non-numeric fps or depth_scale") from None
    if fps <= 0:
        raise ParseError(path, 1, "fps must be positive")
    intrinsics_path = os.path.join(base, entries.pop("intrinsics"))
    frames_glob = entries.pop("frames")
    depths_glob = entries.pop("depths", None)
    trajectory = entries.pop("trajectory", None)
    return Manifest(
        base_dir=base,
        fps=fps,
        intrinsics_path=intrinsics_path,
        frames_glob=frames_glob,
        depth_scale=depth_scale,
        depths_glob=depths_glob,
        trajectory_path=os.path.join(base, trajectory) if trajectory else None,
        extra=entries,
    )


def save_manifest(path, *, fps, intrinsics, frames, depth_scale=None, depths=None, trajectory=None) -> None:
    """Write a manifest; path-valued entries must be relative to `path`'s dir."""
    with open(path, "w") as f:
        f.write(f"fps {_fmt(fps)}\n")
        f.write(f"intrinsics {intrinsics}\n")
        f.write(f"frames {frames}\n")
        if depth_scale is not None:
            f.write(f"depth_scale {_fmt(depth_scale)}\n")
        if depths is not None:
            f.write(f"depths {depths}\n")
        if trajectory is not None:
            f.write(f"trajectory {trajectory}\n")
