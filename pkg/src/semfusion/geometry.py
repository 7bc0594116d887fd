"""Pinhole camera model and rigid-body poses.

Camera frame convention: x right, y down, z forward. Pixel centres sit on
integer coordinates, so the principal point of a 640x480 Kinect is
(319.5, 239.5) and pixel (i, j) is the integer rounding of (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonPositiveDepth

Z_MIN = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def kinect(cls) -> "Intrinsics":
        return cls(525.0, 525.0, 319.5, 239.5, 640, 480)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Same camera resampled to another image size (pixel-centre aware)."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def from_file(cls, path) -> "Intrinsics":
        vals = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = v
        try:
            return cls(
                float(vals["fx"]),
                float(vals["fy"]),
                float(vals["cx"]),
                float(vals["cy"]),
                int(vals["width"]),
                int(vals["height"]),
            )
        except KeyError as e:
            raise ConfigError(f"{path}: missing intrinsics key {e}") from None
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_file(self, path) -> None:
        Path(path).write_text(
            f"fx={self.fx!r}\nfy={self.fy!r}\ncx={self.cx!r}\ncy={self.cy!r}\n"
            f"width={self.width}\nheight={self.height}\n"
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping camera-frame points into the world (T_WC)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q_xyzw, translation) -> "Pose":
        return cls(quaternion_to_matrix(q_xyzw), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix(), other.matrix(), rtol=0, atol=atol)

    def __repr__(self):
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def quaternion_to_matrix(q_xyzw) -> np.ndarray:
    x, y, z, w = (float(c) for c in q_xyzw)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(r) -> np.ndarray:
    """Rotation matrix to (qx, qy, qz, qw) with qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def invert(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def compose(a: Pose, b: Pose) -> Pose:
    """a ∘ b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def transform(pose: Pose, point) -> np.ndarray:
    """R·p + t for one point or an (N, 3) array."""
    p = np.asarray(point, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def project(intr: Intrinsics, point_cam) -> tuple[float, float] | None:
    """Pixel coordinates of a camera-frame point, or None when it is behind."""
    x, y, z = (float(c) for c in point_cam)
    if not z > Z_MIN:
        return None
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy


def project_points(intr: Intrinsics, points_cam: np.ndarray):
    """Vectorised projection; returns (u, v, z, in_front_mask)."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[:, 2]
    front = z > Z_MIN
    safe = np.where(front, z, 1.0)
    u = intr.fx * p[:, 0] / safe + intr.cx
    v = intr.fy * p[:, 1] / safe + intr.cy
    return u, v, z, front


def back_project(intr: Intrinsics, px, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = px
    return np.array([depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth])


def back_project_image(intr: Intrinsics, depth: np.ndarray) -> np.ndarray:
    """(H, W, 3) camera-frame points for every pixel centre; zero depth gives the origin."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    d = depth.astype(np.float64)
    pts = np.empty((h, w, 3))
    pts[..., 0] = d * ((u[None, :] - intr.cx) / intr.fx)
    pts[..., 1] = d * ((v[:, None] - intr.cy) / intr.fy)
    pts[..., 2] = d
    return pts


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions scaled so that z == 1."""
    return back_project_image(intr, np.ones((intr.height, intr.width)))


def to_pixel_index(u: np.ndarray, v: np.ndarray):
    """Round continuous pixel coordinates to integer pixel indices (half up)."""
    return np.floor(u + 0.5).astype(np.int64), np.floor(v + 0.5).astype(np.int64)
