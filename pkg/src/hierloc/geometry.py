"""Rigid poses, the pinhole camera, projection and bearing vectors.

Conventions: poses map world to camera coordinates (``p_cam = R @ p_world + t``),
quaternions are stored ``(w, x, y, z)``, the camera looks down +z with +x to
the right and +y down, and pixel coordinates start at the top-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

BEHIND_CAMERA_Z = 1e-9
QUATERNION_LOAD_TOLERANCE = 1e-3


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula with a Taylor expansion near zero."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-16:
        return np.eye(3) + K + 0.5 * K @ K
    theta = np.sqrt(theta2)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1 - np.cos(theta)) / theta2) * K @ K


def axis_angle_quat(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        t = np.asarray(self.t, dtype=float).reshape(-1)
        if q.shape != (4,) or t.shape != (3,):
            raise ValidationError(f"pose needs a 4-quaternion and 3-translation, got {q.shape}, {t.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValidationError("pose has non-finite components")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUATERNION_LOAD_TOLERANCE:
            raise ValidationError(f"quaternion norm {norm:.6g} deviates from 1 by more than {QUATERNION_LOAD_TOLERANCE}")
        if abs(norm - 1.0) > 4 * np.finfo(float).eps:
            q = q / norm  # skipped when already unit, so reloading a pose keeps its bits
        else:
            q = q.copy()
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_Rt(cls, R: np.ndarray, t) -> Pose:
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.R.T @ self.t

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.q, other.q)
        t = self.R @ other.t + self.t
        return Pose(q / np.linalg.norm(q), t)

    def inverse(self) -> Pose:
        q_inv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q_inv, -quat_to_matrix(q_inv) @ self.t)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def __repr__(self) -> str:
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return (
            (pixels[:, 0] >= 0) & (pixels[:, 0] <= self.width)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] <= self.height)
        )


def project(camera: PinholeCamera, pose: Pose, point) -> np.ndarray | None:
    """Project one world point to pixels; ``None`` when it is behind the camera."""
    uv, valid = project_points(camera, pose, np.asarray(point, dtype=float).reshape(1, 3))
    return uv[0] if valid[0] else None


def project_points(camera: PinholeCamera, pose: Pose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns ``(uv, in_front)``; rows with ``in_front == False`` hold NaN.
    """
    pc = pose.transform(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    in_front = z > BEHIND_CAMERA_Z
    uv = np.full((len(pc), 2), np.nan)
    zf = z[in_front]
    uv[in_front, 0] = camera.fx * pc[in_front, 0] / zf + camera.cx
    uv[in_front, 1] = camera.fy * pc[in_front, 1] / zf + camera.cy
    return uv, in_front


def bearing(camera: PinholeCamera, pixel) -> np.ndarray:
    return bearings(camera, np.asarray(pixel, dtype=float).reshape(1, 2))[0]


def bearings(camera: PinholeCamera, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rays = np.column_stack([
        (pixels[:, 0] - camera.cx) / camera.fx,
        (pixels[:, 1] - camera.cy) / camera.fy,
        np.ones(len(pixels)),
    ])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def rotation_angle_deg(R: np.ndarray) -> float:
    # arccos of the trace loses precision near 0 and 180 degrees; use the quaternion
    q = matrix_to_quat(R)
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Camera-center distance in meters and relative rotation angle in degrees."""
    position_error = float(np.linalg.norm(a.center - b.center))
    # relative quaternion a * conj(b); |w| handles the double cover
    rel = quat_multiply(a.q, b.q * np.array([1.0, -1.0, -1.0, -1.0]))
    angle = float(np.degrees(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))))
    return position_error, angle
