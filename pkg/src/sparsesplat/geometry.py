"""Pinhole cameras, rigid world-to-camera poses, projection and reprojection.

Pose convention: ``x_cam = R @ x_world + t``. Quaternions are stored ``(w, x, y, z)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

Z_NEAR = 1e-4


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise GeometryError("zero-norm quaternion")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix (or stack of them) from (w, x, y, z) quaternions."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion with non-negative w for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(q)
    return -q if q[0] < 0 else q


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula; series expansion near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    K = hat(omega)
    if theta2 < 1e-12:
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    # quaternion route is well conditioned everywhere except exactly pi
    q = rotmat_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / q[0]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * v / s


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# cameras


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
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise GeometryError(f"image size must be positive integers, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.height), int(self.width)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera rigid transform ``x_cam = R x_world + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = normalize_quaternion(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3).copy())

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "RigidPose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        R1, R2 = self.R, other.R
        return RigidPose.from_matrix(R1 @ R2, R1 @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        R = self.R
        return RigidPose.from_matrix(R.T, -R.T @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def perturbed(self, rotation_delta, translation_delta) -> "RigidPose":
        """Left-multiplicative update by ``exp(rotation_delta)`` and a translation offset."""
        dR = so3_exp(rotation_delta)
        return RigidPose.from_matrix(dR @ self.R, dR @ self.translation + np.asarray(translation_delta, float))


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: Intrinsics
    pose: RigidPose = field(default_factory=RigidPose)
    id: int = 0

    def with_pose(self, pose: RigidPose) -> "Camera":
        return Camera(self.intrinsics, pose, self.id)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.shape


# ---------------------------------------------------------------------------
# projection


def project(camera: Camera, point_world, z_near: float = Z_NEAR) -> Optional[tuple[np.ndarray, float]]:
    """Project a world point; ``None`` when it lies at or behind ``z_near``."""
    X, Y, Z = camera.pose.apply(point_world)
    if Z <= z_near:
        return None
    k = camera.intrinsics
    return np.array([k.fx * X / Z + k.cx, k.fy * Y / Z + k.cy]), float(Z)


def backproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    k = camera.intrinsics
    u, v = pixel
    x_cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    R = camera.pose.R
    return R.T @ (x_cam - camera.pose.translation)


def reproject_pixel(cam_a: Camera, cam_b: Camera, pixel_a, depth_a: float) -> Optional[tuple[np.ndarray, float]]:
    """Transport pixel ``pixel_a`` at depth ``depth_a`` from view a into view b."""
    return project(cam_b, backproject(cam_a, pixel_a, depth_a))


def project_points(camera: Camera, points_world) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(pixels (N,2), depths (N,))``; depths ≤ z_near are not masked."""
    pc = camera.pose.apply(points_world)
    k = camera.intrinsics
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return uv, z


def backproject_depth_map(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """World points (H, W, 3) for every pixel center of a depth map."""
    k = camera.intrinsics
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    x_cam = np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)
    R = camera.pose.R
    return (x_cam - camera.pose.translation) @ R


def camera_depths(camera: Camera, points_world) -> np.ndarray:
    return camera.pose.apply(points_world)[:, 2]


# ---------------------------------------------------------------------------
# camera files


def camera_to_dict(camera: Camera) -> dict:
    k = camera.intrinsics
    return {
        "id": int(camera.id),
        "fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy),
        "width": int(k.width), "height": int(k.height),
        "q": [float(x) for x in camera.pose.rotation],
        "t": [float(x) for x in camera.pose.translation],
    }


def camera_from_dict(d: dict) -> Camera:
    try:
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))
        pose = RigidPose(np.asarray(d["q"], float), np.asarray(d["t"], float))
        return Camera(intr, pose, int(d["id"]))
    except KeyError as e:
        raise GeometryError(f"camera record missing field {e}") from None


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=2))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [camera_from_dict(d) for d in data]
