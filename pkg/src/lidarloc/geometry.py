"""Poses, rotations and rigid transforms.

Angle convention everywhere: intrinsic z-y-x Euler angles, stored as
zeta = [yaw, pitch, roll] in radians. Body x-axis points forward,
z-axis up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angle(s) into [-pi, pi). Works on scalars and arrays."""
    return (np.asarray(a) + math.pi) % _TWO_PI - math.pi


def normalize_ypr(zeta: np.ndarray) -> np.ndarray:
    """Normalize [yaw, pitch, roll] so that yaw, roll are in [-pi, pi)
    and pitch is in [-pi/2, pi/2]."""
    yaw, pitch, roll = float(zeta[0]), float(zeta[1]), float(zeta[2])
    pitch = float(wrap_angle(pitch))
    if pitch > math.pi / 2:
        pitch = math.pi - pitch
        yaw += math.pi
        roll += math.pi
    elif pitch < -math.pi / 2:
        pitch = -math.pi - pitch
        yaw += math.pi
        roll += math.pi
    return np.array([float(wrap_angle(yaw)), pitch, float(wrap_angle(roll))])


@dataclass(frozen=True)
class Pose:
    """Vehicle pose: position p (m) and yaw-pitch-roll zeta (rad)."""

    p: np.ndarray
    zeta: np.ndarray
    singular: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))

    def normalized(self) -> "Pose":
        return Pose(self.p.copy(), normalize_ypr(self.zeta), self.singular)


@dataclass(frozen=True)
class Transform:
    """Rigid transform: x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return transform_points(self, pts)

    def matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.R
        H[:3, 3] = self.t
        return H


def rotation_from_ypr(zeta) -> np.ndarray:
    """Rotation matrix R_z(yaw) @ R_y(pitch) @ R_x(roll)."""
    zeta = np.asarray(zeta, dtype=float)
    if not np.all(np.isfinite(zeta)):
        raise ValueError("non-finite Euler angles")
    cy, sy = math.cos(zeta[0]), math.sin(zeta[0])
    cp, sp = math.cos(zeta[1]), math.sin(zeta[1])
    cr, sr = math.cos(zeta[2]), math.sin(zeta[2])
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def compose(a: Transform, b: Transform) -> Transform:
    """Transform applying b first, then a."""
    return Transform(a.R @ b.R, a.R @ b.t + a.t)


def inverse(T: Transform) -> Transform:
    Rt = T.R.T
    return Transform(Rt, -Rt @ T.t)


def transform_points(T: Transform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.size == 0:
        return pts.reshape(0, 3)
    return pts @ T.R.T + T.t


def pose_to_transform(pose: Pose) -> Transform:
    return Transform(rotation_from_ypr(pose.zeta), pose.p)


def transform_to_pose(T: Transform) -> Pose:
    """Extract [yaw, pitch, roll] from a z-y-x rotation.

    At the pitch = +-pi/2 singularity, roll is set to 0 by convention and
    the returned pose is flagged singular.
    """
    R = T.R
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    cp = math.sqrt(max(0.0, 1.0 - sp * sp))
    pitch = math.asin(sp)
    if cp > 1e-6:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
        singular = False
    else:
        # Gimbal lock: only yaw +- roll is observable; put it all in yaw.
        yaw = math.atan2(-R[0, 1], R[1, 1])
        roll = 0.0
        singular = True
    return Pose(T.t.copy(), normalize_ypr(np.array([yaw, pitch, roll])),
                singular)
