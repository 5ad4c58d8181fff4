"""KITTI odometry format I/O and map assembly.

Scans are little-endian float32 (x, y, z, reflectance) quadruples; poses
are lines of 12 numbers forming a row-major 3x4 transform.
"""
from __future__ import annotations

import os
from typing import List, Optional

import numpy as np

from .cloud import PointCloud, voxel_downsample
from .geometry import Transform, transform_points


class FormatError(ValueError):
    pass


def read_kitti_scan(data: bytes) -> PointCloud:
    if len(data) % 16 != 0:
        raise FormatError(f"scan byte length {len(data)} not divisible by 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float64))


def write_kitti_scan(cloud: PointCloud) -> bytes:
    arr = np.zeros((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.points
    return arr.tobytes()


def read_kitti_poses(text: str) -> List[Transform]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise FormatError(
                f"line {lineno}: expected 12 values, got {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts]).reshape(3, 4)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        poses.append(Transform(vals[:, :3], vals[:, 3]))
    return poses


def write_kitti_poses(poses: List[Transform]) -> str:
    lines = []
    for T in poses:
        m = np.hstack([T.R, T.t[:, None]])
        lines.append(" ".join(repr(float(v)) for v in m.ravel()))
    return "\n".join(lines) + "\n"


def assemble_map(scans: List[PointCloud], poses: List[Transform],
                 voxel: float = 0.5) -> PointCloud:
    """Union of pose-transformed scans, voxel-downsampled."""
    if len(scans) != len(poses):
        raise ValueError("scan and pose counts must match")
    parts = [transform_points(T, s.points) for s, T in zip(scans, poses)]
    return voxel_downsample(PointCloud(np.vstack(parts)), voxel)


class KittiSequence:
    """Directory with velodyne/NNNNNN.bin scans and an optional poses.txt."""

    def __init__(self, root: str, dt: float = 0.1):
        self.root = root
        self.dt = dt
        scan_dir = os.path.join(root, "velodyne")
        if not os.path.isdir(scan_dir):
            raise FormatError(f"missing scan directory: {scan_dir}")
        self.scan_files = sorted(
            os.path.join(scan_dir, f) for f in os.listdir(scan_dir)
            if f.endswith(".bin"))
        pose_file = os.path.join(root, "poses.txt")
        self.poses: Optional[List[Transform]] = None
        if os.path.isfile(pose_file):
            with open(pose_file) as f:
                self.poses = read_kitti_poses(f.read())
            if len(self.poses) > len(self.scan_files):
                raise FormatError("more poses than scans")
            for i, T in enumerate(self.poses):
                err = np.abs(T.R @ T.R.T - np.eye(3)).max()
                if err > 1e-4:
                    raise FormatError(f"pose {i}: rotation not orthonormal")

    def __len__(self) -> int:
        return len(self.scan_files)

    def scan(self, i: int) -> PointCloud:
        with open(self.scan_files[i], "rb") as f:
            return read_kitti_scan(f.read())

    def scans(self) -> List[PointCloud]:
        return [self.scan(i) for i in range(len(self))]


def write_sequence(root: str, scans: List[PointCloud],
                   poses: Optional[List[Transform]] = None) -> None:
    scan_dir = os.path.join(root, "velodyne")
    os.makedirs(scan_dir, exist_ok=True)
    for i, s in enumerate(scans):
        with open(os.path.join(scan_dir, f"{i:06d}.bin"), "wb") as f:
            f.write(write_kitti_scan(s))
    if poses is not None:
        with open(os.path.join(root, "poses.txt"), "w") as f:
            f.write(write_kitti_poses(poses))
