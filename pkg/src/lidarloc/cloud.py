"""Point cloud containers and preprocessing.

Voxel downsampling, k-NN PCA normal estimation, flat-surface (road)
removal and bird's-eye-view projection.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray                 # (N, 3) float
    normals: Optional[np.ndarray] = None  # (N, 3) unit vectors, or None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise ValueError("normal count does not match point count")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class BevCloud:
    points: np.ndarray  # (N, 2) float

    def __post_init__(self):
        object.__setattr__(
            self, "points", np.asarray(self.points, dtype=float).reshape(-1, 2))

    def __len__(self) -> int:
        return self.points.shape[0]


def _voxel_keys(pts: np.ndarray, res: np.ndarray) -> np.ndarray:
    idx = np.floor(pts / res).astype(np.int64)
    # Shift into non-negative range so keys pack into one int per voxel.
    idx -= idx.min(axis=0)
    dims = idx.max(axis=0) + 1
    return (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]


def voxel_downsample(cloud: PointCloud, res, seed: int = 0) -> PointCloud:
    """Keep one seeded-random member point per occupied voxel."""
    res = np.broadcast_to(np.asarray(res, dtype=float), (3,))
    if np.any(res <= 0):
        raise ValueError("voxel resolution must be positive")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(pts.copy())
    keys = _voxel_keys(pts, res)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[starts, len(sorted_keys)])
    rng = np.random.default_rng(seed)
    picks = order[starts + rng.integers(0, counts)]
    return PointCloud(pts[np.sort(picks)])


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from PCA of the k nearest neighbors.

    The normal is the least-eigenvalue eigenvector of the neighborhood
    covariance, with sign flipped so n_z >= 0. Neighborhoods with a
    rank < 2 covariance fall back to +z.
    """
    pts = cloud.points
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(pts) < k + 1:
        raise ValueError("cloud must have at least k+1 points")
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k + 1)
    nbrs = pts[nbr]                                   # (N, k+1, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nij,nik->njk", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)                # ascending eigenvalues
    normals = evecs[:, :, 0].copy()
    # Degenerate (near-collinear) neighborhoods: two vanishing eigenvalues.
    scale = np.maximum(evals[:, 2], 1e-30)
    degenerate = evals[:, 1] / scale < 1e-9
    normals[degenerate] = (0.0, 0.0, 1.0)
    flip = normals[:, 2] < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts.copy(), normals)


def remove_flat(cloud: PointCloud, nz_threshold: float = 0.75) -> PointCloud:
    """Drop points whose normal is close to vertical (|n_z| > threshold)."""
    if cloud.normals is None:
        raise ValueError("remove_flat requires normals")
    if not 0.0 < nz_threshold <= 1.0:
        raise ValueError("nz_threshold must be in (0, 1]")
    keep = np.abs(cloud.normals[:, 2]) <= nz_threshold
    return PointCloud(cloud.points[keep], cloud.normals[keep])


def to_bev(cloud: PointCloud) -> BevCloud:
    return BevCloud(cloud.points[:, :2].copy())
