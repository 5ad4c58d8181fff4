"""Plane-to-plane generalized ICP.

Per-point covariances come from k-NN PCA with eigenvalues regularized to
(eps, 1, 1) in the local frame (eps along the normal). Each iteration
trims the worst residuals and takes a Gauss-Newton step on a 6-vector
(rotation, translation) increment applied on the left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, voxel_downsample
from .geometry import Transform


@dataclass(frozen=True)
class GicpConfig:
    voxel: float = 0.5           # downsampling resolution (m); 0 disables
    k: int = 16                  # neighbors for covariance estimation
    eps: float = 1e-3            # covariance regularization along normal
    tol: float = 1e-4            # increment-norm stopping threshold
    max_iter: int = 50
    trim_fraction: float = 0.2   # worst residuals discarded per iteration
    trim_warmup: int = 3         # untrimmed iterations before trimming
    min_points: int = 20


@dataclass(frozen=True)
class RelativePose:
    T: Transform
    converged: bool
    rmse: float


class GicpCloud:
    """Preprocessed cloud: downsampled points, covariances and a kd-tree.

    Build once and reuse when the same cloud is a repeated align target.
    """

    def __init__(self, cloud: PointCloud, cfg: GicpConfig = GicpConfig()):
        if cfg.voxel > 0:
            cloud = voxel_downsample(cloud, cfg.voxel)
        self.points = cloud.points
        self.tree = cKDTree(self.points)
        self.covs = _regularized_covariances(self.points, self.tree, cfg)


def _regularized_covariances(pts: np.ndarray, tree: cKDTree,
                             cfg: GicpConfig) -> np.ndarray:
    k = min(cfg.k, len(pts) - 1)
    _, nbr = tree.query(pts, k=k + 1)
    nbrs = pts[nbr]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nij,nik->njk", centered, centered) / (k + 1)
    _, evecs = np.linalg.eigh(cov)  # ascending: normal first
    vals = np.array([cfg.eps, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", evecs, vals, evecs)


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _exp_so3(w: np.ndarray) -> np.ndarray:
    th = float(np.linalg.norm(w))
    W = _hat(w)
    if th < 1e-12:
        return np.eye(3) + W
    return (np.eye(3) + math.sin(th) / th * W
            + (1.0 - math.cos(th)) / th ** 2 * (W @ W))


def gicp_align(source: PointCloud, target: PointCloud,
               init: Transform = Transform.identity(),
               cfg: GicpConfig = GicpConfig(),
               target_pre: Optional[GicpCloud] = None,
               source_pre: Optional[GicpCloud] = None) -> RelativePose:
    """Align source onto target; returns the transform mapping source
    coordinates into the target frame."""
    src = source_pre if source_pre is not None else GicpCloud(source, cfg)
    tgt = target_pre if target_pre is not None else GicpCloud(target, cfg)
    if len(src.points) < cfg.min_points or len(tgt.points) < cfg.min_points:
        raise ValueError("clouds too small after downsampling")
    R = init.R.copy()
    t = init.t.copy()
    rmse = float("inf")
    converged = False
    n_keep = max(6, int(round(len(src.points) * (1.0 - cfg.trim_fraction))))
    for it in range(cfg.max_iter):
        moved = src.points @ R.T + t
        _, corr = tgt.tree.query(moved)
        q = tgt.points[corr]
        r = q - moved
        # Combined plane-to-plane covariance per correspondence.
        RC = np.einsum("ij,njk,lk->nil", R, src.covs, R)
        M = tgt.covs[corr] + RC
        Minv = np.linalg.inv(M)
        maha = np.einsum("ni,nij,nj->n", r, Minv, r)
        # Trimming while the estimate is still far off would discard the
        # very points that pull it out of a sliding (planar) minimum, so
        # the first iterations run untrimmed.
        if it < cfg.trim_warmup:
            keep = np.arange(len(maha))
        else:
            keep = np.argsort(maha)[:n_keep]
        yk = moved[keep]
        rk = r[keep]
        Wk = Minv[keep]
        # Residual model: r(d) = r + hat(y) w - u for increment d=(w, u).
        J = np.zeros((len(keep), 3, 6))
        J[:, 0, 1] = -yk[:, 2]
        J[:, 0, 2] = yk[:, 1]
        J[:, 1, 0] = yk[:, 2]
        J[:, 1, 2] = -yk[:, 0]
        J[:, 2, 0] = -yk[:, 1]
        J[:, 2, 1] = yk[:, 0]
        J[:, :, 3:] = -np.eye(3)
        JtW = np.einsum("nji,njk->nik", J, Wk)
        A = np.einsum("nij,njk->ik", JtW, J)
        b = -np.einsum("nij,nj->i", JtW, rk)
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 1e-9 * max(ev[-1], 1.0):
            return RelativePose(Transform(R, t), False, _rmse(rk))
        d = np.linalg.solve(A, b)
        dR = _exp_so3(d[:3])
        R = dR @ R
        t = dR @ t + d[3:]
        # Re-orthonormalize against drift.
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        rmse = _rmse(rk)
        if float(np.linalg.norm(d)) < cfg.tol:
            converged = True
            break
    return RelativePose(Transform(R, t), converged, rmse)


def _rmse(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))
