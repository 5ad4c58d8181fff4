"""Relative pose estimation between consecutive scans.

Per-step relatives Delta_k map frame-k coordinates into frame k-1 (the
GICP alignment of scan k onto scan k-1). Chaining them gives the pose
relative to the start; composing a stored segment propagates a stale
global match to the current step.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import PointCloud
from .geometry import (Transform, compose, inverse, pose_to_transform,
                       transform_to_pose, wrap_angle)
from .gicp import GicpCloud, GicpConfig, RelativePose, gicp_align


@dataclass(frozen=True)
class RateEstimate:
    v: float                # speed (m/s)
    zeta_dot: np.ndarray    # yaw-pitch-roll rates (rad/s)

    def __post_init__(self):
        object.__setattr__(self, "zeta_dot",
                           np.asarray(self.zeta_dot, dtype=float))


def chain(prev: Transform, rel: Transform) -> Transform:
    """Accumulate one per-step relative onto the chained pose."""
    return compose(prev, rel)


def rates_from_poses(h_k: Transform, h_km1: Transform,
                     dt: float) -> RateEstimate:
    """Backward-difference speed and wrap-aware angular rates."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p_k = transform_to_pose(h_k)
    p_km1 = transform_to_pose(h_km1)
    v = float(np.linalg.norm(p_k.p - p_km1.p)) / dt
    zeta_dot = np.asarray(wrap_angle(p_k.zeta - p_km1.zeta)) / dt
    return RateEstimate(v, zeta_dot)


class RelativePoseLog:
    """Bounded log of per-step relatives keyed by the arrival step.

    Entry at key k is Delta_k = pose(k-1)^-1 o pose(k).
    """

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._rel: "OrderedDict[int, Transform]" = OrderedDict()

    def record(self, step: int, rel: Transform) -> None:
        self._rel[step] = rel
        while len(self._rel) > self.capacity:
            self._rel.popitem(last=False)

    def __contains__(self, step: int) -> bool:
        return step in self._rel

    def relative_between(self, t_k: int, t_kp: int) -> Transform:
        """Composed relative mapping frame t_kp into frame t_k (t_k <= t_kp).

        Satisfies relative_between(a, c) ==
        compose(relative_between(a, b), relative_between(b, c)).
        """
        if t_kp < t_k:
            raise ValueError("t_k must not exceed t_k'")
        out = Transform.identity()
        for s in range(t_k + 1, t_kp + 1):
            if s not in self._rel:
                raise KeyError(f"missing relative pose for step {s}")
            out = compose(out, self._rel[s])
        return out


class GicpRpe:
    """Scan-to-scan GICP odometry with a constant-velocity warm start."""

    def __init__(self, cfg: GicpConfig = GicpConfig()):
        self.cfg = cfg
        self._prev: Optional[GicpCloud] = None
        self._warm = Transform.identity()

    def step_relative(self, scan_prev: PointCloud,
                      scan_cur: PointCloud) -> RelativePose:
        cur = GicpCloud(scan_cur, self.cfg)
        if self._prev is None:
            self._prev = GicpCloud(scan_prev, self.cfg)
        res = gicp_align(scan_cur, scan_prev, init=self._warm, cfg=self.cfg,
                         target_pre=self._prev, source_pre=cur)
        self._prev = cur
        if res.converged:
            self._warm = res.T
        return res


class TruthRpe:
    """Exact relatives computed from ground-truth poses (testing aid)."""

    def __init__(self, truth: list):
        # world <- body_k; poses are converted to transforms up front.
        self.truth = [p if isinstance(p, Transform) else pose_to_transform(p)
                      for p in truth]

    def relative(self, k: int) -> Transform:
        return compose(inverse(self.truth[k - 1]), self.truth[k])
