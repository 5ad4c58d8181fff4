"""Five-block localization pipeline: particle filter, relative pose
estimation, road segmentation, scan-to-map matching and sample update.

Runs on a deterministic schedule: every block executes inside step() and
the S2M result lands sim_s2m_latency steps after it was issued, which
makes the delayed-correction logic reproducible and unit-testable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from . import pfilter
from .cloud import (BevCloud, PointCloud, estimate_normals, remove_flat,
                    to_bev, voxel_downsample)
from .config import PipelineConfig
from .distgrid import DistanceGrid
from .geometry import (Pose, Transform, compose, pose_to_transform,
                       transform_to_pose, wrap_angle)
from .gicp import GicpCloud, GicpConfig, gicp_align
from .matcher import MatchPyramid, MatchResult, SearchWindow, \
    branch_and_bound_match, score_at
from .motion import ProcessNoise
from .rpe import GicpRpe, RateEstimate, RelativePoseLog, rates_from_poses


@dataclass
class PendingMatch:
    issued_step: int
    seed_pose: Pose
    bev_scan: BevCloud        # road-removed BEV scan, body frame
    scan3d: PointCloud        # downsampled 3D scan, body frame
    status: str = "running"   # running | done | failed
    result: Optional[MatchResult] = None
    refined_pose: Optional[Pose] = None


@dataclass
class LocalizationMonitor:
    """Tracks the std-based localization criteria and the reset rules."""

    loc_std: float
    loc_steps: int
    loc_dist: float
    loc_turn: float
    reset_std: float
    consec_below: int = 0
    ref_p: Optional[np.ndarray] = None
    ref_yaw: float = 0.0
    localized: bool = False
    reset_count: int = 0
    first_localized_step: Optional[int] = None
    last_localized_step: Optional[int] = None

    def update(self, est: pfilter.FilterEstimate, step: int) -> List[str]:
        """Returns emitted events; 'reset' means the caller must
        re-initialize the particle set."""
        events: List[str] = []
        mean = est.mean_state
        if self.localized:
            if est.pos_std > self.reset_std:
                self.localized = False
                self._clear_window()
                self.reset_count += 1
                events.append("reset")
            return events
        if est.pos_std < self.loc_std:
            if self.consec_below == 0:
                self.ref_p = mean.p.copy()
                self.ref_yaw = float(mean.zeta[0])
            self.consec_below += 1
            moved = float(np.linalg.norm(mean.p - self.ref_p))
            turned = abs(float(wrap_angle(mean.zeta[0] - self.ref_yaw)))
            if self.consec_below >= self.loc_steps and (
                    moved >= self.loc_dist or turned >= self.loc_turn):
                self.localized = True
                if self.first_localized_step is None:
                    self.first_localized_step = step
                self.last_localized_step = step
                events.append("localized")
        else:
            if self.consec_below >= self.loc_steps:
                # Converged without scan diversity: false positive region.
                self.reset_count += 1
                events.append("reset")
            self._clear_window()
        return events

    def _clear_window(self):
        self.consec_below = 0
        self.ref_p = None


@dataclass
class StepRecord:
    step: int
    t: float
    pose: np.ndarray        # mean [x, y, z, yaw, pitch, roll]
    pos_std: float
    ess: float
    events: List[str] = field(default_factory=list)


class LocalizationPipeline:
    def __init__(self, map_cloud: PointCloud, grid: DistanceGrid,
                 pyramid: MatchPyramid, cfg: PipelineConfig, seed: int = 0,
                 truth_rpe=None):
        self.cfg = cfg
        self.grid = grid
        self.pyramid = pyramid
        self.rng = np.random.default_rng(seed)
        self.noise = ProcessNoise(cfg.q_array())
        gicp_cfg = GicpConfig(voxel=cfg.voxel_res)
        self.map_pre = GicpCloud(map_cloud, gicp_cfg)
        self.gicp_cfg = gicp_cfg
        self.bounds = (grid.spec.lb, grid.spec.ub)
        self.particles = pfilter.init_uniform(
            grid.spec.lb, grid.spec.ub, cfg.v_max, cfg.n_particles, self.rng)
        self.truth_rpe = truth_rpe
        self.gicp_rpe = GicpRpe(gicp_cfg) if truth_rpe is None else None
        self.rpe_log = RelativePoseLog()
        self.chain_pose = Transform.identity()
        self.prev_chain_pose = Transform.identity()
        self.pending: Optional[PendingMatch] = None
        self.monitor = LocalizationMonitor(
            cfg.loc_std, cfg.loc_steps, cfg.loc_dist, cfg.loc_turn,
            cfg.reset_std)
        self.trace: List[StepRecord] = []
        self.k = 0
        self._prev_scan_ds: Optional[PointCloud] = None

    # -- one filter cycle -------------------------------------------------

    def step(self, scan: PointCloud) -> Optional[pfilter.FilterEstimate]:
        cfg = self.cfg
        k = self.k
        events: List[str] = []
        if len(scan) == 0:
            self.trace.append(StepRecord(k, k * cfg.dt, np.full(6, np.nan),
                                         float("nan"), float("nan"),
                                         ["skipped_empty_scan"]))
            self.k += 1
            return None
        scan_ds = voxel_downsample(scan, cfg.voxel_res, seed=k)
        if k > 0:
            self._rpe_step(k, scan_ds)
            self.particles = pfilter.predict(
                self.particles, cfg.dt, self.noise, self.rng,
                cfg.forward_only)
        self._prev_scan_ds = scan_ds
        self.particles = pfilter.update_weights(self.particles, self.grid,
                                                scan_ds)
        if self.pending is not None and \
                k >= self.pending.issued_step + cfg.sim_s2m_latency:
            events += self._complete_pending(scan_ds)
        frozen = self.pending is not None
        self.particles = pfilter.ParticleSet(
            self.particles.states, self.particles.log_weights, frozen)
        before = self.particles
        self.particles = pfilter.maybe_resample(self.particles, self.rng)
        if self.particles is not before:
            events.append("resample")
        if self.pending is None:
            events.append("s2m_issued")
            self._issue_s2m(k, scan_ds)
            if cfg.sim_s2m_latency == 0:
                events += self._complete_pending(scan_ds)
        est = pfilter.estimate(self.particles)
        mon_events = self.monitor.update(est, k)
        events += mon_events
        if "reset" in mon_events:
            self._reset()
            est = pfilter.estimate(self.particles)
        pose6 = np.r_[est.mean_state.p, est.mean_state.zeta]
        self.trace.append(StepRecord(
            k, k * cfg.dt, pose6, est.pos_std,
            pfilter.effective_sample_size(self.particles), events))
        self.k += 1
        return est

    def _rpe_step(self, k: int, scan_ds: PointCloud) -> None:
        if self.truth_rpe is not None:
            rel = self.truth_rpe.relative(k)
        else:
            res = self.gicp_rpe.step_relative(self._prev_scan_ds, scan_ds)
            rel = res.T
        self.rpe_log.record(k, rel)
        self.prev_chain_pose = self.chain_pose
        self.chain_pose = compose(self.chain_pose, rel)

    def _reset(self) -> None:
        cfg = self.cfg
        self.particles = pfilter.init_uniform(
            self.bounds[0], self.bounds[1], cfg.v_max, cfg.n_particles,
            self.rng)
        self.pending = None

    # -- scan-to-map matching ---------------------------------------------

    def _issue_s2m(self, k: int, scan_ds: PointCloud) -> None:
        cfg = self.cfg
        j = pfilter.argmax_particle(self.particles)
        seed_pose = self.particles.pose(j)
        if len(scan_ds) >= cfg.normal_k + 1:
            filtered = remove_flat(
                estimate_normals(scan_ds, cfg.normal_k), cfg.nz_threshold)
        else:
            filtered = scan_ds
        if len(filtered) > 0:
            # Decimate in plan view; one point per match cell is enough.
            filtered = voxel_downsample(filtered, (cfg.d_m, cfg.d_m, 1e9),
                                        seed=k)
        self.pending = PendingMatch(k, seed_pose, to_bev(filtered), scan_ds)

    def s2m_task(self, pending: PendingMatch) -> PendingMatch:
        """Two-stage match: exact windowed BEV branch and bound, then a
        full 3D GICP refinement against the map."""
        cfg = self.cfg
        seed = pending.seed_pose
        if len(pending.bev_scan) == 0:
            pending.status = "failed"
            return pending
        # The full window covers global relocalization; once localized the
        # particle cloud is tight around the seed, so a small translation
        # and heading window suffices, keeps match times low, and excludes
        # rotational aliases of near-symmetric structure (intersections).
        # Either way the translation window is clipped to the mapped area.
        if self.monitor.localized:
            half = np.array([cfg.window_localized, cfg.window_localized])
            th_lo = float(seed.zeta[0]) - cfg.theta_localized
            th_hi = float(seed.zeta[0]) + cfg.theta_localized
        else:
            half = np.array([cfg.window_x, cfg.window_y])
            th_lo, th_hi = -math.pi, math.pi - cfg.d_theta
        ext_lo = self.pyramid.origin
        ext_hi = self.pyramid.origin + \
            np.array(self.pyramid.levels[0].shape) * self.pyramid.base_res
        win = SearchWindow(
            np.clip(seed.p[:2] - half, ext_lo, ext_hi),
            np.clip(seed.p[:2] + half, ext_lo, ext_hi),
            th_lo, th_hi, cfg.d_theta)
        seed_score = score_at(self.pyramid, 0, pending.bev_scan,
                              float(seed.zeta[0]), seed.p[:2])
        # Only matches beating the seed's own score are useful, so the
        # seed score doubles as the branch-and-bound pruning floor.
        match = branch_and_bound_match(self.pyramid, pending.bev_scan, win,
                                       min_score=seed_score)
        if match is None:
            pending.status = "failed"
            return pending
        pending.result = match
        init = pose_to_transform(Pose(
            np.r_[match.t, seed.p[2]],
            np.array([match.theta, seed.zeta[1], seed.zeta[2]])))
        res = gicp_align(pending.scan3d, None, init=init, cfg=self.gicp_cfg,
                         target_pre=self.map_pre)
        if not res.converged:
            pending.status = "failed"
            return pending
        pending.refined_pose = transform_to_pose(res.T)
        pending.status = "done"
        return pending

    def _complete_pending(self, scan_ds: PointCloud) -> List[str]:
        pending = self.s2m_task(self.pending)
        self.pending = None
        if pending.status != "done":
            return ["s2m_rejected"]
        applied = self.apply_correction(pending, self.k, scan_ds)
        return ["s2m_accepted"] if applied else ["s2m_rejected"]

    def apply_correction(self, pending: PendingMatch, now: int,
                         scan_ds: PointCloud) -> bool:
        """Propagate the delayed match to `now` through logged relatives
        and overwrite the highest-weight particle if that raises its
        scan likelihood."""
        cfg = self.cfg
        try:
            seg = self.rpe_log.relative_between(pending.issued_step, now)
        except KeyError:
            return False
        t_now = compose(pose_to_transform(pending.refined_pose), seg)
        pose_now = transform_to_pose(t_now)
        j = pfilter.argmax_particle(self.particles)
        old_ll = pfilter.scan_log_likelihoods(
            self.particles.states[j:j + 1], self.grid, scan_ds)[0]
        cand = np.r_[pose_now.p, pose_now.zeta,
                     self.particles.states[j, 6:]]
        new_ll = pfilter.scan_log_likelihoods(
            cand[None, :], self.grid, scan_ds)[0]
        if new_ll < old_ll:
            return False
        rates = rates_from_poses(self.chain_pose, self.prev_chain_pose,
                                 cfg.dt)
        ps = pfilter.correct_particle(self.particles, j, pose_now,
                                      rates.v, rates.zeta_dot)
        logw = ps.log_weights.copy()
        logw[j] += new_ll - old_ll
        self.particles = pfilter.ParticleSet(
            ps.states, logw - logsumexp(logw), ps.resampling_frozen)
        return True


def compute_metrics(trace: List[StepRecord], truth: Optional[List[Pose]],
                    monitor: LocalizationMonitor) -> dict:
    """Run metrics A-E (step counts, 1-based; None when undefined)."""
    a = b = c = d = e = None
    if monitor.first_localized_step is not None:
        b = monitor.first_localized_step + 1
    if monitor.last_localized_step is not None:
        a = monitor.last_localized_step + 1
    if truth is not None:
        err = np.array([
            float(np.linalg.norm(rec.pose[:3] - truth[i].p))
            if np.all(np.isfinite(rec.pose[:3])) else np.inf
            for i, rec in enumerate(trace)])
        c = _first_window(err, 5.0, 10)
        d = _first_window(err, 5.0, 50)
        e = _first_window(err, 2.5, 50)
    return {"A": a, "B": b, "C": c, "D": d, "E": e,
            "resets": monitor.reset_count}


def _first_window(err: np.ndarray, thresh: float, n: int) -> Optional[int]:
    ok = err <= thresh
    for k in range(0, len(ok) - n + 1):
        if np.all(ok[k:k + n]):
            return k + 1
    return None


def run_sequence(scans: List[PointCloud], pipeline: LocalizationPipeline,
                 truth: Optional[List[Pose]] = None) -> dict:
    if len(scans) == 0:
        raise ValueError("need at least one scan")
    for scan in scans:
        pipeline.step(scan)
    metrics = compute_metrics(pipeline.trace, truth, pipeline.monitor)
    return {"trace": pipeline.trace, "metrics": metrics}
