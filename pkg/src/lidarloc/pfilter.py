"""Bootstrap particle filter over the 11-dimensional vehicle state.

Weights live in log-space; normalization is log-sum-exp. Resampling is
systematic and gated on the effective sample size dropping below half
the particle count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import motion
from .cloud import PointCloud
from .distgrid import DistanceGrid
from .geometry import Pose, normalize_ypr
from .motion import ProcessNoise, VehicleState


@dataclass(frozen=True)
class ParticleSet:
    states: np.ndarray        # (N_p, 11)
    log_weights: np.ndarray   # (N_p,) normalized: logsumexp == 0
    resampling_frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "states",
                           np.asarray(self.states, dtype=float))
        object.__setattr__(self, "log_weights",
                           np.asarray(self.log_weights, dtype=float))

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def particle(self, i: int) -> VehicleState:
        return VehicleState.from_array(self.states[i])

    def pose(self, i: int) -> Pose:
        return Pose(self.states[i, motion.P].copy(),
                    self.states[i, motion.ZETA].copy())


@dataclass(frozen=True)
class FilterEstimate:
    mean_state: VehicleState
    pos_cov: np.ndarray   # (3, 3)
    pos_std: float        # sqrt of max eigenvalue of pos_cov


def _normalize(logw: np.ndarray) -> np.ndarray:
    return logw - logsumexp(logw)


def init_uniform(lb, ub, v_max: float, n_p: int,
                 rng: np.random.Generator) -> ParticleSet:
    """Particles uniform over the map box with randomized attitude/rates."""
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if n_p < 1 or v_max < 0 or np.any(ub <= lb):
        raise ValueError("need n_p >= 1, v_max >= 0 and a nondegenerate box")
    x = np.empty((n_p, motion.STATE_DIM))
    x[:, motion.P] = rng.uniform(lb, ub, size=(n_p, 3))
    x[:, 3] = rng.uniform(-math.pi, math.pi, size=n_p)
    x[:, 4] = rng.uniform(math.radians(-30), math.radians(30), size=n_p)
    x[:, 5] = rng.uniform(math.radians(-10), math.radians(10), size=n_p)
    x[:, motion.V] = rng.uniform(0.0, v_max, size=n_p)
    x[:, motion.ZETA_DOT] = rng.normal(0.0, 0.1, size=(n_p, 3))
    x[:, motion.A] = 0.0
    logw = np.full(n_p, -math.log(n_p))
    return ParticleSet(x, logw)


def predict(ps: ParticleSet, dt: float, noise: ProcessNoise,
            rng: np.random.Generator,
            forward_only: bool = True) -> ParticleSet:
    states = motion.propagate_noisy_array(ps.states, dt, noise, rng,
                                          forward_only)
    return replace(ps, states=states)


def update_weights(ps: ParticleSet, grid: DistanceGrid,
                   scan: PointCloud) -> ParticleSet:
    """Multiply weights by the likelihood-field scan likelihood, then
    renormalize. All particle poses are evaluated in one batch."""
    if len(scan) == 0:
        raise ValueError("scan must be nonempty")
    ll = scan_log_likelihoods(ps.states, grid, scan)
    return replace(ps, log_weights=_normalize(ps.log_weights + ll))


def scan_log_likelihoods(states: np.ndarray, grid: DistanceGrid,
                         scan: PointCloud) -> np.ndarray:
    """Per-particle log-likelihood of one scan (vectorized over particles)."""
    n = states.shape[0]
    pts = scan.points
    yaw, pitch, roll = states[:, 3], states[:, 4], states[:, 5]
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    world = np.einsum("nij,mj->nmi", R, pts) + states[:, None, motion.P]
    d = grid.lookup_many(world.reshape(-1, 3)).reshape(n, len(pts))
    spec = grid.spec
    return -np.sum(np.minimum(d * d, spec.d_max ** 2), axis=1) / spec.sigma ** 2


def effective_sample_size(ps: ParticleSet) -> float:
    return float(1.0 / np.sum(ps.weights() ** 2))


def systematic_resample_indices(weights: np.ndarray,
                                rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    cumsum = np.cumsum(weights)
    cumsum[-1] = 1.0
    return np.searchsorted(cumsum, positions, side="right").clip(0, n - 1)


def maybe_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    if ps.resampling_frozen:
        return ps
    if effective_sample_size(ps) >= 0.5 * ps.n:
        return ps
    idx = systematic_resample_indices(ps.weights(), rng)
    states = ps.states[idx].copy()
    logw = np.full(ps.n, -math.log(ps.n))
    return ParticleSet(states, logw, ps.resampling_frozen)


def estimate(ps: ParticleSet) -> FilterEstimate:
    w = ps.weights()
    x = ps.states
    mean = np.empty(motion.STATE_DIM)
    mean[motion.P] = w @ x[:, motion.P]
    for j in (3, 4, 5):  # circular mean per angle component
        mean[j] = math.atan2(float(w @ np.sin(x[:, j])),
                             float(w @ np.cos(x[:, j])))
    mean[motion.V] = w @ x[:, motion.V]
    mean[motion.ZETA_DOT] = w @ x[:, motion.ZETA_DOT]
    mean[motion.A] = w @ x[:, motion.A]
    dp = x[:, motion.P] - mean[motion.P]
    cov = (w[:, None] * dp).T @ dp
    cov = 0.5 * (cov + cov.T)
    pos_std = math.sqrt(max(0.0, float(np.linalg.eigvalsh(cov)[-1])))
    mean[motion.ZETA] = normalize_ypr(mean[motion.ZETA])
    return FilterEstimate(VehicleState.from_array(mean), cov, pos_std)


def argmax_particle(ps: ParticleSet) -> int:
    """Index of the highest-weight particle; ties go to the lowest index."""
    return int(np.argmax(ps.log_weights))


def correct_particle(ps: ParticleSet, index: int, pose: Pose, v: float,
                     zeta_dot: np.ndarray) -> ParticleSet:
    if not 0 <= index < ps.n:
        raise IndexError("particle index out of range")
    states = ps.states.copy()
    states[index, motion.P] = pose.p
    states[index, motion.ZETA] = normalize_ypr(pose.zeta)
    states[index, motion.V] = v
    states[index, motion.ZETA_DOT] = np.asarray(zeta_dot, dtype=float)
    return replace(ps, states=states)
