"""Constant-acceleration, constant-turn-rate vehicle model.

State layout (11 components):
  [x, y, z, yaw, pitch, roll, v, yaw_rate, pitch_rate, roll_rate, a]
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import normalize_ypr, rotation_from_ypr, wrap_angle

STATE_DIM = 11
P = slice(0, 3)
ZETA = slice(3, 6)
V = 6
ZETA_DOT = slice(7, 10)
A = 10


@dataclass(frozen=True)
class VehicleState:
    p: np.ndarray         # position (m)
    zeta: np.ndarray      # yaw-pitch-roll (rad)
    v: float              # speed along body x (m/s)
    zeta_dot: np.ndarray  # angular rates (rad/s)
    a: float              # acceleration magnitude (m/s^2)

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))
        object.__setattr__(self, "zeta_dot",
                           np.asarray(self.zeta_dot, dtype=float))

    def to_array(self) -> np.ndarray:
        out = np.empty(STATE_DIM)
        out[P] = self.p
        out[ZETA] = self.zeta
        out[V] = self.v
        out[ZETA_DOT] = self.zeta_dot
        out[A] = self.a
        return out

    @staticmethod
    def from_array(x: np.ndarray) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return VehicleState(x[P].copy(), x[ZETA].copy(), float(x[V]),
                            x[ZETA_DOT].copy(), float(x[A]))


@dataclass(frozen=True)
class ProcessNoise:
    q_diag: np.ndarray  # (11,) per-component variances

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=float)
        if q.shape != (STATE_DIM,) or np.any(q < 0):
            raise ValueError("q_diag must be 11 non-negative variances")
        object.__setattr__(self, "q_diag", q)


def default_process_noise() -> ProcessNoise:
    deg = math.radians
    return ProcessNoise(np.array([
        0.5 ** 2, 0.5 ** 2, 0.1 ** 2,
        deg(5.0) ** 2, deg(2.0) ** 2, deg(0.1) ** 2,
        0.1 ** 2,
        deg(0.05) ** 2, deg(0.05) ** 2, deg(0.02) ** 2,
        0.001 ** 2,
    ]))


def propagate_array(states: np.ndarray, dt: float) -> np.ndarray:
    """Vectorized deterministic step for an (N, 11) state block."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(states, dtype=float)
    yaw, pitch = x[:, 3], x[:, 4]
    # Forward unit vector: first column of R_z(yaw) R_y(pitch) R_x(roll).
    vhat = np.stack([np.cos(yaw) * np.cos(pitch),
                     np.sin(yaw) * np.cos(pitch),
                     -np.sin(pitch)], axis=1)
    step = (x[:, V] * dt + 0.5 * x[:, A] * dt * dt)[:, None]
    x[:, P] = x[:, P] + step * vhat
    x[:, V] = x[:, V] + x[:, A] * dt
    x[:, ZETA] = x[:, ZETA] + x[:, ZETA_DOT] * dt
    x[:, 3] = wrap_angle(x[:, 3])
    x[:, 5] = wrap_angle(x[:, 5])
    # Pitch rarely leaves [-pi/2, pi/2]; normalize the stragglers fully.
    bad = np.abs(wrap_angle(x[:, 4])) > math.pi / 2
    x[:, 4] = wrap_angle(x[:, 4])
    for i in np.flatnonzero(bad):
        x[i, ZETA] = normalize_ypr(x[i, ZETA])
    return x


def propagate(s: VehicleState, dt: float) -> VehicleState:
    return VehicleState.from_array(
        propagate_array(s.to_array()[None, :], dt)[0])


def propagate_noisy_array(states: np.ndarray, dt: float, noise: ProcessNoise,
                          rng: np.random.Generator,
                          forward_only: bool = True) -> np.ndarray:
    """Deterministic step plus additive zero-mean Gaussian perturbation."""
    x = propagate_array(states, dt)
    std = np.sqrt(noise.q_diag)
    if np.any(std > 0):
        x = x + rng.standard_normal(x.shape) * std
        x[:, 3] = wrap_angle(x[:, 3])
        x[:, 5] = wrap_angle(x[:, 5])
    if forward_only:
        x[:, V] = np.maximum(x[:, V], 0.0)
    return x


def propagate_noisy(s: VehicleState, dt: float, noise: ProcessNoise,
                    rng: np.random.Generator,
                    forward_only: bool = True) -> VehicleState:
    return VehicleState.from_array(
        propagate_noisy_array(s.to_array()[None, :], dt, noise, rng,
                              forward_only)[0])
