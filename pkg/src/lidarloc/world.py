"""Synthetic urban worlds: axis-aligned buildings on a ground plane, a
timed vehicle trajectory and a ray-cast rotating LIDAR model.

Desk-scale stand-in for real map/scan sequences; everything is
deterministic given the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .cloud import PointCloud
from .geometry import Pose, pose_to_transform, rotation_from_ypr, wrap_angle


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 80.0
    azimuth_steps: int = 180
    elevations_deg: Tuple[float, ...] = (-10.0, -6.0, -3.0, -1.0, 0.0, 2.0)


@dataclass
class SyntheticWorld:
    extent: Tuple[float, float, float, float]   # xmin, ymin, xmax, ymax
    buildings: List[Tuple[float, float, float, float, float]]  # + height
    ground_density: float = 0.5     # pts/m^2
    wall_density: float = 3.0       # pts/m^2
    trajectory: List[Pose] = field(default_factory=list)
    sensor: SensorModel = field(default_factory=SensorModel)

    def validate(self) -> None:
        x0, y0, x1, y1 = self.extent
        if self.ground_density <= 0 or self.wall_density <= 0:
            raise ValueError("densities must be positive")
        for pose in self.trajectory:
            if not (x0 <= pose.p[0] <= x1 and y0 <= pose.p[1] <= y1):
                raise ValueError("trajectory leaves the world extent")


def _faces(world: SyntheticWorld):
    """Vertical wall faces as (axis, plane, lo0, hi0, height)."""
    out = []
    for bx0, by0, bx1, by1, h in world.buildings:
        out.append((0, bx0, by0, by1, h))
        out.append((0, bx1, by0, by1, h))
        out.append((1, by0, bx0, bx1, h))
        out.append((1, by1, bx0, bx1, h))
    return out


def reference_cloud(world: SyntheticWorld, seed: int = 0) -> PointCloud:
    """Surface point sampling of ground and walls at the set densities."""
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = world.extent
    pts = []
    n_ground = int(world.ground_density * (x1 - x0) * (y1 - y0))
    g = np.zeros((n_ground, 3))
    g[:, 0] = rng.uniform(x0, x1, n_ground)
    g[:, 1] = rng.uniform(y0, y1, n_ground)
    pts.append(g)
    for axis, plane, lo, hi, h in _faces(world):
        n = max(1, int(world.wall_density * (hi - lo) * h))
        w = np.empty((n, 3))
        w[:, axis] = plane
        w[:, 1 - axis] = rng.uniform(lo, hi, n)
        w[:, 2] = rng.uniform(0.0, h, n)
        pts.append(w)
    return PointCloud(np.vstack(pts))


def raycast_scan(world: SyntheticWorld, pose: Pose) -> PointCloud:
    """Scan as seen from `pose`, returned in the sensor (body) frame."""
    sensor = world.sensor
    az = np.arange(sensor.azimuth_steps) * (2 * math.pi / sensor.azimuth_steps)
    el = np.radians(np.asarray(sensor.elevations_deg))
    aa, ee = np.meshgrid(az, el)
    d_body = np.stack([np.cos(ee) * np.cos(aa),
                       np.cos(ee) * np.sin(aa),
                       np.sin(ee)], axis=-1).reshape(-1, 3)
    R = rotation_from_ypr(pose.zeta)
    d = d_body @ R.T
    o = pose.p
    t_best = np.full(len(d), np.inf)
    x0, y0, x1, y1 = world.extent
    # Ground plane z = 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -o[2] / d[:, 2]
        hx = o[0] + tg * d[:, 0]
        hy = o[1] + tg * d[:, 1]
    ok = (d[:, 2] < 0) & (tg > 1e-6) & (tg <= sensor.max_range) & \
         (hx >= x0) & (hx <= x1) & (hy >= y0) & (hy <= y1)
    t_best[ok] = tg[ok]
    # Building wall faces.
    for axis, plane, lo, hi, h in _faces(world):
        da = d[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane - o[axis]) / da
            hu = o[1 - axis] + t * d[:, 1 - axis]
            hz = o[2] + t * d[:, 2]
        ok = (np.abs(da) > 1e-12) & (t > 1e-6) & (t <= sensor.max_range) & \
             (hu >= lo) & (hu <= hi) & (hz >= 0.0) & (hz <= h)
        np.minimum(t_best, np.where(ok, t, np.inf), out=t_best)
    hit = np.isfinite(t_best)
    pts_world = o + t_best[hit, None] * d[hit]
    return PointCloud((pts_world - o) @ R)


def generate_world(world: SyntheticWorld, seed: int = 0):
    """Returns (map cloud, per-step scans in body frame, truth poses)."""
    world.validate()
    ref = reference_cloud(world, seed)
    scans = [raycast_scan(world, pose) for pose in world.trajectory]
    return ref, scans, list(world.trajectory)


def straight_turn_trajectory(start, heading: float, leg1: float, leg2: float,
                             turn: float, speed: float, dt: float,
                             z: float = 2.0, turn_steps: int = 8) -> List[Pose]:
    """Constant-speed polyline: leg1 meters, a `turn` rad heading change
    spread over `turn_steps` steps, then leg2 meters."""
    poses = []
    step = speed * dt
    p = np.array([start[0], start[1], z], dtype=float)
    yaw = heading
    traveled = 0.0
    total = leg1 + leg2
    turning_left = 0
    while traveled <= total + 1e-9:
        poses.append(Pose(p.copy(), np.array([wrap_angle(yaw), 0.0, 0.0])))
        if traveled < leg1 <= traveled + step:
            turning_left = turn_steps
        if turning_left > 0:
            yaw += turn / turn_steps
            turning_left -= 1
        p = p + step * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        traveled += step
    return poses


def default_world(seed: int = 0, n_steps: int = 40,
                  size: float = 200.0, speed: float = 8.0,
                  dt: float = 0.1) -> SyntheticWorld:
    """Seeded city-block world with randomized buildings and a route that
    drives one street and turns onto another."""
    rng = np.random.default_rng(seed)
    # Irregular street spacing, different per axis: a regular grid is
    # self-similar in plan view and produces translation and 90/180
    # degree rotation aliases that defeat global matching.
    streets_x = [0.18 * size, 0.42 * size, 0.78 * size]
    streets_y = [0.28 * size, 0.56 * size, 0.82 * size]
    half_w = 7.0
    edges_x = [0.0] + streets_x + [size]
    edges_y = [0.0] + streets_y + [size]
    buildings = []
    for i in range(len(edges_x) - 1):
        for j in range(len(edges_y) - 1):
            bx0 = edges_x[i] + (half_w if i > 0 else 2.0)
            bx1 = edges_x[i + 1] - (half_w if i + 1 < len(edges_x) - 1
                                    else 2.0)
            by0 = edges_y[j] + (half_w if j > 0 else 2.0)
            by1 = edges_y[j + 1] - (half_w if j + 1 < len(edges_y) - 1
                                    else 2.0)
            if rng.uniform() < 0.15:
                continue  # empty lot
            ix0 = bx0 + rng.uniform(0.0, 6.0)
            ix1 = bx1 - rng.uniform(0.0, 6.0)
            iy0 = by0 + rng.uniform(0.0, 6.0)
            iy1 = by1 - rng.uniform(0.0, 6.0)
            if ix1 - ix0 < 8.0 or iy1 - iy0 < 8.0:
                continue
            h = rng.uniform(5.0, 10.0)
            buildings.append((ix0, iy0, ix1, iy1, h))
    # Street-side clutter (parked cars, bins): breaks the sliding
    # ambiguity of long corridor walls for scan-to-scan alignment and
    # disambiguates repeated block structure for matching.
    for sx, sy in zip(streets_x, streets_y):
        for along in np.arange(6.0, size - 6.0, 9.0):
            if rng.uniform() < 0.15:
                continue
            side = rng.choice([-1.0, 1.0])
            length = rng.uniform(2.0, 5.0)
            width = rng.uniform(1.0, 1.8)
            h = rng.uniform(1.2, 2.5)
            a0 = along + rng.uniform(-2.0, 2.0)
            # one box beside the vertical street (x = sx), one beside
            # the horizontal street (y = sy)
            offx = sx + side * rng.uniform(4.0, 5.5)
            offy = sy + side * rng.uniform(4.0, 5.5)
            buildings.append((offx - width / 2, a0, offx + width / 2,
                              a0 + length, h))
            buildings.append((a0, offy - width / 2, a0 + length,
                              offy + width / 2, h))
    total = n_steps * speed * dt
    leg1 = min(total * 0.5, 0.2 * size)
    # Drive east along the middle horizontal street, then turn left onto
    # the middle vertical street at their intersection.
    traj = straight_turn_trajectory(
        (streets_x[1] - leg1, streets_y[1]), 0.0, leg1, total - leg1,
        math.pi / 2, speed, dt)[:n_steps]
    return SyntheticWorld(extent=(0.0, 0.0, size, size), buildings=buildings,
                          trajectory=traj)
