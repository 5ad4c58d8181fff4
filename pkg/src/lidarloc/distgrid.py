"""Sparse truncated nearest-distance field over the 3D map.

Grid node (i_x, i_y, i_z) sits at lb + i * delta. A node is stored only
when its exact nearest-map distance is below d_max; lookups fall back to
d_max for missing cells and out-of-box queries.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .geometry import Pose, pose_to_transform

_MAGIC = b"NNG1"
_AXIS_BITS = 21
_AXIS_MAX = 1 << _AXIS_BITS


@dataclass(frozen=True)
class GridSpec:
    lb: np.ndarray       # (3,) lower corner of bounding box (m)
    ub: np.ndarray       # (3,) upper corner (m)
    delta: np.ndarray    # (3,) cell size (m)
    d_max: float         # truncation distance (m)
    sigma: float         # likelihood std (m)

    def __post_init__(self):
        object.__setattr__(self, "lb", np.asarray(self.lb, dtype=float))
        object.__setattr__(self, "ub", np.asarray(self.ub, dtype=float))
        object.__setattr__(self, "delta",
                           np.broadcast_to(np.asarray(self.delta, dtype=float),
                                           (3,)).copy())
        if not np.all(self.ub > self.lb):
            raise ValueError("ub must exceed lb componentwise")
        if np.any(self.delta <= 0) or self.d_max <= 0 or self.sigma <= 0:
            raise ValueError("delta, d_max and sigma must be positive")

    @property
    def dims(self) -> np.ndarray:
        """Node count per axis: floor(D_a / delta_a)."""
        return np.floor((self.ub - self.lb) / self.delta).astype(np.int64)


def pack_index(idx: np.ndarray) -> np.ndarray:
    """Pack (..., 3) integer cell indices into uint64 keys, 21 bits/axis."""
    idx = np.asarray(idx, dtype=np.uint64)
    return (idx[..., 0] << np.uint64(2 * _AXIS_BITS)) | \
           (idx[..., 1] << np.uint64(_AXIS_BITS)) | idx[..., 2]


def unpack_index(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    mask = np.uint64(_AXIS_MAX - 1)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = (keys >> np.uint64(2 * _AXIS_BITS)) & mask
    out[..., 1] = (keys >> np.uint64(_AXIS_BITS)) & mask
    out[..., 2] = keys & mask
    return out


class DistanceGrid:
    """Immutable sparse map from packed cell index to nearest-map distance.

    Keys are kept sorted so batched lookups reduce to searchsorted.
    """

    # Grids up to this many total cells also keep a dense lookup table
    # (direct indexing beats binary search on the sorted keys).
    DENSE_CACHE_CELLS = 1 << 24

    def __init__(self, spec: GridSpec, keys: np.ndarray, dists: np.ndarray):
        order = np.argsort(keys)
        self.spec = spec
        self.keys = np.asarray(keys, dtype=np.uint64)[order]
        self.dists = np.asarray(dists, dtype=np.float64)[order]
        self._dense = None
        if int(np.prod(spec.dims)) <= self.DENSE_CACHE_CELLS:
            dense = np.full(int(np.prod(spec.dims)), spec.d_max,
                            dtype=np.float32)
            idx = unpack_index(self.keys)
            flat = np.ravel_multi_index(
                (idx[:, 0], idx[:, 1], idx[:, 2]), tuple(spec.dims))
            dense[flat] = self.dists
            self._dense = dense

    def __len__(self) -> int:
        return len(self.keys)

    def lookup_many(self, pts: np.ndarray) -> np.ndarray:
        """Truncated distance for each query point; d_max when absent."""
        spec = self.spec
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        out = np.full(len(pts), spec.d_max)
        idx = np.floor((pts - spec.lb) / spec.delta).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < spec.dims), axis=1)
        if not np.any(inside):
            return out
        if self._dense is not None:
            ii = idx[inside]
            dims = spec.dims
            flat = (ii[:, 0] * dims[1] + ii[:, 1]) * dims[2] + ii[:, 2]
            out[inside] = self._dense[flat]
            return out
        q = pack_index(idx[inside])
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        if len(self.keys):
            hit = self.keys[pos] == q
            vals = np.where(hit, self.dists[pos], spec.d_max)
            out[inside] = vals
        return out

    def lookup(self, point) -> float:
        return float(self.lookup_many(np.asarray(point, dtype=float))[0])


def build_grid(map_cloud: PointCloud, spec: GridSpec,
               workers: int = -1) -> DistanceGrid:
    """Exact nearest-map distance at every grid node with d < d_max."""
    if len(map_cloud) == 0:
        raise ValueError("map must be nonempty")
    dims = spec.dims
    if np.any(dims >= _AXIS_MAX):
        raise ValueError("grid exceeds 2^21 cells along an axis")
    tree = cKDTree(map_cloud.points)
    axes = [spec.lb[a] + np.arange(dims[a]) * spec.delta[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    d, _ = tree.query(nodes, k=1, distance_upper_bound=spec.d_max,
                      workers=workers)
    keep = d < spec.d_max
    idx = np.stack(np.unravel_index(np.flatnonzero(keep), tuple(dims)), axis=1)
    return DistanceGrid(spec, pack_index(idx), d[keep])


def scan_log_likelihood(grid: DistanceGrid, scan: PointCloud,
                        pose: Pose) -> float:
    """Log-likelihood -sum_j min(d_j^2, d_max^2) / sigma^2 of a scan at a pose."""
    if len(scan) == 0:
        raise ValueError("scan must be nonempty")
    pts = pose_to_transform(pose).apply(scan.points)
    d = grid.lookup_many(pts)
    spec = grid.spec
    return float(-np.sum(np.minimum(d * d, spec.d_max ** 2)) / spec.sigma ** 2)


def save_grid(grid: DistanceGrid, path) -> None:
    spec = grid.spec
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<11d", *spec.lb, *spec.ub, *spec.delta,
                            spec.d_max, spec.sigma))
        f.write(struct.pack("<Q", len(grid.keys)))
        rec = np.empty(len(grid.keys),
                       dtype=np.dtype([("k", "<u8"), ("d", "<f4")]))
        rec["k"] = grid.keys
        rec["d"] = grid.dists
        f.write(rec.tobytes())


def load_grid(path) -> DistanceGrid:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a distance-grid file")
        vals = struct.unpack("<11d", f.read(88))
        spec = GridSpec(np.array(vals[0:3]), np.array(vals[3:6]),
                        np.array(vals[6:9]), vals[9], vals[10])
        (n,) = struct.unpack("<Q", f.read(8))
        rec = np.frombuffer(f.read(n * 12),
                            dtype=np.dtype([("k", "<u8"), ("d", "<f4")]))
        if len(rec) != n:
            raise ValueError("truncated distance-grid file")
    return DistanceGrid(spec, rec["k"].copy(), rec["d"].astype(np.float64))
