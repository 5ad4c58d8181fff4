"""Multi-resolution 2D scan-to-map matcher.

An occupancy-count grid L0 over the BEV map is max-pooled (2x2, stride 2,
origins aligned: children of coarse cell q are fine cells 2q+{0,1}^2) into
a pyramid. Branch and bound over (theta, t_x, t_y) then returns the exact
maximizer of the level-0 score over the discrete search lattice.
"""
from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cloud import BevCloud

_MAGIC = b"PYR1"


@dataclass(frozen=True)
class MatchPyramid:
    origin: np.ndarray          # (2,) lower corner of L0 (m)
    base_res: np.ndarray        # (2,) L0 cell size d_m (m)
    levels: List[np.ndarray]    # uint32 count grids, L0 first

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "base_res",
                           np.asarray(self.base_res, dtype=float))


@dataclass(frozen=True)
class SearchWindow:
    t_lb: np.ndarray       # (2,) translation lower bound (m)
    t_ub: np.ndarray       # (2,) translation upper bound (m)
    theta_min: float       # rad
    theta_max: float       # rad
    d_theta: float         # angular resolution (rad)

    def __post_init__(self):
        object.__setattr__(self, "t_lb", np.asarray(self.t_lb, dtype=float))
        object.__setattr__(self, "t_ub", np.asarray(self.t_ub, dtype=float))
        if np.any(self.t_ub < self.t_lb) or self.d_theta <= 0:
            raise ValueError("invalid search window")


@dataclass(frozen=True)
class MatchResult:
    theta: float
    t: np.ndarray          # (2,) translation (m)
    score: int
    accepted: bool = True
    expansions: int = 0    # heap pops of non-leaf nodes

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))


def build_pyramid(map_bev: BevCloud, d_m) -> MatchPyramid:
    """Count grid at resolution d_m plus stride-2 max-pooled levels until a
    single cell covers the map."""
    d_m = np.broadcast_to(np.asarray(d_m, dtype=float), (2,)).copy()
    if len(map_bev) == 0:
        raise ValueError("map must be nonempty")
    if np.any(d_m <= 0):
        raise ValueError("d_m must be positive")
    pts = map_bev.points
    origin = np.floor(pts.min(axis=0) / d_m) * d_m
    idx = np.floor((pts - origin) / d_m).astype(np.int64)
    dims = idx.max(axis=0) + 1
    l0 = np.zeros(tuple(dims), dtype=np.uint32)
    np.add.at(l0, (idx[:, 0], idx[:, 1]), 1)
    levels = [l0]
    while levels[-1].shape[0] > 1 or levels[-1].shape[1] > 1:
        levels.append(_max_pool2(levels[-1]))
    return MatchPyramid(origin, d_m, levels)


def _max_pool2(g: np.ndarray) -> np.ndarray:
    nx, ny = g.shape
    px, py = (nx + 1) // 2 * 2, (ny + 1) // 2 * 2
    padded = np.zeros((px, py), dtype=g.dtype)
    padded[:nx, :ny] = g
    return padded.reshape(px // 2, 2, py // 2, 2).max(axis=(1, 3))


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def score_at(pyr: MatchPyramid, level: int, scan: BevCloud, theta: float,
             t) -> int:
    """Sum of level-`level` cell counts hit by the transformed scan."""
    grid = pyr.levels[level]
    d_l = pyr.base_res * (1 << level)
    pts = scan.points @ _rot2(theta).T + np.asarray(t, dtype=float)
    idx = np.floor((pts - pyr.origin) / d_l).astype(np.int64)
    ok = (idx[:, 0] >= 0) & (idx[:, 0] < grid.shape[0]) & \
         (idx[:, 1] >= 0) & (idx[:, 1] < grid.shape[1])
    return int(grid[idx[ok, 0], idx[ok, 1]].sum())


def _node_bounds(pyr: MatchPyramid, c0_all: np.ndarray, rs: np.ndarray,
                 nodes: np.ndarray, w: int) -> np.ndarray:
    """Admissible upper bounds on the level-0 score for several width-`w`
    translation sub-windows [ix, ix+w) x [iy, iy+w) (level-0 cells).

    Translations on the lattice shift every point's level-0 cell by the
    exact integer offset, so the reachable cells of point j span
    [c0_j + node, c0_j + node + w - 1]; the bound sums, per point, the
    max of the pyramid cells covering that span. At level log2(w) the
    span meets at most 2x2 coarse cells. Exact (w == 1) scores fall out
    of the same formula. `c0_all` is (n_theta, N, 2) corner cells, `rs`
    the (k,) angle index and `nodes` the (k, 2) corner of each
    sub-window; returns (k,) int64 bounds.
    """
    w = int(w)
    lp = w.bit_length() - 1
    if (1 << lp) != w or lp >= len(pyr.levels):
        return _node_bounds_generic(pyr, c0_all, rs, nodes, w)
    grid = pyr.levels[lp]
    base = c0_all[rs] + nodes[:, None, :]              # (k, N, 2)
    qlo = base >> lp
    qhi = (base + (w - 1)) >> lp
    best = np.zeros(base.shape[:2], dtype=np.int64)
    vals = np.zeros(base.shape[:2], dtype=np.int64)
    for dx in (0, 1):
        qx = qlo[..., 0] + dx
        okx = (qx <= qhi[..., 0]) & (qx >= 0) & (qx < grid.shape[0])
        for dy in (0, 1):
            qy = qlo[..., 1] + dy
            ok = okx & (qy <= qhi[..., 1]) & (qy >= 0) & \
                (qy < grid.shape[1])
            vals[:] = 0
            vals[ok] = grid[qx[ok], qy[ok]]
            np.maximum(best, vals, out=best)
    return best.sum(axis=1)


def _node_bounds_generic(pyr: MatchPyramid, c0_all: np.ndarray,
                         rs: np.ndarray, nodes: np.ndarray,
                         w: int) -> np.ndarray:
    """Same bound for widths above the top pyramid scale (the span then
    covers more than 2 coarse cells per axis)."""
    lp = min(max(w.bit_length() - 1, 0), len(pyr.levels) - 1)
    grid = pyr.levels[lp]
    scale = 1 << lp
    lo = c0_all[rs] + nodes[:, None, :]
    hi = lo + (w - 1)                     # inclusive
    qlo = np.floor_divide(lo, scale)
    qhi = np.floor_divide(hi, scale)
    nq = int((qhi - qlo).max()) + 1
    best = np.zeros(lo.shape[:2], dtype=np.int64)
    vals = np.zeros(lo.shape[:2], dtype=np.int64)
    for dx in range(nq):
        qx = qlo[..., 0] + dx
        okx = (qx <= qhi[..., 0]) & (qx >= 0) & (qx < grid.shape[0])
        for dy in range(nq):
            qy = qlo[..., 1] + dy
            ok = okx & (qy <= qhi[..., 1]) & (qy >= 0) & \
                (qy < grid.shape[1])
            if not np.any(ok):
                continue
            vals[:] = 0
            vals[ok] = grid[qx[ok], qy[ok]]
            np.maximum(best, vals, out=best)
    return best.sum(axis=1)


def lattice_shape(win: SearchWindow, base_res: np.ndarray):
    nx = int(math.floor((win.t_ub[0] - win.t_lb[0]) / base_res[0] + 1e-9)) + 1
    ny = int(math.floor((win.t_ub[1] - win.t_lb[1]) / base_res[1] + 1e-9)) + 1
    nr = int(math.floor((win.theta_max - win.theta_min) / win.d_theta
                        + 1e-9)) + 1
    return nr, nx, ny


def branch_and_bound_match(pyr: MatchPyramid, scan: BevCloud,
                           win: SearchWindow,
                           min_score: int = -1) -> Optional[MatchResult]:
    """Exact maximizer of the level-0 score over the discrete lattice
    theta = theta_min + r*d_theta, t = t_lb + (i,j)*d_m within the window.

    Ties break to the lower theta index, then lexicographically smaller
    translation, matching a sequential exhaustive sweep. Nodes whose
    bound does not exceed `min_score` are pruned; if no lattice pose
    scores above it the search returns None (callers that only accept
    matches beating a reference score lose nothing to the pruning).
    """
    if len(scan) == 0:
        raise ValueError("scan must be nonempty")
    nr, nx, ny = lattice_shape(win, pyr.base_res)
    if nr <= 0 or nx <= 0 or ny <= 0:
        raise ValueError("empty search lattice")
    root_w = 1 << max(nx - 1, ny - 1, 1).bit_length()
    # Level-0 cell of each point at the window corner, per angle; lattice
    # translations then shift cells by exact integer offsets.
    c0_all = np.empty((nr, len(scan), 2), dtype=np.int64)
    for r in range(nr):
        theta = win.theta_min + r * win.d_theta
        pts = scan.points @ _rot2(theta).T + win.t_lb
        c0_all[r] = np.floor((pts - pyr.origin) / pyr.base_res)
    # Heap entries: (-bound, theta_idx, ix, iy, width). Nodes are popped
    # in batches and their children's bounds computed in bulk; the heap
    # state after a batch matches sequential expansion, and the stop
    # condition (a leaf on top, its bound being the exact score) is the
    # same, so results are identical to one-at-a-time best-first search.
    heap = []
    rs = np.arange(nr)
    roots = np.zeros((nr, 2), dtype=np.int64)
    bounds = _node_bounds(pyr, c0_all, rs, roots, root_w)
    for r in range(nr):
        if bounds[r] > min_score:
            heapq.heappush(heap, (-int(bounds[r]), r, 0, 0, root_w))
    expansions = 0
    batch_max = 128
    while heap:
        if heap[0][4] == 1:
            neg_bound, r, ix, iy, _ = heapq.heappop(heap)
            theta = win.theta_min + r * win.d_theta
            t = win.t_lb + np.array([ix, iy]) * pyr.base_res
            return MatchResult(theta, t, -neg_bound, True, expansions)
        batch = []
        while heap and len(batch) < batch_max and heap[0][4] != 1:
            batch.append(heapq.heappop(heap))
        expansions += len(batch)
        arr = np.array([(r, ix, iy, w) for _, r, ix, iy, w in batch],
                       dtype=np.int64)
        for w in np.unique(arr[:, 3]):
            sub = arr[arr[:, 3] == w]
            h = int(w) // 2
            offs = np.array([[0, 0], [0, h], [h, 0], [h, h]])
            kid_xy = (sub[:, None, 1:3] + offs[None]).reshape(-1, 2)
            kid_r = np.repeat(sub[:, 0], 4)
            ok = (kid_xy[:, 0] < nx) & (kid_xy[:, 1] < ny)
            kid_xy = kid_xy[ok]
            kid_r = kid_r[ok]
            kb = _node_bounds(pyr, c0_all, kid_r, kid_xy, h)
            for i in range(len(kb)):
                if kb[i] > min_score:
                    heapq.heappush(heap, (-int(kb[i]), int(kid_r[i]),
                                          int(kid_xy[i, 0]),
                                          int(kid_xy[i, 1]), h))
    return None


def save_pyramid(pyr: MatchPyramid, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<4d", *pyr.origin, *pyr.base_res))
        f.write(struct.pack("<I", len(pyr.levels)))
        for lvl in pyr.levels:
            f.write(struct.pack("<II", *lvl.shape))
            f.write(np.ascontiguousarray(lvl, dtype="<u4").tobytes())


def load_pyramid(path) -> MatchPyramid:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a pyramid file")
        vals = struct.unpack("<4d", f.read(32))
        (n_levels,) = struct.unpack("<I", f.read(4))
        levels = []
        for _ in range(n_levels):
            nx, ny = struct.unpack("<II", f.read(8))
            buf = f.read(nx * ny * 4)
            if len(buf) != nx * ny * 4:
                raise ValueError("truncated pyramid file")
            levels.append(np.frombuffer(buf, dtype="<u4").reshape(nx, ny).copy())
    return MatchPyramid(np.array(vals[:2]), np.array(vals[2:]), levels)
