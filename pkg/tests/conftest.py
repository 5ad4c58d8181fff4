"""Shared fixtures: one small synthetic world plus its precomputed
localization artifacts, built once per session."""
import numpy as np
import pytest

from lidarloc.config import PipelineConfig
from lidarloc.distgrid import GridSpec, build_grid
from lidarloc.matcher import build_pyramid
from lidarloc.cli import _bev_map
from lidarloc.world import default_world, generate_world


@pytest.fixture(scope="session")
def small_world():
    """100 m world, 20-step drive: (world, map cloud, scans, truth)."""
    world = default_world(seed=3, n_steps=20, size=100.0)
    map_cloud, scans, truth = generate_world(world, seed=3)
    return world, map_cloud, scans, truth


@pytest.fixture(scope="session")
def small_cfg():
    return PipelineConfig(grid_delta=0.5, window_x=100.0, window_y=100.0,
                          sim_s2m_latency=2)


@pytest.fixture(scope="session")
def small_grid(small_world, small_cfg):
    _, map_cloud, _, _ = small_world
    spec = GridSpec(np.array([-10.0, -10.0, -2.0]),
                    np.array([110.0, 110.0, 12.0]),
                    small_cfg.grid_delta, small_cfg.d_max, small_cfg.sigma)
    return build_grid(map_cloud, spec)


@pytest.fixture(scope="session")
def small_pyramid(small_world, small_cfg):
    _, map_cloud, _, _ = small_world
    return build_pyramid(_bev_map(map_cloud, small_cfg), small_cfg.d_m)
