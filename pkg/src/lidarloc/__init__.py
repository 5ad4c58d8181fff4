"""LIDAR-only global localization: bootstrap particle filter over a
precomputed sparse distance field, improved by an exact multi-resolution
BEV scan-to-map matcher with delayed-pose correction."""

from .cloud import BevCloud, PointCloud
from .config import PipelineConfig
from .distgrid import DistanceGrid, GridSpec, build_grid, scan_log_likelihood
from .geometry import Pose, Transform, compose, pose_to_transform, \
    rotation_from_ypr, transform_points, transform_to_pose
from .matcher import MatchPyramid, MatchResult, SearchWindow, \
    branch_and_bound_match, build_pyramid
from .motion import ProcessNoise, VehicleState, propagate, propagate_noisy
from .pipeline import LocalizationPipeline, run_sequence

__all__ = [
    "BevCloud", "PointCloud", "PipelineConfig", "DistanceGrid", "GridSpec",
    "build_grid", "scan_log_likelihood", "Pose", "Transform", "compose",
    "pose_to_transform", "rotation_from_ypr", "transform_points",
    "transform_to_pose", "MatchPyramid", "MatchResult", "SearchWindow",
    "branch_and_bound_match", "build_pyramid", "ProcessNoise",
    "VehicleState", "propagate", "propagate_noisy",
    "LocalizationPipeline", "run_sequence",
]
