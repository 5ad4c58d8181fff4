"""Pipeline configuration: defaults, file parsing and emission.

The config file is flat TOML: one key per field, angles in degrees at
this boundary only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .motion import default_process_noise


@dataclass
class PipelineConfig:
    n_particles: int = 1000
    d_max: float = 5.0               # likelihood truncation distance (m)
    sigma: float = 0.5               # likelihood std (m)
    voxel_res: float = 0.5           # scan downsampling resolution (m)
    grid_delta: float = 0.2          # distance-grid cell size (m)
    q_diag: list = field(
        default_factory=lambda: list(default_process_noise().q_diag))
    window_x: float = 50.0           # S2M translation half-window L_x (m)
    window_y: float = 50.0           # L_y (m)
    window_localized: float = 15.0   # half-window once localized (m)
    theta_localized_deg: float = 30.0  # angular half-window once localized
    d_theta_deg: float = 2.5         # match angular resolution (deg)
    d_m: float = 1.0                 # match resolution d_m (m)
    nz_threshold: float = 0.75       # road-removal normal-z cutoff
    v_max: float = 15.0              # init speed upper bound (m/s)
    dt: float = 0.1                  # scan period (s)
    sim_s2m_latency: int = 2         # S2M completion delay (steps)
    loc_std: float = 10.0            # localization std threshold (m)
    loc_steps: int = 10              # consecutive steps below threshold
    loc_dist: float = 10.0           # required travel (m)
    loc_turn_deg: float = 30.0       # or required turn (deg)
    reset_std: float = 50.0          # loss-of-track std threshold (m)
    forward_only: bool = True
    normal_k: int = 16

    @property
    def d_theta(self) -> float:
        return math.radians(self.d_theta_deg)

    @property
    def loc_turn(self) -> float:
        return math.radians(self.loc_turn_deg)

    @property
    def theta_localized(self) -> float:
        return math.radians(self.theta_localized_deg)

    def q_array(self) -> np.ndarray:
        return np.asarray(self.q_diag, dtype=float)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise TypeError(f"unsupported config value: {v!r}")


def emit_config(cfg: PipelineConfig) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


def _parse_scalar(tok: str):
    tok = tok.strip()
    if tok == "true":
        return True
    if tok == "false":
        return False
    try:
        return int(tok)
    except ValueError:
        return float(tok)


def _parse_value(tok: str):
    tok = tok.strip()
    if tok.startswith("[") and tok.endswith("]"):
        inner = tok[1:-1].strip()
        return [] if not inner else [_parse_scalar(p)
                                     for p in inner.split(",")]
    return _parse_scalar(tok)


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if not hasattr(cfg, key):
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _parse_value(raw))
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from exc
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path, "rb") as f:
        return parse_config(f.read().decode("utf-8"))


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        f.write(emit_config(cfg))
