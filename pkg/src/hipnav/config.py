"""Layered configuration.

Every tunable lives in one of the dataclasses below. Values are resolved as
defaults < config file (JSON) < command-line overrides, and unknown keys are
rejected at every level. ``Config.to_dict()`` is what gets echoed into
artifact headers.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


@dataclass
class WorldConfig:
    extent: tuple[float, float] = (40.0, 40.0)
    grass_slowdown: float = 0.7
    robot_radius: float = 0.3
    # obstacles per 100 m^2
    tree_density: float = 3.0
    rock_density: float = 2.5
    bush_density: float = 2.5
    grass_density: float = 3.0
    wall_density: float = 1.0
    novel_density: float = 1.0
    # minimum free gap between the boundaries of two rigid obstacles
    clearance: float = 1.0
    connectivity_cell: float = 0.5
    max_retries: int = 200


@dataclass
class SensorConfig:
    lidar_plane_height: float = 0.3
    n_rays: int = 360
    max_range: float = 10.0
    patch_extent: float = 10.0
    patch_cells: int = 100
    patch_noise: float = 0.02
    max_height: float = 2.0


@dataclass
class SimConfig:
    f_sim: float = 30.0  # Hz
    stuck_time: float = 4.0
    stuck_eps: float = 0.05
    trapped_time: float = 10.0
    trapped_dist: float = 3.0


@dataclass
class DataConfig:
    f_traj: float = 5.0  # Hz
    horizon: int = 10
    past: int = 10
    sticky_min: float = 1.0
    sticky_max: float = 3.0
    collision_margin: float = 2.0
    n_worlds: int = 8
    steps_per_world: int = 36000
    library_size: int = 200
    kmeans_iters: int = 100


@dataclass
class CostmapConfig:
    resolution: float = 0.1
    cells: int = 100
    inflation_radius: float = 1.0
    decay: float = 3.0
    inscribed_radius: float = 0.3
    mode: str = "cellwise"


@dataclass
class ModelConfig:
    horizon: int = 10
    past: int = 10
    patch_cells: int = 20
    channels: int = 4
    enc_hidden: tuple[int, ...] = (128, 64)
    step_hidden: int = 64
    eta: float = 64.0
    # previous trajectory points fed to the step network (3 carries curvature)
    step_points: int = 3
    # per-cell feature map sampled around the previous trajectory point
    map_channels: int = 4
    patch_extent: float = 10.0
    # offsets along / across the current direction of motion; forward reach
    # matches the 2 m horizon so a turn can start before the obstacle is close
    stencil_forward: tuple[float, ...] = (0.4, 0.8, 1.2, 1.6, 2.0)
    stencil_lateral: tuple[float, ...] = (-0.5, 0.0, 0.5)

    @property
    def sigma_floor(self) -> float:
        return math.exp(-(self.eta / self.horizon + math.log(2 * math.pi)) / 2)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    perturbation_sigma: float = 0.01
    epochs: int = 20
    seed: int = 0
    # add the left-right mirror image of every example
    mirror: bool = True


@dataclass
class RegionConfig:
    width: float = 2.0
    offset: float = 3.0
    length: float = 4.0


@dataclass
class ControllerConfig:
    kp: float = 2.0
    kd: float = 0.1
    ki: float = 0.0
    kv: float = 1.0
    lookahead: float = 0.6
    v_max: float = 1.0
    w_max: float = 1.0


@dataclass
class PlannerConfig:
    phi: float = 0.75
    eta: float = 64.0
    delta: float | None = None  # None -> 2*eta + 1
    replan_hz: float = 1.0
    region: RegionConfig = field(default_factory=RegionConfig)

    @property
    def delta_value(self) -> float:
        return 2 * self.eta + 1 if self.delta is None else self.delta


@dataclass
class EvalConfig:
    n_episodes: int = 100
    n_worlds: int = 4  # evaluation worlds per environment
    timeout: float = 120.0
    goal_radius: float = 2.0
    min_goal_dist: float = 10.0
    max_goal_dist: float = 20.0
    oracle_resolution: float = 0.5
    bc_hz: float = 5.0
    random_hz: float = 1.0
    phis: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    report_softmax: bool = True


@dataclass
class Config:
    master_seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    costmap: CostmapConfig = field(default_factory=CostmapConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def alpha(self) -> float:
        return self.model.eta / self.model.horizon


class ConfigError(ValueError):
    pass


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{key}: expected boolean, got {value!r}")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(_coerce(v, current[0] if current else 0.0, key) for v in value)
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected integer, got {value!r}") from None
    if isinstance(current, float) or current is None:
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected number, got {value!r}") from None
    if isinstance(current, str):
        return str(value)
    return value


def _apply(obj, updates: dict, prefix: str = ""):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in updates.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key}: expected a table")
            _apply(current, value, prefix=f"{prefix}{key}.")
        else:
            setattr(obj, key, _coerce(value, current, prefix + key))


def set_dotted(cfg: Config, dotted: str, value) -> None:
    parts = dotted.split(".")
    nested: dict[str, Any] = {parts[-1]: value}
    for p in reversed(parts[:-1]):
        nested = {p: nested}
    _apply(cfg, nested)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        _apply(cfg, data)
    for dotted, value in (overrides or {}).items():
        set_dotted(cfg, dotted, value)
    validate(cfg)
    return cfg


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    _apply(cfg, data)
    validate(cfg)
    return cfg


def model_config_from_dict(data: dict) -> ModelConfig:
    mc = ModelConfig()
    _apply(mc, data, prefix="model.")
    return mc


def validate(cfg: Config) -> None:
    if not 0.0 <= cfg.planner.phi <= 1.0:
        raise ConfigError(f"planner.phi must lie in [0, 1], got {cfg.planner.phi}")
    if min(cfg.world.extent) < 20.0:
        raise ConfigError("world.extent must be at least 20 x 20 m")
    if not 0.0 < cfg.world.grass_slowdown <= 1.0:
        raise ConfigError("world.grass_slowdown must lie in (0, 1]")
    for name in ("batch_size", "epochs"):
        if getattr(cfg.train, name) <= 0:
            raise ConfigError(f"train.{name} must be positive")
    if cfg.train.learning_rate <= 0 or cfg.train.perturbation_sigma <= 0:
        raise ConfigError("train.learning_rate and train.perturbation_sigma must be positive")
    if cfg.costmap.mode not in ("cellwise", "global_softmax"):
        raise ConfigError(f"costmap.mode must be cellwise or global_softmax, got {cfg.costmap.mode!r}")
    ratio = cfg.sim.f_sim / cfg.data.f_traj
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("sim.f_sim must be an integer multiple of data.f_traj")
    if cfg.model.horizon != cfg.data.horizon or cfg.model.past != cfg.data.past:
        raise ConfigError("model and data horizons disagree")
    if cfg.sensor.patch_cells % cfg.model.patch_cells:
        raise ConfigError("sensor.patch_cells must be a multiple of model.patch_cells")
    if cfg.sensor.patch_extent != cfg.model.patch_extent:
        raise ConfigError("sensor.patch_extent and model.patch_extent disagree")


STAGES = ("world", "eval_world", "world_ood", "collect", "train", "bc", "library", "episodes", "policy", "ablate")


def stage_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Fixed split of the master seed into per-stage seeds."""
    tag = zlib.crc32(stage.encode())
    ss = np.random.SeedSequence([int(master_seed), tag, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
