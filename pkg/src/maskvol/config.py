"""Run configuration: nested dataclasses, strict YAML/JSON loading, env overrides.

Any key can be overridden with an environment variable named
``MASKVOL_<SECTION>__<KEY>`` (top-level keys: ``MASKVOL_<KEY>``); values are
parsed as YAML scalars.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError

ENV_PREFIX = "MASKVOL_"
MODALITIES = ("camera", "lidar", "fused")
STRATEGIES = ("dilation", "random", "depth_aware")
DEPTH_SOURCES = ("lidar", "oracle")


@dataclass
class SuiteConfig:
    seed: int = 0
    n_scenes: int = 8
    heldout_seed: int = 1000
    heldout_scenes: int = 2
    scene_dir: Optional[str] = None
    n_views: int = 6
    image_height: int = 64
    image_width: int = 96
    bounds_min: tuple = (-4.0, -4.0, 0.0)
    bounds_max: tuple = (4.0, 4.0, 2.0)
    lidar_azimuth: int = 360
    lidar_rows: int = 32


@dataclass
class MaskConfig:
    image_block: int = 32
    image_ratio: float = 0.3
    point_block: int = 8
    point_ratio: float = 0.8


@dataclass
class RayBudget:
    strategy: str = "depth_aware"
    interval: int = 4
    rays_per_view: int = 512
    tau: Optional[float] = None  # None -> 0.9 x scene diagonal
    points_per_ray: int = 96
    views_per_step: int = 1
    stratified: bool = True
    depth_source: str = "lidar"


@dataclass
class ModelConfig:
    voxel_resolution: tuple = (32, 32, 8)
    feature_dim: int = 16
    depth_bins: int = 32
    proj_dim: int = 32
    width: int = 32
    sdf_layers: int = 6
    rgb_layers: int = 4
    init_sharpness: float = 10.0


@dataclass
class LossWeights:
    lambda_rgb: float = 10.0
    lambda_depth: float = 10.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EvalConfig:
    every: int = 50
    rays_per_view: int = 64
    seed: int = 12345


@dataclass
class RunConfig:
    modality: str = "camera"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    rays: RayBudget = field(default_factory=RayBudget)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    steps: int = 500
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 0
    threads: int = 0  # 0 = library default; 1 = bitwise-deterministic mode

    def validate(self) -> "RunConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def _set_path(doc: dict, keys: list, value) -> None:
    for k in keys[:-1]:
        doc = doc.setdefault(k, {})
        if not isinstance(doc, dict):
            raise ConfigError(f"cannot override inside non-mapping key {k}")
    doc[keys[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        _set_path(out, keys, yaml.safe_load(raw))
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    """Load a YAML or JSON config; unknown keys are an error."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        text = p.read_text()
        try:
            doc = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{p}: cannot parse ({exc})") from exc
    doc = _merge(doc, env_overrides(environ))
    if overrides:
        doc = _merge(doc, overrides)
    return from_dict(doc).validate()


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> None:
    _check(cfg.modality in MODALITIES, f"modality must be one of {MODALITIES}")
    s = cfg.suite
    _check(s.n_scenes >= 1 and s.heldout_scenes >= 0, "suite needs >= 1 training scene")
    _check(s.n_views >= 1, "n_views must be >= 1")
    _check(len(s.bounds_min) == 3 and len(s.bounds_max) == 3, "bounds need three components")
    _check(all(a < b for a, b in zip(s.bounds_min, s.bounds_max)), "bounds_min must be < bounds_max")
    if s.scene_dir is not None:
        _check(Path(s.scene_dir).is_dir(), f"scene_dir {s.scene_dir} does not exist")
    m = cfg.mask
    _check(0 <= m.image_ratio <= 1 and 0 <= m.point_ratio <= 1, "mask ratios must lie in [0, 1]")
    _check(m.image_block >= 1 and m.point_block >= 1, "mask blocks must be >= 1")
    _check(s.image_height % m.image_block == 0 and s.image_width % m.image_block == 0,
           "image size must be divisible by mask.image_block")
    r = cfg.rays
    _check(r.strategy in STRATEGIES, f"rays.strategy must be one of {STRATEGIES}")
    _check(r.depth_source in DEPTH_SOURCES, f"rays.depth_source must be one of {DEPTH_SOURCES}")
    _check(r.interval >= 1 and r.rays_per_view >= 1 and r.points_per_ray >= 2, "ray budget out of range")
    _check(r.rays_per_view <= s.image_height * s.image_width, "rays_per_view exceeds pixels per view")
    _check(r.tau is None or r.tau > 0, "tau must be positive")
    _check(1 <= r.views_per_step <= s.n_views, "views_per_step must be in [1, n_views]")
    md = cfg.model
    _check(len(md.voxel_resolution) == 3 and min(md.voxel_resolution) >= 2, "voxel_resolution needs 3 counts >= 2")
    _check(md.voxel_resolution[0] % m.point_block == 0 and md.voxel_resolution[1] % m.point_block == 0,
           "voxel XY resolution must be divisible by mask.point_block")
    _check(md.feature_dim >= 1 and md.proj_dim >= 1 and md.width >= 1, "model widths must be positive")
    _check(md.depth_bins >= 2, "depth_bins must be >= 2")
    _check(md.sdf_layers >= 2 and md.rgb_layers >= 2, "decoders need at least two layers")
    _check(md.init_sharpness > 0, "init_sharpness must be positive")
    _check(cfg.loss.lambda_rgb >= 0 and cfg.loss.lambda_depth >= 0, "loss weights must be >= 0")
    o = cfg.optim
    _check(o.lr > 0 and o.weight_decay >= 0 and 0 <= o.beta1 < 1 and 0 <= o.beta2 < 1, "optimizer fields out of range")
    _check(cfg.steps >= 0 and cfg.checkpoint_every >= 0 and cfg.threads >= 0, "steps/checkpoint_every/threads must be >= 0")
    _check(cfg.eval.every >= 0 and cfg.eval.rays_per_view >= 1, "eval fields out of range")


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def config_from_json(text: str) -> RunConfig:
    return from_dict(json.loads(text)).validate()


def describe_fields(cls: Any = RunConfig, prefix: str = "") -> list:
    """``(dotted key, default)`` pairs for documentation."""
    rows = []
    for f in dataclasses.fields(cls):
        default = getattr(cls(), f.name)
        if dataclasses.is_dataclass(default):
            rows += describe_fields(type(default), f"{prefix}{f.name}.")
        else:
            rows.append((prefix + f.name, default))
    return rows
