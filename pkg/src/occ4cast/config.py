"""Config serialization, validation with field paths, and run presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .anchors import AnchorConfig
from .backbone import BackboneConfig
from .errors import ConfigError
from .fusion import WorldModelConfig
from .sampler import SamplerConfig
from .synthetic import CameraRigSpec, SyntheticWorldSpec


def to_dict(obj):
    """Recursively encode a dataclass as JSON-friendly plain data."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _coerce(value, annotation, path):
    # tuples are stored as JSON lists
    if isinstance(value, list):
        return tuple(_coerce(v, None, path) for v in value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build a dataclass from plain data; unknown keys fail with their path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    nested = {
        "anchor": AnchorConfig,
        "sampler": SamplerConfig,
        "backbone": BackboneConfig,
        "rig": CameraRigSpec,
    }
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in field_map:
            raise ConfigError(f"unknown config field: {where}")
        if key in nested and isinstance(value, dict):
            kwargs[key] = from_dict(nested[key], value, where)
        else:
            kwargs[key] = _coerce(value, field_map[key].type, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_hash(data) -> str:
    blob = json.dumps(to_dict(data), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


# ---------------------------------------------------------------------------
# Presets.  "desk" is the acceptance-suite configuration; "smoke" is a
# minutes-scale sanity run; "full" documents a benchmark-scale setup that is
# not meant to run on a desktop CPU.
# ---------------------------------------------------------------------------

DESK_BOUNDS = ((-12.0, -12.0, 0.0), (12.0, 12.0, 6.0))
SMOKE_BOUNDS = ((-9.0, -9.0, 0.0), (9.0, 9.0, 4.5))


def desk_world_spec(**overrides) -> SyntheticWorldSpec:
    """Acceptance-scale world: a coarse grid matched to the desk anchor
    budget (N*M = 1024 points vs ~300 occupied voxels)."""
    spec = SyntheticWorldSpec(
        bounds=DESK_BOUNDS, grid_dims=(12, 12, 3), voxel_size=2.0,
        n_static=5, n_dynamic=2,
        static_xy_range=(3.5, 6.5), static_h_range=(2.2, 3.8),
        dynamic_len_range=(5.0, 7.0), dynamic_wid_range=(2.4, 3.0),
        dynamic_h_range=(2.4, 3.0),
        lateral_range=(3.2, 8.5),
    )
    return spec.replace(**overrides) if overrides else spec


def steering_world_spec(**overrides) -> SyntheticWorldSpec:
    """Desk world tuned for trajectory-dependence experiments (sharp turns)."""
    spec = desk_world_spec(path_family="left-turn", yaw_rate_range=(0.20, 0.45))
    return spec.replace(**overrides) if overrides else spec


def smoke_world_spec(**overrides) -> SyntheticWorldSpec:
    spec = SyntheticWorldSpec(
        bounds=SMOKE_BOUNDS, grid_dims=(12, 12, 3), voxel_size=1.5,
        n_static=3, n_dynamic=1,
        static_xy_range=(2.2, 4.0), static_h_range=(1.8, 3.0),
        rig=CameraRigSpec(yaws_deg=(0.0, 55.0, -55.0), width=48, height=32),
    )
    return spec.replace(**overrides) if overrides else spec


def desk_model_config(**overrides) -> WorldModelConfig:
    cfg = WorldModelConfig(
        dim=64, heads=4, blocks=2, t_max=4, t_prime=2,
        anchor=AnchorConfig(num_anchors=64, points_per_anchor=16, feature_dim=64,
                            sigma=0.15, bounds=DESK_BOUNDS),
        sampler=SamplerConfig(),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def smoke_model_config(**overrides) -> WorldModelConfig:
    cfg = WorldModelConfig(
        dim=32, heads=2, blocks=1, t_max=3, t_prime=1,
        anchor=AnchorConfig(num_anchors=24, points_per_anchor=8, feature_dim=32,
                            sigma=0.15, bounds=SMOKE_BOUNDS),
        sampler=SamplerConfig(backbone=BackboneConfig(widths=(8, 12, 16, 24))),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def full_model_config() -> WorldModelConfig:
    # benchmark-scale configuration (documented, not exercised by the tests)
    return WorldModelConfig(
        dim=256, heads=8, blocks=6, t_max=6, t_prime=4,
        anchor=AnchorConfig(num_anchors=4800, points_per_anchor=16, feature_dim=256,
                            sigma=1.0,
                            bounds=((-40.0, -40.0, -1.0), (40.0, 40.0, 5.4))),
        sampler=SamplerConfig(backbone=BackboneConfig(widths=(64, 128, 256, 512))),
    )


def preset(name: str) -> dict:
    """Full run config (world/model/train/data sections) for a preset name."""
    from .trainer import TrainConfig  # local import to avoid a cycle

    if name == "smoke":
        return {
            "world": to_dict(smoke_world_spec()),
            "model": to_dict(smoke_model_config()),
            "train": to_dict(TrainConfig(epochs=10, batch_size=2, t_max=3,
                                         t_prime=1, max_steps=40)),
            "data": {"count": 8, "val_count": 0},
        }
    if name == "desk":
        return {
            "world": to_dict(desk_world_spec()),
            "model": to_dict(desk_model_config()),
            "train": to_dict(TrainConfig(epochs=40, batch_size=4, t_max=4, t_prime=2)),
            "data": {"count": 256, "val_count": 32},
        }
    if name == "full":
        return {
            "world": to_dict(desk_world_spec(grid_dims=(200, 200, 16), voxel_size=0.4,
                                             bounds=((-40.0, -40.0, -1.0),
                                                     (40.0, 40.0, 5.4)))),
            "model": to_dict(full_model_config()),
            "train": to_dict(TrainConfig(epochs=70, batch_size=8, t_max=6, t_prime=4)),
            "data": {"count": 0, "val_count": 0},
        }
    raise ConfigError(f"unknown preset {name!r} (expected smoke, desk or full)")
