"""Run configuration: one declarative document with full defaulting.

``RunConfig.from_dict`` rejects unknown keys at every nesting level so that
typos in config files fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from .backend import LmConfig
from .errors import ConfigError
from .propagation import ImuNoiseParams


@dataclass(frozen=True)
class ZuptConfig:
    """Zero-velocity detector thresholds and pseudo-measurement noise."""

    enabled: bool = False
    accel_deviation_max: float = 0.5  # m/s^2, max spread within the window
    gyro_norm_max: float = 0.1  # rad/s
    velocity_max: float = 0.2  # m/s, on the current velocity estimate
    window_seconds: float = 0.2
    min_samples: int = 5
    sigma_gyro: float = 2e-3  # rad/s, pseudo-measurement std
    sigma_accel: float = 2e-2  # m/s^2


@dataclass(frozen=True)
class InitConfig:
    """Initial-state prior standard deviations; optionally sample the error."""

    sigma_theta: float = 1e-3
    sigma_vel: float = 1e-3
    sigma_pos: float = 1e-4
    sigma_bg: float = 2e-3
    sigma_ba: float = 2e-2
    perturb: bool = False
    seed: int = 0

    def sigmas(self):
        return [self.sigma_theta, self.sigma_vel, self.sigma_pos,
                self.sigma_bg, self.sigma_ba]


@dataclass(frozen=True)
class RunConfig:
    window: int = 10
    gravity: tuple = (0.0, 0.0, -9.81)
    extrinsics_rotation: tuple = ((1.0, 0, 0), (0, 1.0, 0), (0, 0, 1.0))
    extrinsics_translation: tuple = (0.0, 0.0, 0.0)
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    # Per-observation noise variances (normalized image units / meters).
    v_geom: float = (1.0 / 500.0) ** 2
    v_sem: float = (1.0 / 500.0) ** 2
    v_bbox: float = 1e-2
    lm: LmConfig = field(default_factory=LmConfig)
    zupt: ZuptConfig = field(default_factory=ZuptConfig)
    init: InitConfig = field(default_factory=InitConfig)
    chi2_gate: bool = False
    chi2_confidence: float = 0.95
    use_quadratic_bbox: bool = False
    window_insert_propagated: bool = False
    min_track_frames: int = 3
    min_object_frames: int = 3
    depth_min: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        if not 0 < self.chi2_confidence < 1:
            raise ConfigError("chi2_confidence must be in (0, 1)")


def _field_types(cls):
    import sys
    import typing

    # Annotations may be strings under `from __future__ import annotations`.
    return typing.get_type_hints(cls, vars(sys.modules[cls.__module__]))


def dataclass_from_dict(cls, data: dict, path: str = ""):
    """Build a dataclass from a nested dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{path or cls.__name__}': expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} at '{path or cls.__name__}'"
        )
    types = _field_types(cls)
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        f_type = types.get(name, object)
        if is_dataclass(f_type):
            kwargs[name] = dataclass_from_dict(f_type, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in value
            )
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at '{path or cls.__name__}': {exc}") from exc


def dataclass_to_dict(obj):
    """Plain-JSON form of a (possibly nested) config dataclass."""
    if is_dataclass(obj):
        return {f.name: dataclass_to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [dataclass_to_dict(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_run_config(data: dict) -> RunConfig:
    return dataclass_from_dict(RunConfig, data)
