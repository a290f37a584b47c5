"""Hierarchical run configuration with YAML files and dotted overrides."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .adc import ADCConfig
from .distillation import ASDConfig, DiffusionSchedule
from .losses import LossConfig


@dataclass
class LearningRates:
    """Per-attribute Adam step sizes.

    Positions decay exponentially from `position` to `position_final` over
    the run; the blend net decays to `net_decay` times its start value.
    """

    position: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    net: float = 1e-4
    net_decay: float = 0.1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"learning rate {f.name} must be positive")


@dataclass
class ViewConfig:
    """Camera sampling ranges (degrees) and the shared orbit geometry."""

    azimuth_min: float = -180.0
    azimuth_max: float = 180.0
    elevation_min: float = -10.0
    elevation_max: float = 20.0
    distance: float = 2.5
    fov_y: float = 45.0
    near: float = 0.1

    def __post_init__(self):
        if self.azimuth_min > self.azimuth_max:
            raise ValueError("azimuth_min must be <= azimuth_max")
        if self.elevation_min > self.elevation_max:
            raise ValueError("elevation_min must be <= elevation_max")
        if self.distance <= 0:
            raise ValueError("distance must be positive")


@dataclass
class GuidanceConfig:
    """Where noise predictions come from.

    `url` selects the remote provider. Otherwise `synthetic_target` names a
    PNG at render resolution and training runs against the built-in
    photometric oracle. Exactly one of the two must be set to train.
    """

    url: Optional[str] = None
    timeout: float = 30.0
    retries: int = 2
    synthetic_target: Optional[str] = None


@dataclass
class TrainConfig:
    prompt: str = "a person"
    negative_prompt: str = ""
    view_prompting: bool = True
    iterations: int = 20000
    seed: int = 0
    n_splats: int = 5000
    render_size: int = 512
    patch_size: int = 256
    canonical_prob: float = 0.2
    pose_scale: float = 0.3
    pose_mean: str = "star"  # sampling mean: "star" or "canonical"
    background: tuple = (0.0, 0.0, 0.0)
    net_hidden: int = 128
    net_layers: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    skip_budget: int = 10
    lr: LearningRates = field(default_factory=LearningRates)
    view: ViewConfig = field(default_factory=ViewConfig)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    asd: ASDConfig = field(default_factory=ASDConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    adc: ADCConfig = field(default_factory=ADCConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.canonical_prob <= 1.0:
            raise ValueError("canonical_prob must be in [0, 1]")
        if self.pose_scale < 0:
            raise ValueError("pose_scale must be >= 0")
        if self.pose_mean not in ("star", "canonical"):
            raise ValueError("pose_mean must be 'star' or 'canonical'")
        if self.patch_size < 1 or self.render_size < 1:
            raise ValueError("image sizes must be >= 1")
        if len(self.background) != 3:
            raise ValueError("background must have 3 channels")
        if self.n_splats < 1:
            raise ValueError("n_splats must be >= 1")


def _init_fields(cls):
    return [f for f in dataclasses.fields(cls) if f.init]


def config_from_dict(cls, data, path=""):
    """Build a config dataclass from nested dicts, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path or cls.__name__}: expected a mapping")
    by_name = {f.name: f for f in _init_fields(cls)}
    unknown = set(data) - set(by_name)
    if unknown:
        where = f"{path}." if path else ""
        raise ValueError(
            f"unknown config field(s): {', '.join(sorted(where + k for k in unknown))}"
        )
    kwargs = {}
    for name, value in data.items():
        f = by_name[name]
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) and isinstance(f.type, type):
            kwargs[name] = config_from_dict(f.type, value, sub_path)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path or cls.__name__}: {exc}") from exc


def config_to_dict(cfg):
    out = {}
    for f in _init_fields(type(cfg)):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def apply_overrides(data, overrides):
    """Apply `a.b.c=value` strings onto a nested dict; values parse as YAML."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value: {item!r}")
        key, _, text = item.partition("=")
        parts = key.strip().split(".")
        if not all(parts):
            raise ValueError(f"bad override key: {key!r}")
        node = data
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ValueError(f"override {key!r} descends into a scalar")
            node = nxt
        value = yaml.safe_load(text)
        if isinstance(value, str):
            # yaml needs "3.0e-4" for scientific floats; accept "3e-4" too
            try:
                value = float(value)
            except ValueError:
                pass
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()):
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    apply_overrides(data, overrides)
    return config_from_dict(TrainConfig, data)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg):
    """Stable digest of the full configuration, for checkpoint compatibility."""
    text = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()
