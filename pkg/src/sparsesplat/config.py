"""Pipeline configuration: nested dataclasses loaded from JSON or TOML with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class StageToggles:
    fusion: bool = True
    mask: bool = True
    spgm: bool = True
    bidirectional: bool = True
    stabilize: bool = True
    refine: bool = True


@dataclass
class FusionConfig:
    eps: float = 1e-6


@dataclass
class MaskConfig:
    grid_stride: int = 4
    patch_radius: int = 3
    min_zncc: float = 0.8
    support_radius: float = 8.0


@dataclass
class ManageConfig:
    every: int = 40
    r: float = 0.1
    weights: tuple = (1.5, 1.0, 0.5)
    tau: tuple = (0.33, 0.66)
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    bins: int = 32
    k: int = 8


@dataclass
class OptimConfig:
    stabilize_iterations: int = 40
    joint_iterations: int = 80
    refine_iterations: int = 30
    beta: float = 0.95
    lambda_s: float = 1.0
    lambda_ssim: float = 0.2
    optimize_poses: bool = True
    lr: dict = field(default_factory=dict)
    pose_lr: dict = field(default_factory=dict)
    lr_final_ratio: float = 0.1


@dataclass
class EvalConfig:
    alignment: str = "similarity"


@dataclass
class PipelineConfig:
    data_dir: str = ""
    output_dir: str = "run"
    images_dir: Optional[str] = None
    depths_dir: Optional[str] = None
    pseudo_dir: Optional[str] = None
    cameras: Optional[str] = None
    require_depths: Optional[bool] = None
    seed: int = 0
    stages: StageToggles = field(default_factory=StageToggles)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    manage: ManageConfig = field(default_factory=ManageConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "PipelineConfig":
        m, o = self.manage, self.optim
        if not self.data_dir:
            raise ConfigError("data_dir is required")
        if not 0.0 <= m.r <= 1.0:
            raise ConfigError(f"manage.r must lie in [0, 1], got {m.r}")
        if len(m.weights) != 3 or any(w < 0 for w in m.weights):
            raise ConfigError(f"manage.weights needs three non-negative values, got {list(m.weights)}")
        if len(m.tau) != 2 or not 0.0 < m.tau[0] < m.tau[1] < 1.0:
            raise ConfigError(f"manage.tau must satisfy 0 < tau1 < tau2 < 1, got {list(m.tau)}")
        if m.every < 0:
            raise ConfigError("manage.every must be >= 0")
        for name in ("stabilize_iterations", "joint_iterations", "refine_iterations"):
            if getattr(o, name) < 0:
                raise ConfigError(f"optim.{name} must be >= 0")
        if not 0.0 <= o.beta <= 1.0 or not 0.0 <= o.lambda_ssim <= 1.0 or o.lambda_s < 0:
            raise ConfigError("optim weights out of range (beta, lambda_ssim in [0, 1]; lambda_s >= 0)")
        if self.eval.alignment not in ("similarity", "rigid", "none"):
            raise ConfigError(f"eval.alignment must be similarity, rigid or none, got {self.eval.alignment!r}")
        if self.mask.grid_stride < 1 or self.mask.patch_radius < 1 or self.mask.support_radius < 0:
            raise ConfigError("mask parameters out of range")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        """Digest of every setting except where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a table/object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            kwargs[name] = tuple(float(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number")
            if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
                raise ConfigError(f"{key} must be an integer")
            kwargs[name] = type(default)(value)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a table/object")
            kwargs[name] = {str(k): float(v) for k, v in value.items()}
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "").validate()


def load_config(path) -> PipelineConfig:
    """Read a ``.json`` or ``.toml`` config; relative data/output paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    cfg = config_from_dict(data)
    for name in ("data_dir", "output_dir", "images_dir", "depths_dir", "pseudo_dir", "cameras"):
        value = getattr(cfg, name)
        if value and not Path(value).is_absolute():
            setattr(cfg, name, str(path.parent / value))
    return cfg
