"""Run configuration: defaults, config-file merge, flag overrides.

Precedence is defaults < config file < explicit overrides; unknown keys are
rejected so typos fail loudly. The merged configuration is embedded in every
output artifact together with its fingerprint.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .geom import Pose2
from .manifold import EmConfig
from .planner import PlanConfig
from .sim import ExpertConfig, SimConfig, TBlockSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ManifoldConfig:
    n_components: int = 5
    select_bic: bool = False
    mag_ref: float | None = None          # None: calibrated from training data
    mag_scale: float | None = None        # None: falls back to mag_ref
    density_threshold: float | None = None  # None: calibrated 5th percentile
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("manifold.n_components must be at least 1")


@dataclass(frozen=True)
class PolicyConfig:
    k: int = 1
    proprio_weight: float | None = None   # None: balance keypoint/proprio blocks
    zero_out: bool = True
    align_radius: float = 80.0            # local replay re-anchoring gate, 0 = off
    align_max_rot: float = 0.9

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("policy.k must be at least 1")
        if self.align_radius < 0 or self.align_max_rot < 0:
            raise ValueError("alignment gates must be non-negative")


@dataclass(frozen=True)
class JointConfig:
    # full-window execution: the joint loop runs the whole returned action
    # trajectory before re-observing, which a delayed recovery plan needs
    exec_per_cycle: int = 16
    hysteresis: float = 0.0

    def __post_init__(self):
        if self.exec_per_cycle < 1:
            raise ValueError("joint.exec_per_cycle must be at least 1")
        if self.hysteresis < 0:
            raise ValueError("joint.hysteresis must be non-negative")


@dataclass(frozen=True)
class EvalConfig:
    max_steps: int = 900          # evaluation budget; recovery then task needs headroom
    base_exec_per_cycle: int = 8  # re-query interval when rolling out the base alone
    jobs: int = 1

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("eval.max_steps must be at least 1")
        if self.base_exec_per_cycle < 1:
            raise ValueError("eval.base_exec_per_cycle must be at least 1")
        if self.jobs < 1:
            raise ValueError("eval.jobs must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    em: EmConfig = field(default_factory=EmConfig)
    manifold: ManifoldConfig = field(default_factory=ManifoldConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.joint.exec_per_cycle > self.plan.horizon:
            raise ConfigError("joint.exec_per_cycle cannot exceed plan.horizon")
        return self


_SPECIAL_BUILDERS = {
    Pose2: lambda v: v if isinstance(v, Pose2) else Pose2.from_array(v),
    tuple: lambda v: tuple(float(x) for x in v),
}


def _build_dataclass(cls, mapping, path: str):
    if isinstance(mapping, cls):
        return mapping
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(mapping) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in mapping.items():
        sub_path = f"{path}.{name}"
        target = _field_runtime_type(cls, name)
        if target is Pose2:
            try:
                kwargs[name] = _SPECIAL_BUILDERS[Pose2](value)
            except Exception as e:
                raise ConfigError(f"{sub_path}: expected [x, y, theta] ({e})")
        elif target is tuple:
            try:
                kwargs[name] = _SPECIAL_BUILDERS[tuple](value)
            except Exception as e:
                raise ConfigError(f"{sub_path}: expected a numeric pair ({e})")
        elif target is not None and is_dataclass(target):
            kwargs[name] = _build_dataclass(target, value, sub_path)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


_RUNTIME_TYPES = {
    (SimConfig, "t_block"): TBlockSpec,
    (SimConfig, "target_pose"): Pose2,
    (SimConfig, "expert"): ExpertConfig,
    (SimConfig, "workspace"): tuple,
    (RunConfig, "sim"): SimConfig,
    (RunConfig, "plan"): PlanConfig,
    (RunConfig, "em"): EmConfig,
    (RunConfig, "manifold"): ManifoldConfig,
    (RunConfig, "policy"): PolicyConfig,
    (RunConfig, "joint"): JointConfig,
    (RunConfig, "eval"): EvalConfig,
}


def _field_runtime_type(cls, name):
    return _RUNTIME_TYPES.get((cls, name))


def _to_plain(obj):
    if isinstance(obj, Pose2):
        return [obj.x, obj.y, obj.theta]
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def canonical_dict(cfg: RunConfig) -> dict:
    """Nested plain-type rendering, suitable for JSON and fingerprinting."""
    return _to_plain(cfg)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from defaults, a YAML file, and overrides.

    ``overrides`` is a nested mapping in the same shape as the file.
    """
    merged: dict = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                doc = yaml.safe_load(f)
        except OSError as e:
            raise FileNotFoundError(f"config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path}: invalid YAML ({e})") from e
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path}: top level must be a mapping")
        merged = _deep_merge(merged, doc)
    if overrides:
        merged = _deep_merge(merged, overrides)
    cfg = _build_dataclass(RunConfig, merged, "config")
    return cfg.validate()


def replace_section(cfg: RunConfig, **sections) -> RunConfig:
    """Functional update of whole top-level sections."""
    return dataclasses.replace(cfg, **sections).validate()
