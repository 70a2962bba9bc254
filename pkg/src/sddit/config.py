"""Run configuration: nested dataclasses loaded from YAML with strict key checking.

Keys in the file mirror the dataclass field paths, e.g.::

    model:
      embed_dim: 64
    noise:
      sigma_min: 0.002
    mask_ratio: 0.2
    teacher_sigma_mode: fixed_min   # or same_as_student, or a number

Overrides use the same dotted paths: ``model.embed_dim=32``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .edm import NoiseSpec
from .network import ModelConfig

TEACHER_MODES = ("fixed_min", "same_as_student")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    tau_s: float = 0.1
    tau_t_start: float = 0.09
    tau_t_end: float = 0.099
    warmup_epochs: float = 5
    beta_start: float = 0.996
    beta_end: float = 0.999
    center_momentum_cls: float = 0.9
    center_momentum_patch: float = 0.9


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "two_texture"
    path: Union[str, None] = None
    classes: Union[list, None] = None
    n_per_class: int = 512
    noise_std: float = 0.1


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 40
    rho: float = 7.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mask_ratio: float = 0.2
    teacher_sigma_mode: Union[str, float] = "fixed_min"
    disable_L_D: bool = False
    edm_loss_weighting: bool = False
    total_steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    eval_interval: int = 0
    eval_samples: int = 64
    checkpoint_interval: int = 0
    out_dir: str = "runs/default"

    def teacher_sigma(self) -> Union[float, None]:
        """Fixed teacher noise level, or ``None`` when it is drawn like the student's."""
        mode = self.teacher_sigma_mode
        if mode == "fixed_min":
            return self.noise.sigma_min
        if mode == "same_as_student":
            return None
        return float(mode)


def _check_value(path: str, value: Any, tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if origin is Union:
        for option in typing.get_args(tp):
            try:
                return _check_value(path, value, option)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: {value!r} does not match {tp}")
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null")
        return None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls: type, data: dict, prefix: str = "") -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _check_value(prefix + name, value, tp)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: {exc}") from None


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """``["a.b=1", "c=x"]`` -> ``{"a.b": 1, "c": "x"}`` with YAML scalar typing."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
    return out


def validate(cfg: RunConfig) -> RunConfig:
    if not 0.0 <= cfg.mask_ratio <= 1.0:
        raise ConfigError(f"mask_ratio: must lie in [0, 1], got {cfg.mask_ratio}")
    mode = cfg.teacher_sigma_mode
    if isinstance(mode, str):
        if mode not in TEACHER_MODES:
            try:
                mode = float(mode)
            except ValueError:
                raise ConfigError(f"teacher_sigma_mode: expected {TEACHER_MODES} or a number, got {mode!r}") from None
    if not isinstance(mode, str) and not cfg.noise.sigma_min <= mode <= cfg.noise.sigma_max:
        raise ConfigError(
            f"teacher_sigma_mode: {mode} outside [{cfg.noise.sigma_min}, {cfg.noise.sigma_max}]"
        )
    if mode != cfg.teacher_sigma_mode:
        cfg = dataclasses.replace(cfg, teacher_sigma_mode=mode)
    for key in ("total_steps", "eval_interval", "checkpoint_interval"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be non-negative")
    for key in ("batch_size", "eval_samples"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be positive")
    if cfg.lr <= 0:
        raise ConfigError("lr: must be positive")
    d = cfg.distill
    if not 0 <= d.center_momentum_cls <= 1 or not 0 <= d.center_momentum_patch <= 1:
        raise ConfigError("distill: center momenta must lie in [0, 1]")
    if not 0 <= d.beta_start <= d.beta_end <= 1:
        raise ConfigError("distill: need 0 <= beta_start <= beta_end <= 1")
    if max(d.tau_t_start, d.tau_t_end) >= d.tau_s or min(d.tau_t_start, d.tau_t_end) <= 0:
        raise ConfigError("distill: need 0 < tau_t < tau_s")
    ds = cfg.dataset
    if ds.kind == "directory":
        if not ds.path or not Path(ds.path).is_dir():
            raise ConfigError(f"dataset.path: directory {ds.path!r} does not exist")
    elif ds.kind == "two_texture":
        if cfg.model.n_classes != 2:
            raise ConfigError("model.n_classes: the two_texture dataset has 2 classes")
        if ds.n_per_class < 1:
            raise ConfigError("dataset.n_per_class: must be positive")
    else:
        raise ConfigError(f"dataset.kind: unknown kind {ds.kind!r}")
    if cfg.sampler.n_steps < 1 or cfg.sampler.rho <= 0:
        raise ConfigError("sampler: need n_steps >= 1 and rho > 0")
    return cfg


def config_from_dict(data: dict | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    tree = dict(data or {})
    tree = yaml.safe_load(yaml.safe_dump(tree))  # deep copy
    for key, value in (overrides or {}).items():
        _set_path(tree, key, value)
    return validate(_build(RunConfig, tree))


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | list[str] | None = None) -> RunConfig:
    """Load a YAML config (missing keys take defaults); overrides win over file values."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if isinstance(overrides, list):
        overrides = parse_overrides(overrides)
    return config_from_dict(data, overrides)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
