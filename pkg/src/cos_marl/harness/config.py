"""Experiment configuration: YAML file + CLI overrides -> resolved dataclasses."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin

import yaml

from ..env import WorldConfig
from ..numerics import ConfigError
from ..trainer import TrainConfig

OUTPUT_ROOT_ENV = "COS_MARL_OUTPUT_ROOT"

ENV_PRESETS = {
    "dcn": "discrete",
    "ccn": "continuous",
}


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ExperimentConfig:
    name: str = "cos"
    output_dir: Optional[str] = None
    dump_embeddings: bool = False
    dump_embedding_steps: int = 5000
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return default_output_root() / self.name

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "dump_embeddings": self.dump_embeddings,
            "dump_embedding_steps": self.dump_embedding_steps,
            "world": asdict(self.world),
            "train": asdict(self.train),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        world = _build(WorldConfig, d.pop("world", {}) or {}, "world")
        train = _build(TrainConfig, d.pop("train", {}) or {}, "train")
        top = _coerce_fields(cls, d, "", skip={"world", "train"})
        cfg = cls(**top, world=world, train=train)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.world.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.dump_embedding_steps < 0:
            raise ConfigError("dump_embedding_steps must be non-negative")


def _field_type(tp) -> Any:
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return args[0]
    return tp


def _resolve_types(cls) -> dict:
    import typing

    hints = typing.get_type_hints(cls)
    return {f.name: _field_type(hints[f.name]) for f in fields(cls)}


def coerce(value: Any, tp, where: str) -> Any:
    if value is None:
        return None
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if tp is float:
            return float(value)
        return tp(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot interpret {value!r} as {tp.__name__}") from None


def _coerce_fields(cls, d: dict, prefix: str, skip=()) -> dict:
    types = {k: v for k, v in _resolve_types(cls).items() if k not in skip}
    unknown = set(d) - set(types)
    if unknown:
        raise ConfigError(f"unknown config field(s) {sorted(prefix + k for k in unknown)}")
    return {k: coerce(v, types[k], prefix + k) for k, v in d.items()}


def _build(cls, d: dict, section: str):
    kwargs = _coerce_fields(cls, d, section + ".")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply ``{"section.field" or "field": value}`` overrides and re-validate.

    Bare field names are looked up in the top level, then ``world``, then ``train``.
    """
    d = cfg.to_dict()
    world_keys = set(d["world"])
    train_keys = set(d["train"])
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in ("world", "train"):
                raise ConfigError(f"unknown config section {section!r}")
            d[section][name] = value
        elif key in d and key not in ("world", "train"):
            d[key] = value
        elif key in world_keys:
            d["world"][key] = value
        elif key in train_keys:
            d["train"][key] = value
        else:
            raise ConfigError(f"unknown config field {key!r}")
    # agent count is derived unless explicitly given
    if "n_landmarks" in overrides and "n_agents" not in overrides:
        d["world"]["n_agents"] = None
    return ExperimentConfig.from_dict(d)
