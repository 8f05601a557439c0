"""Experiment configuration: a JSON tree with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .backbone import BackboneConfig, PretrainConfig
from .data import SyntheticTaskSpec
from .missing import Scenario
from .rep import RepConfig
from .train import OptimConfig

OUTPUT_ENV = "REP_OUTPUT_DIR"
REQUIRED = ("scenarios", "seeds")
SECTIONS = {
    "task": SyntheticTaskSpec,
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "rep": RepConfig,
    "optim": OptimConfig,
}


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration; names the offending path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class ExperimentConfig:
    scenarios: list
    seeds: list
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rep: RepConfig = field(default_factory=RepConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    output_dir: str = "runs"
    # widest buffer the desk-scale backbone gets; larger requests are clipped
    desk_max_buffer_width: int = 4
    grid: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def scenario_objects(self) -> list[Scenario]:
        return [Scenario.parse(s, self.task.modality_kinds) for s in self.scenarios]

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else v
        return json.loads(json.dumps(out))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.scenarios:
            raise ConfigError("scenarios", "at least one scenario is required")
        for name in ("task", "backbone", "optim"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from exc
        try:
            self.rep.validate()
        except ValueError as exc:
            raise ConfigError("rep", str(exc)) from exc
        if self.task.n_modalities != self.backbone.n_modalities:
            raise ConfigError("backbone.n_modalities", "differs from task.n_modalities")
        if self.task.seq_len != self.backbone.seq_len:
            raise ConfigError("backbone.seq_len", "differs from task.seq_len")
        if self.task.n_classes != self.backbone.n_classes:
            raise ConfigError("backbone.n_classes", "differs from task.n_classes")
        for i, s in enumerate(self.scenarios):
            try:
                Scenario.parse(s, self.task.modality_kinds)
            except ValueError as exc:
                raise ConfigError(f"scenarios[{i}]", str(exc)) from exc

    def resolve(self, environ=os.environ) -> "ExperimentConfig":
        """Materialize derived values: desk clip, feature widths, output dir override."""
        cfg = dataclasses.replace(self, notes=dict(self.notes))
        cfg.backbone = dataclasses.replace(
            self.backbone, feature_widths=(self.task.feature_width,) * self.task.n_modalities)
        if environ.get(OUTPUT_ENV):
            cfg.output_dir = environ[OUTPUT_ENV]
        if cfg.rep.buffer_width > cfg.desk_max_buffer_width:
            cfg.notes["rep.buffer_width"] = (
                f"requested {cfg.rep.buffer_width}, clipped to desk maximum {cfg.desk_max_buffer_width}")
            cfg.rep = dataclasses.replace(cfg.rep, buffer_width=cfg.desk_max_buffer_width)
        cfg.validate()
        return cfg


def _check_type(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        value = type(default)(value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
    return value


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(name, "expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _check_type(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "configuration root must be an object")
    for key in REQUIRED:
        if key not in data:
            raise ConfigError(key, "missing required field")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown field")
    kwargs: dict[str, Any] = {}
    for key, cls in SECTIONS.items():
        if key in data:
            kwargs[key] = _build_section(key, cls, data[key])
    if not isinstance(data["scenarios"], list) or not all(isinstance(s, str) for s in data["scenarios"]):
        raise ConfigError("scenarios", "expected a list of scenario strings")
    if not isinstance(data["seeds"], list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in data["seeds"]):
        raise ConfigError("seeds", "expected a list of integers")
    kwargs["scenarios"] = list(data["scenarios"])
    kwargs["seeds"] = list(data["seeds"])
    for key, default in (("output_dir", "runs"), ("desk_max_buffer_width", 4),
                         ("grid", {}), ("notes", {})):
        if key in data:
            kwargs[key] = _check_type(key, data[key], default)
    return ExperimentConfig(**kwargs)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config tree (values parsed as JSON)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "cannot descend into a non-object")
        node[keys[-1]] = parse_value(raw)
    return data


def load_config(path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    return from_dict(apply_overrides(data, overrides))
