"""Run configuration: a JSON object with ``model``, ``distill``, ``optimizer``, ``data`` and ``seed``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import DistillConfig
from .encoder import ConfigError, ModelConfig
from .training import DataConfig, OptimizerConfig

SECTIONS = ("model", "distill", "optimizer", "data", "seed")


@dataclass
class RunConfig:
    model: ModelConfig
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    student_layers: int | None = None

    def student_config(self) -> ModelConfig:
        layers = self.student_layers
        if layers is None:
            layers = self.model.num_layers // self.distill.copy_stride
        return self.model.replace(num_layers=layers)

    def to_dict(self) -> dict:
        distill = asdict(self.distill)
        if self.student_layers is not None:
            distill["student_layers"] = self.student_layers
        return {"model": self.model.to_dict(), "distill": distill,
                "optimizer": asdict(self.optimizer), "data": asdict(self.data), "seed": self.seed}


def _section(cls, name: str, raw, extra: tuple[str, ...] = ()):
    if raw is None:
        return cls(), {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs, rest = {}, {}
    for key, value in raw.items():
        if key in extra:
            rest[key] = value
            continue
        if key not in known:
            raise ConfigError(f"unknown field {name}.{key}")
        default = getattr(cls(), key)
        if isinstance(default, bool) or not isinstance(default, (int, float, str)):
            kwargs[key] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"field {name}.{key} must be a string")
            kwargs[key] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"field {name}.{key} must be an integer")
            kwargs[key] = value
        else:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"field {name}.{key} must be a number")
            kwargs[key] = float(value)
    try:
        return cls(**kwargs), rest
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level field {unknown[0]}")
    if "model" not in obj:
        raise ConfigError("missing field: model")
    if not isinstance(obj["model"], dict):
        raise ConfigError("model must be an object")
    try:
        model = ModelConfig.from_dict(obj["model"])
    except ConfigError as exc:
        raise ConfigError(f"model: {exc}") from None
    distill, rest = _section(DistillConfig, "distill", obj.get("distill"), ("student_layers",))
    student_layers = rest.get("student_layers")
    if student_layers is not None and (not isinstance(student_layers, int) or student_layers < 0):
        raise ConfigError("field distill.student_layers must be a non-negative integer")
    optimizer, _ = _section(OptimizerConfig, "optimizer", obj.get("optimizer"))
    data, _ = _section(DataConfig, "data", obj.get("data"))
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("field seed must be a non-negative integer")
    return RunConfig(model, distill, optimizer, data, seed, student_layers)


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(obj)
