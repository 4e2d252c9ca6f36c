"""JSON run configuration: model, task, trainer, and budget sections.

Unknown keys are rejected anywhere in the document; every run writes
back the fully resolved configuration it used, so defaults are always
documented in the artifacts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import TaskSpec
from .model import ConformerConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class BudgetSpec:
    target_sparsity: float = 0.5
    budget_mode: str = "parameters"


@dataclass
class RunConfig:
    model: ConformerConfig = field(default_factory=ConformerConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    budget: BudgetSpec = field(default_factory=BudgetSpec)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.task.validate()
        self.trainer.validate()
        if not (0.0 <= self.budget.target_sparsity < 1.0):
            raise ConfigError(f"budget.target_sparsity {self.budget.target_sparsity} outside [0,1)")
        if self.budget.budget_mode not in ("parameters", "flops"):
            raise ConfigError(f"budget.budget_mode must be 'parameters' or 'flops', got {self.budget.budget_mode!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "task": dataclasses.asdict(self.task),
            "trainer": dataclasses.asdict(self.trainer),
            "budget": dataclasses.asdict(self.budget),
        }


_SECTION_TYPES = {"model": ConformerConfig, "task": TaskSpec, "trainer": TrainerConfig, "budget": BudgetSpec}


def _build_section(cls, data: dict, section: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        payload = data.get(section, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"section {section!r} must be an object")
        kwargs[section] = _build_section(cls, payload, section)
    try:
        return RunConfig(**kwargs).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def write_resolved_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
