"""
Run configuration: one YAML mapping per section, each backed by a frozen
dataclass, plus dotted ``section.field=value`` overrides from the command
line. Every problem is reported through ``ValidationError`` keyed by the
dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml
from django.core.exceptions import ValidationError

from .dynamics import VesselParams
from .evaluation import SweepSpec
from .mpc import MpcModel, OcpConfig
from .ppo import TrainConfig
from .task import CaptureVecEnv, RandomizationConfig, RewardWeights, TaskConfig

SECTIONS: dict[str, type] = {
    "dynamics": VesselParams,
    "reward": RewardWeights,
    "task": TaskConfig,
    "randomization": RandomizationConfig,
    "ppo": TrainConfig,
    "mpc": OcpConfig,
    "sweep": SweepSpec,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dynamics: VesselParams = field(default_factory=VesselParams)
    reward: RewardWeights = field(default_factory=RewardWeights)
    task: TaskConfig = field(default_factory=TaskConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    ppo: TrainConfig = field(default_factory=TrainConfig)
    mpc: OcpConfig = field(default_factory=OcpConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self) -> None:
        if not math.isclose(self.mpc.node_dt, self.task.control_period, rel_tol=1e-9):
            raise ValidationError(
                {"mpc.nodes": "horizon / nodes must equal the task control period (one node per control step)"}
            )
        if not math.isclose(self.mpc.control_rate * self.task.control_period, 1.0, rel_tol=1e-9):
            raise ValidationError({"mpc.control_rate": "must equal 1 / task control period"})

    def mpc_model(self) -> MpcModel:
        return MpcModel.from_params(self.dynamics, self.mpc.n_r)

    def make_env(self, seed: Optional[int] = None) -> CaptureVecEnv:
        return CaptureVecEnv(
            self.ppo.num_envs,
            self.seed if seed is None else seed,
            self.dynamics,
            self.reward,
            self.randomization,
            self.task,
        )

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, Any]:
        tree: dict[str, Any] = {"seed": self.seed}
        for section in SECTIONS:
            values = dataclasses.asdict(getattr(self, section))
            tree[section] = {key: list(value) if isinstance(value, tuple) else value for key, value in values.items()}
        return tree


def _coerce(value: Any, default: Any) -> Any:
    """Bring a YAML value to the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError("expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError("expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError("expected a string")
        return value
    if default is None and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError("expected a list")
        if default and isinstance(default[0], float):
            return tuple(_coerce(item, 0.0) for item in value)
        if default and isinstance(default[0], int):
            return tuple(_coerce(item, 0) for item in value)
        return tuple(value)
    return value


def _field_default(cls: type, f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _build_section(name: str, cls: type, values: Any, errors: dict[str, list[str]]) -> Any:
    if values is None:
        values = {}
    if not isinstance(values, Mapping):
        errors[name] = ["must be a mapping of field: value"]
        return None
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        path = f"{name}.{key}"
        if key not in fields:
            errors[path] = [f"unknown field; valid fields: {', '.join(fields)}"]
            continue
        try:
            kwargs[key] = _coerce(value, _field_default(cls, fields[key]))
        except ValueError as exc:
            errors[path] = [str(exc)]
    if any(key.startswith(f"{name}.") or key == name for key in errors):
        return None
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        for key, messages in exc.message_dict.items():
            errors[f"{name}.{key}"] = messages
    return None


def build_run_config(tree: Any) -> RunConfig:
    """Validate a raw config tree and build the typed config."""
    if tree is None:
        tree = {}
    if not isinstance(tree, Mapping):
        raise ValidationError({"config": ["top level must be a mapping of sections"]})
    errors: dict[str, list[str]] = {}
    for key in tree:
        if key != "seed" and key not in SECTIONS:
            errors[str(key)] = [f"unknown section; valid sections: seed, {', '.join(SECTIONS)}"]
    seed = tree.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors["seed"] = ["must be a non-negative integer"]
    sections = {name: _build_section(name, cls, tree.get(name), errors) for name, cls in SECTIONS.items()}
    if errors:
        raise ValidationError(errors)
    return RunConfig(seed=seed, **sections)


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.field=value`` with the value read as a YAML scalar or list."""
    path, sep, raw = text.partition("=")
    section, dot, name = path.strip().partition(".")
    if not sep or not section or (section != "seed" and not (dot and name)):
        raise ValidationError({"--set": [f"{text!r} is not of the form section.field=value"]})
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError({"--set": [f"{text!r}: {exc}"]}) from None
    return section, name, value


def apply_overrides(tree: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    merged: dict[str, Any] = {key: dict(value) if isinstance(value, Mapping) else value for key, value in tree.items()}
    for text in overrides:
        section, name, value = parse_override(text)
        if section == "seed" and not name:
            merged["seed"] = value
            continue
        current = merged.setdefault(section, {})
        if not isinstance(current, dict):
            raise ValidationError({section: ["must be a mapping of field: value"]})
        current[name] = value
    return merged


def load_run_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML run config (or start from defaults when ``path`` is None) and apply overrides."""
    tree: Any = {}
    if path is not None:
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError({"config": [f"{path}: {exc}"]}) from None
        if not isinstance(tree, Mapping):
            raise ValidationError({"config": ["top level must be a mapping of sections"]})
    return build_run_config(apply_overrides(tree, overrides))


def dump_run_config(config: RunConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.as_dict(), sort_keys=False))
    return path
