"""Experiment configuration: YAML file + ``key=value`` overrides over typed defaults."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..envs import DarkroomSpec
from ..evaluation.trials import TRUNCATION_POLICIES
from ..model.config import ConfigError, ModelConfig, ObsSpec
from ..trainer.loop import TrainConfig


@dataclass
class EnvConfig:
    grid_size: int = 10
    horizon: int = 100
    variant: str = "state"
    image_size: tuple[int, int] = (25, 25)

    def spec(self) -> DarkroomSpec:
        return DarkroomSpec(self.grid_size, self.horizon, self.variant, tuple(self.image_size))


@dataclass
class EvalConfig:
    n_trials: int = 200
    n_episodes: int = 40
    max_context: int | None = None
    truncation: str | None = None
    greedy: bool = False
    context_multiplier: float = 4.0
    demo_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 4])
    fewshot_trials: int = 500
    probe_episodes: int = 5
    label: str = ""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    budget: int | None = None
    checkpoint_every: int = 50

    def finalize(self) -> "ExperimentConfig":
        """Derive dependent fields and check cross-section invariants."""
        try:
            env = self.env.spec()
        except ValueError as e:
            raise ConfigError("env", str(e)) from e
        if env.variant == "pixel":
            self.model.obs_spec = ObsSpec(state_dim=0, image_shape=env.image_shape)
        else:
            self.model.obs_spec = ObsSpec(state_dim=2, image_shape=None)
        self.model.validate()
        self.train.validate()
        if self.model.max_within_episode_len < env.horizon:
            raise ConfigError("model.max_within_episode_len", f"must be >= env.horizon ({env.horizon})")
        if self.eval.truncation not in TRUNCATION_POLICIES:
            raise ConfigError("eval.truncation", f"unknown policy {self.eval.truncation!r}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget", "env-step budget must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")
        return self

    @property
    def env_step_budget(self) -> int:
        return self.train.total_steps if self.budget is None else self.budget

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError:
                pass
        raise ConfigError(path, f"expected {tp}, got {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return _build(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        inner = args[0] if args else Any
        items = [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
        if origin is tuple and args and args[-1] is not Ellipsis and len(items) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(items)}")
        return tuple(items) if origin is tuple else items
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected float, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected str, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}.{f.name}" if prefix else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], path)
    return cls(**kwargs)


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(key, f"cannot parse value {raw!r}") from e
    return key.strip().split("."), value


def merge_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        keys, value = _parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(keys), f"{k} is not a section")
        node[keys[-1]] = value
    return data


def parse_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path`` (may be empty), then ``overrides``."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"invalid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(str(path), "top level must be a mapping")
        data = loaded
    data = merge_overrides(data, overrides or [])
    return _build(ExperimentConfig, data).finalize()


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
