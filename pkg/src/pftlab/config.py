"""Run configuration: one JSON file plus ``section.key=value`` overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec
from .kernel import config_hash
from .sampling import FEW_SHOT_KS, TRIALS_PER_CONDITION

OUTPUT_ENV = "PFTLAB_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    pft_lr: float = 0.01
    pft_momentum: float = 0.9
    pft_max_epochs: int = 200
    pft_patience: int = 3
    pft_batch_size: int = 1
    ft_lr: float = 0.05
    ft_momentum: float = 0.9
    ft_max_epochs: int = 200
    ft_patience: int = 30


@dataclass(frozen=True)
class GridConfig:
    ks: tuple[int, ...] = FEW_SHOT_KS
    trials: int = TRIALS_PER_CONDITION
    speakers: tuple[str, ...] | None = None
    emotions: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    parallelism: int = 1
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ENV, "runs/default"))

    def validate(self) -> "RunConfig":
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        if self.synth.seed != self.seed:
            raise ConfigError("synth.seed is derived from the global seed; set 'seed' instead")
        m = self.model
        for name in ("hidden_dim", "pft_max_epochs", "pft_patience", "pft_batch_size", "ft_max_epochs", "ft_patience"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.pft_patience > m.pft_max_epochs or m.ft_patience > m.ft_max_epochs:
            raise ConfigError("model: patience cannot exceed max_epochs")
        for name in ("pft_lr", "ft_lr"):
            if getattr(m, name) < 0:
                raise ConfigError(f"model.{name} must be >= 0")
        g = self.grid
        if not g.ks or any(k <= 0 or k % 2 for k in g.ks):
            raise ConfigError(f"grid.ks must be positive even integers, got {g.ks}")
        if g.trials < 1:
            raise ConfigError("grid.trials must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"].pop("seed")
        return d

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("parallelism")
        return config_hash(d)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section or 'config'}: {unknown}")
    out = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    top = _build(RunConfig, data, "")
    if "synth" in top:
        s = _build(SynthSpec, dict(top["synth"]), "synth")
        if "seed" in s:
            raise ConfigError("synth.seed is derived from the global seed; set 'seed' instead")
        try:
            top["synth"] = SynthSpec.from_dict({**s, "seed": top.get("seed", 0)})
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"synth: {exc}") from None
    else:
        top["synth"] = SynthSpec(seed=top.get("seed", 0))
    if "model" in top:
        top["model"] = ModelConfig(**_build(ModelConfig, top["model"], "model"))
    if "grid" in top:
        top["grid"] = GridConfig(**_build(GridConfig, top["grid"], "grid"))
    return RunConfig(**top).validate()


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values parse as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_dict(apply_overrides(data, overrides))


def with_output(cfg: RunConfig, output_dir) -> RunConfig:
    return replace(cfg, output_dir=str(output_dir))
