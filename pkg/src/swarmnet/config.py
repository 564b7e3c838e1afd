"""Run configuration file: one JSON document with sections ``sim``, ``model``,
``train``, ``noise`` and ``eval``.  Every key is optional; unknown keys are
rejected.  The resolved document (defaults filled in) is what gets embedded
in artifacts for provenance."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .model import SwarmNetConfig, canonical_json
from .rollout import NoiseConfig
from .swarmgen import SimConfig
from .trainer import TrainRunConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    horizons: list = field(default_factory=lambda: [5, 40])
    test_episodes: int = 100
    test_seed: int = 1_000_000
    bins: int = 20
    sweep_sizes: list = field(default_factory=lambda: [1000, 2000, 5000])
    jobs: int = 1

    def __post_init__(self):
        if not self.horizons or any(int(h) < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be positive integers, got {self.horizons}")
        if self.test_episodes < 1 or self.jobs < 1 or self.bins < 1:
            raise ConfigError("test_episodes, jobs and bins must be >= 1")


SECTIONS = {
    "sim": SimConfig,
    "model": SwarmNetConfig,
    "train": TrainRunConfig,
    "noise": NoiseConfig,
    "eval": EvalConfig,
}


def _check_value(value, default, where):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def build(cls, data, where):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    hints = typing.get_type_hints(cls)
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        sub = hints.get(key)
        if dataclasses.is_dataclass(sub):
            kwargs[key] = build(sub, value, f"{where}.{key}")
        elif value is None:
            kwargs[key] = None
        else:
            kwargs[key] = _check_value(value, getattr(defaults, key), f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: SwarmNetConfig = field(default_factory=SwarmNetConfig)
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; allowed {sorted(SECTIONS)}")
        cfg = cls(**{name: build(SECTIONS[name], value, name) for name, value in data.items()})
        try:
            cfg.sim.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, **sections):
        """Copy with per-section key overrides, e.g. ``with_overrides(train={"epochs": 3})``."""
        data = self.to_dict()
        for name, values in sections.items():
            data.setdefault(name, {}).update({k: v for k, v in values.items() if v is not None})
        return RunConfig.from_dict(data)
