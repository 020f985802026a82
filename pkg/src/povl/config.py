"""Run configuration: one INI file with a section per component.

Example::

    [povl]
    config_version = 1
    seed = 0

    [generator]
    density = dense

    [planner]
    Q3 = 1.0, 0.5

Unknown sections or keys are rejected so typos do not silently fall back to
defaults.  Tuples are comma separated, ``none`` clears an optional value.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .dynamics import VehicleParams
from .mpc import PlannerConfig
from .potential import PotentialConfig
from .synthetic import GeneratorConfig
from .training import TrainingConfig
from .transformer import ModelConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationSettings:
    perception_range: float = 100.0
    bucket_mode: str = "nearest"      # nearest | farthest
    ttc_radius: float = 2.0
    ttc_floor: float = 0.1
    workers: int = 1


@dataclass(frozen=True)
class DataSettings:
    n_recordings: int = 8             # generate: number of synthetic recordings
    test_fraction: float = 0.25       # train: share of recordings held out for evaluation
    stride: int = 3                   # train: anchor stride when building samples
    eval_stride: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)

    def planner_config(self) -> PlannerConfig:
        return replace(self.planner, potential=self.potential, vehicle=self.vehicle)

    def to_dict(self) -> dict:
        out = {"config_version": CONFIG_VERSION, "seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            sub = getattr(self, f.name)
            out[f.name] = {k.name: getattr(sub, k.name) for k in fields(sub)
                           if not dataclasses.is_dataclass(getattr(sub, k.name))}
        return out

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = ["[povl]", f"config_version = {CONFIG_VERSION}", f"seed = {self.seed}", ""]
        for name, values in self.to_dict().items():
            if not isinstance(values, dict):
                continue
            lines.append(f"[{name}]")
            for k, v in values.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(x) for x in v)
    return str(v)


def _coerce(raw: str, default: Any, name: str):
    text = raw.strip()
    if text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (tuple, list)) or (default is None and "," in text):
            items = [x.strip() for x in text.split(",") if x.strip()]
            kinds = [type(x) for x in default] if default else []
            if kinds and len(kinds) == len(items):
                return tuple(k(x) for k, x in zip(kinds, items))
            return tuple(float(x) for x in items)
        if default is None:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r}") from None


def _section(cls, values: dict, section: str):
    defaults = cls()
    known = {f.name: getattr(defaults, f.name) for f in fields(cls)
             if not dataclasses.is_dataclass(getattr(defaults, f.name))}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    kw = {k: _coerce(v, known[k], f"[{section}] {k}") for k, v in values.items()}
    try:
        return replace(defaults, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


SECTIONS = {
    "generator": GeneratorConfig,
    "data": DataSettings,
    "model": ModelConfig,
    "training": TrainingConfig,
    "planner": PlannerConfig,
    "potential": PotentialConfig,
    "vehicle": VehicleParams,
    "simulation": SimulationSettings,
}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys such as Q1 and I_z are case sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    extra = set(cp.sections()) - set(SECTIONS) - {"povl"}
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    head = dict(cp["povl"]) if cp.has_section("povl") else {}
    version = int(head.pop("config_version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version} is not supported (expected {CONFIG_VERSION})")
    seed = _coerce(head.pop("seed", "0"), 0, "[povl] seed")
    if head:
        raise ConfigError(f"[povl] unknown keys: {sorted(head)}")
    kw = {name: _section(cls, dict(cp[name]), name) for name, cls in SECTIONS.items()
          if cp.has_section(name)}
    return RunConfig(seed=seed, **kw)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text())
