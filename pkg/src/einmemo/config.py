"""Run configuration: nested dataclasses persisted as YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .frozen_model import ToyConfig
from .training import PromptTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    categories: int = 8
    per_class: int = 50
    test_per_class: int = 20
    cell: int = 111
    background: str = "noise"


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    data: str | None = None
    # second dataset root; queries come from here in domain-shift evaluation
    target: str | None = None
    model: str | None = None
    prompt: str | None = None
    index: str | None = None
    out: str | None = None
    split: str = "train"
    extractor: str = "raw"
    cell: int = 111
    fold: int | None = None
    folds: int = 4
    no_prompt: bool = False
    debug_canvas: bool = False
    sweep: str | None = None
    grid: int | None = None
    gen: GenConfig = field(default_factory=GenConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    train: PromptTrainConfig = field(default_factory=PromptTrainConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["toy"]["tasks"] = list(d["toy"]["tasks"])
        return d

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_NESTED = {"gen": GenConfig, "toy": ToyConfig, "train": PromptTrainConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {unknown}")
    kwargs = {}
    for k, v in data.items():
        if cls is RunConfig and k in _NESTED:
            v = _build(_NESTED[k], v or {}, k)
        elif cls is ToyConfig and k == "tasks":
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where or 'config'}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path: str | Path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(data)


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides (``train.epochs``) on top of ``base``."""
    d = base.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = value
    return from_dict(d)
