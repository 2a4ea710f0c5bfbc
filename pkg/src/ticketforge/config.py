"""Run configuration: parsing, validation, defaults and hashing.

A config file is JSON.  Parsing resolves every default and echoes the full
configuration back, so a run's artifacts always record exactly what ran.
The config hash is taken over the canonical (sorted-keys) form and is
therefore stable under field reordering.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .adversarial import AdvConfig
from .data import (DEFAULT_DEV_SIZE, DEFAULT_PRETRAIN_SIZE,
                   DEFAULT_TRAIN_SIZE, default_suite)
from .errors import ConfigError
from .models import PRETRAIN, ArchSpec
from .pruning import PruneConfig
from .training import TrainBudget

INIT_KINDS = ("pretext", "random", "textonly", "shuffled")


@dataclass(frozen=True)
class DataConfig:
    train_size: int = DEFAULT_TRAIN_SIZE
    dev_size: int = DEFAULT_DEV_SIZE
    pretrain_size: int = DEFAULT_PRETRAIN_SIZE

    def __post_init__(self):
        for name in ("train_size", "dev_size", "pretrain_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    task: str = "color_query"            # a task_id or "pretrain"
    tasks: tuple = ()                    # task suite for transfer/sweep; () = all
    sources: tuple = ()                  # ticket sources for transfer/overlap
    prune: PruneConfig = field(default_factory=PruneConfig)
    adv: Optional[AdvConfig] = None
    budget: TrainBudget = field(default_factory=TrainBudget)
    pretrain_budget: TrainBudget = TrainBudget(steps=1500, batch_size=64, lr=0.5)
    data: DataConfig = field(default_factory=DataConfig)
    init: str = "pretext"
    seeds: tuple = (0, 1, 2)
    grid: tuple = (0.5, 0.6)
    methods: tuple = ("imp", "random")
    output_dir: Optional[str] = None
    def __post_init__(self):
        if self.init not in INIT_KINDS:
            raise ConfigError(f"init must be one of {INIT_KINDS}")
        known = {t.task_id for t in default_suite()} | {PRETRAIN}
        for t in (self.task, *self.tasks, *self.sources):
            if t not in known:
                raise ConfigError(f"unknown task {t!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "methods", tuple(self.methods))


_SECTION_TYPES = {
    "arch": ArchSpec,
    "prune": PruneConfig,
    "adv": AdvConfig,
    "budget": TrainBudget,
    "pretrain_budget": TrainBudget,
    "data": DataConfig,
}


def _build_section(name: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {name!r}")
    converted = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        converted[key] = value
    return cls(**converted)


def parse_config(source: Union[str, Path, dict]) -> RunConfig:
    """Build a validated RunConfig from a JSON file or a plain dict.

    Unknown keys are rejected by name; range violations surface the field.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    else:
        raw = dict(source)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")

    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")

    kwargs = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if key == "adv" and value is None:
                kwargs[key] = None
            else:
                kwargs[key] = _build_section(key, _SECTION_TYPES[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def echo_config(config: RunConfig) -> dict:
    """The fully resolved configuration, every default filled in."""
    out = asdict(config)
    return out


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(echo_config(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()
