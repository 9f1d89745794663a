"""Run configuration loaded from one YAML file.

Unknown keys and out-of-range values are rejected before any work starts.
Relative paths resolve against the config file's directory; ``KVP_STORE``
overrides the cache store directory.
"""

from __future__ import annotations

import dataclasses
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from kvpacket import tasks
from kvpacket.bench import DEFAULT_BANDWIDTH_GBPS, DEFAULT_REPS, Strategy, parse_strategy
from kvpacket.distill import TrainConfig
from kvpacket.model import ModelConfig
from kvpacket.pretrain import PretrainSpec

STORE_ENV = "KVP_STORE"
SEED_STREAMS = ("pretrain", "samples", "tasks", "prune", "adapters")


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSettings:
    n_docs: int = 4
    doc_len: int = 32
    n_facts: int = 2
    n_eval: int = 100
    # fraction of eval instances the full-prefill model must answer
    min_accuracy: float = 0.9

    def __post_init__(self):
        if self.n_eval < 1:
            raise ValueError("n_eval must be positive")
        if not 0.0 <= self.min_accuracy <= 1.0:
            raise ValueError("min_accuracy must be in [0, 1]")
        self.difficulty()

    def difficulty(self) -> tasks.Difficulty:
        return tasks.Difficulty(self.n_docs, self.doc_len, self.n_facts)


@dataclass(frozen=True)
class AdapterSettings:
    n_header: int = 8
    n_trailer: int = 8


@dataclass
class RunConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    out: Path = Path("out")
    store: Path = Path("store")
    checkpoint: Path = Path("model.kvpw")
    adapters: Path = Path("adapters.kvpa")
    seed: int = 0
    bandwidth_gbps: float = DEFAULT_BANDWIDTH_GBPS
    reps: int = DEFAULT_REPS
    domains: tuple[str, ...] = tasks.DOMAINS
    strategies: tuple[Strategy, ...] = (Strategy("full"), Strategy("none"), Strategy("packet"))
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSettings = field(default_factory=TaskSettings)
    adapter: AdapterSettings = field(default_factory=AdapterSettings)

    def seed_for(self, stream: str) -> int:
        """Independent seed for a named sub-stream of the top-level seed."""
        if stream not in SEED_STREAMS:
            raise RunConfigError(f"unknown seed stream {stream!r}")
        return int(np.random.SeedSequence([self.seed, zlib.crc32(stream.encode())]).generate_state(1)[0])

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


_SECTIONS = {"model": ModelConfig, "pretrain": PretrainSpec, "train": TrainConfig,
             "task": TaskSettings, "adapter": AdapterSettings}
_PATHS = ("out", "store", "checkpoint", "adapters")
_SCALARS = {"seed": int, "bandwidth_gbps": float, "reps": int}


def _section(cls, raw: Any, name: str):
    if not isinstance(raw, dict):
        raise RunConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(raw) - known
    if extra:
        raise RunConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"invalid {name!r} section: {exc}") from exc


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise RunConfigError("config root must be a mapping")
    known = set(_SECTIONS) | set(_PATHS) | set(_SCALARS) | {"domains", "strategies"}
    extra = set(raw) - known
    if extra:
        raise RunConfigError(f"unknown config keys: {sorted(extra)}")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    kw: dict[str, Any] = {"base_dir": base}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _section(cls, raw[name], name)
    for name in _PATHS:
        if name in raw:
            kw[name] = Path(raw[name])
    for name, typ in _SCALARS.items():
        if name in raw:
            if not isinstance(raw[name], (int, float)) or isinstance(raw[name], bool):
                raise RunConfigError(f"{name} must be a number")
            kw[name] = typ(raw[name])
    if "domains" in raw:
        doms = raw["domains"]
        if not isinstance(doms, list) or not doms:
            raise RunConfigError("domains must be a non-empty list")
        for d in doms:
            if d not in tasks.DOMAINS:
                raise RunConfigError(f"unsupported domain {d!r}")
        kw["domains"] = tuple(doms)
    if "strategies" in raw:
        try:
            kw["strategies"] = tuple(parse_strategy(str(s)) for s in raw["strategies"])
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc
    cfg = RunConfig(**kw)
    if cfg.bandwidth_gbps <= 0:
        raise RunConfigError("bandwidth_gbps must be positive")
    if cfg.reps < DEFAULT_REPS:
        raise RunConfigError(f"reps must be >= {DEFAULT_REPS}")
    if cfg.model.vocab_size < tasks.MIN_VOCAB:
        raise RunConfigError(f"model vocab must cover the task vocabulary ({tasks.MIN_VOCAB})")
    if cfg.seed < 0:
        raise RunConfigError("seed must be non-negative")
    # resolve relative paths against the config location
    for name in _PATHS:
        p = getattr(cfg, name)
        if not p.is_absolute():
            setattr(cfg, name, base / p)
    env = os.environ.get(STORE_ENV)
    if env:
        cfg.store = Path(env)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise RunConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise RunConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw, path.parent.resolve())
