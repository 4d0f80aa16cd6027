"""Run configuration: flat ``section.key = value`` text, plus seeded sub-streams."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .train import TrainConfig
from .vit import ROUTER_KINDS, ViTConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10
    path: str = ""
    train_subset: int = 5000
    test_subset: int = 0  # 0 keeps the whole test split
    num_classes: int = 8  # synthetic only
    per_class: int = 64
    test_per_class: int = 32
    noise: float = 20.0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.source must be synthetic or cifar10, got {self.source!r}")


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    @property
    def router(self) -> str:
        return self.model.router

    def with_overrides(self, seed=None, router=None, output_dir=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=seed))
        if router is not None:
            if router not in ROUTER_KINDS:
                raise ConfigError(f"--router must be one of {ROUTER_KINDS}")
            cfg = replace(cfg, model=replace(cfg.model, router=router))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        return cfg


_SECTIONS = {"model": ViTConfig, "train": TrainConfig, "data": DataConfig}


def _convert(raw: str, current, where: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw.strip("\"'")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse dotted-key text. Blank lines and ``#`` comments are ignored.

    Router may be set as ``router = ...`` or ``model.router = ...``.
    """
    values = {name: {} for name in _SECTIONS}
    top = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "router":
            key = "model.router"
        section, _, name = key.partition(".")
        if section in _SECTIONS and name:
            cls = _SECTIONS[section]
            if name not in {f.name for f in fields(cls)}:
                raise ConfigError(f"{where}: unknown key {key!r}")
            values[section][name] = _convert(raw, getattr(cls(), name), f"{where} ({key})")
        elif key == "output_dir":
            top["output_dir"] = raw.strip("\"'")
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return RunConfig(**{s: cls(**values[s]) for s, cls in _SECTIONS.items()}, **top)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{section}.{f.name} = {v}")
    lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream (``data``, ``init``, ``shuffle``, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
