"""``key = value`` configuration files and the bundled presets."""

from __future__ import annotations

import configparser
import dataclasses
import os
from importlib import resources
from pathlib import Path

from ttmoe.errors import ConfigError
from ttmoe.model import ModelConfig
from ttmoe.router import RouterConfig
from ttmoe.train import TrainConfig

SEED_ENV = "TTMOE_SEED"


def preset_path(name: str) -> Path:
    path = resources.files("ttmoe") / "presets" / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return Path(str(path))


def list_presets() -> list[str]:
    folder = resources.files("ttmoe") / "presets"
    return sorted(p.name[:-4] for p in folder.iterdir() if p.name.endswith(".ini"))


def read_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parser


def _convert(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return None if raw.strip().lower() in ("none", "") else float(raw)
    return raw.strip()


def section_to(cls, parser: configparser.ConfigParser, section: str, **overrides):
    """Build dataclass ``cls`` from ``section``; unknown keys are an error."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    values = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"[{section}] has unknown key {key!r}")
            try:
                values[key] = _convert(raw, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def model_config(parser) -> ModelConfig:
    return section_to(ModelConfig, parser, "model")


def train_config(parser, seed=None) -> TrainConfig:
    return section_to(TrainConfig, parser, "train", seed=seed)


def router_config(parser, seed=None) -> RouterConfig:
    return section_to(RouterConfig, parser, "router", seed=seed)


def resolve_seed(cli_seed: int | None) -> int | None:
    """Explicit flag wins, then ``TTMOE_SEED``; ``None`` keeps the config's own seed."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
