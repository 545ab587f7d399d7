"""INI run configuration with strict key checking.

Each section maps onto one dataclass; keys must be field names of that
dataclass. The effective configuration (defaults filled in) can be written
back out and reloads to an identical object.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .adaptation import OptimConfig
from .errors import DomainError
from .feature_alignment import AlignConfig
from .losses import LossWeights
from .networks import ArchitectureConfig


class ConfigError(DomainError):
    """Invalid configuration; the message names the offending ``section.key``."""


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    sequences: Tuple[str, ...] = ()
    format: str = "kitti"

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.format not in ("kitti", "tum"):
            raise DomainError("format must be 'kitti' or 'tum'")


@dataclass(frozen=True)
class OnlineConfig:
    mode: str = "meta"
    alpha: float = 1e-4
    second_order: bool = False
    lstm: bool = True
    fa: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "out"
    desk_scale: bool = False


SECTIONS = {
    "data": DataConfig,
    "model": ArchitectureConfig,
    "optim": OptimConfig,
    "loss": LossWeights,
    "align": AlignConfig,
    "online": OnlineConfig,
    "run": RunSection,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    align: AlignConfig = field(default_factory=AlignConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    run: RunSection = field(default_factory=RunSection)

    def replace(self, section: str, **kw) -> "RunConfig":
        try:
            new = dataclasses.replace(getattr(self, section), **kw)
        except DomainError as e:
            raise ConfigError(f"{section}: {e}") from e
        return dataclasses.replace(self, **{section: new})


def _parse(text: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.strip().lower() in ("", "none"):
            return None
        return _parse(text, next(a for a in args if a is not type(None)), where)
    if origin in (tuple, Tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(_parse(s, args[0], where) for s in items)
    if tp is bool:
        v = text.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    try:
        return tp(text.strip())
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    built = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        kw = {}
        for key, raw in cp.items(section):
            if key not in hints:
                raise ConfigError(f"{section}.{key}: unknown key")
            kw[key] = _parse(raw, hints[key], f"{section}.{key}")
        try:
            built[section] = cls(**kw)
        except DomainError as e:
            raise ConfigError(f"{section}: {e}") from e
    cfg = RunConfig(**built)
    if cfg.data.root and base_dir is not None and not Path(cfg.data.root).is_absolute():
        cfg = cfg.replace("data", root=str((base_dir / cfg.data.root).resolve()))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = parse_config(path.read_text(), path.parent)
    if cfg.data.root and not Path(cfg.data.root).exists():
        raise ConfigError(f"data.root: path {cfg.data.root} does not exist")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
