"""INI run configuration whose sections mirror the config dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .models import EncoderConfig
from .phantom import PhantomSpec
from .train import ProbeConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    run_id: str = "run"
    manifest: str = ""
    out_dir: str = "runs"
    split_seed: int = 0
    ratios: tuple[int, int, int] = (8, 1, 1)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """New config with ``values`` replacing fields of ``section``; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        unknown = set(values) - {f.name for f in dataclasses.fields(current)}
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
        try:
            updated = type(current)(**{**asdict(current), **values})
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        return dataclasses.replace(self, **{section: updated})


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        item = args[0]
        return tuple(_coerce(p, item, key) for p in raw.split(",") if p.strip())
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if hint in (int, float, str):
        try:
            return hint(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected {hint.__name__}, got {raw!r}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return "none" if value is None else str(value)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Defaults overlaid with the INI file at ``path``; unknown sections or keys raise."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        current = getattr(cfg, section)
        hints = typing.get_type_hints(type(current))
        values = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
            values[key] = _coerce(raw, hints[key], f"[{section}] {key}")
        cfg = cfg.with_overrides(section, **values)
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        parser[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def config_text(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format(v)}" for k, v in asdict(getattr(cfg, name)).items())
    return "\n".join(lines)
