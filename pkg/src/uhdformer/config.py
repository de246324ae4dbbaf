"""Run configuration: an INI file with ``[model]``, ``[train]`` and ``[data]``
sections, merged with ``section.key=value`` overrides.

Every key is checked against the dataclass it feeds, so a typo fails before
any work starts instead of being silently ignored.

Example::

    [model]
    C = 8
    L = 6

    [train]
    total_steps = 500
    lr0 = 5e-4

    [data]
    manifest = pairs/manifest.tsv
    checkpoint = run/model.ckpt
    log = run/train.log
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import UHDformerConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    manifest: str | None = None
    checkpoint: str = "model.ckpt"
    log: str | None = None


SECTIONS = {"model": UHDformerConfig, "train": TrainConfig, "data": DataConfig}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str, default):
    text = raw.strip()
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    if default is None and text.lower() in ("", "none"):
        return None
    return text


@dataclass
class CliConfig:
    model: UHDformerConfig = field(default_factory=UHDformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r} (sections: {', '.join(SECTIONS)})")
        target = getattr(self, section)
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(target, key, _coerce(section, key, raw, getattr(type(target)(), key)))

    def validate(self) -> "CliConfig":
        self.model.validate()
        self.train.validate(self.model.s)
        return self

    def lines(self) -> list[str]:
        """``section.key = value`` for every setting, in a stable order."""
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            out += [f"{section}.{f.name} = {getattr(obj, f.name)}" for f in fields(obj)]
        return out


def load_config(path=None, overrides=()) -> CliConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides.

    Relative ``[data]`` paths in a file are taken relative to that file.
    """
    cfg = CliConfig()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str  # keep "C" and "L" as written
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw)
        for key in ("manifest", "checkpoint", "log"):
            value = getattr(cfg.data, key)
            if value and parser.has_option("data", key) and not Path(value).is_absolute():
                setattr(cfg.data, key, str(path.parent / value))
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg.set(dotted.strip(), raw)
    return cfg.validate()
