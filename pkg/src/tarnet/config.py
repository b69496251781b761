"""Run configuration: an INI file with sections frontend, encoder, pooling,
train and data, plus command-line overrides.

Every key has a typed default; unknown sections or keys are rejected so a
typo never silently falls back to a default. :func:`dump_config` writes the
effective configuration in the same format, and loading that dump
reproduces it exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigurationError, DataError, UsageError
from .frontend import FrontendConfig
from .model import ModelConfig
from .pooling import POOLING_KINDS
from .train import TrainConfig


@dataclass
class PoolingConfig:
    kind: str = "asp"
    attention_hidden: int = 128
    embed_dim: int = 192

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise UsageError(f"unknown pooling kind {self.kind!r}; choose from {', '.join(POOLING_KINDS)}")


@dataclass
class DataConfig:
    n_speakers: int = 10
    utt_per_spk: int = 50
    duration: float = 2.0
    seed: int = 0
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def model_config(self, n_speakers: int) -> ModelConfig:
        return ModelConfig(
            n_mels=self.frontend.n_mels,
            n_speakers=n_speakers,
            embed_dim=self.pooling.embed_dim,
            pooling=self.pooling.kind,
            attention_hidden=self.pooling.attention_hidden,
            encoder=self.encoder,
        )

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        rc = cls()
        for name, values in d.items():
            rc = rc.replace(name, **values)
        return rc

    def replace(self, section: str, **values) -> RunConfig:
        """Copy with some keys of one section changed (validated again)."""
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        current = getattr(self, section)
        known = {f.name for f in fields(current)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        return dataclasses.replace(self, **{section: dataclasses.replace(current, **values)})


SECTIONS = ("frontend", "encoder", "pooling", "train", "data")


def _field_types(section_cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(section_cls)}


def _parse_value(section: str, key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if "list" in type_name:
            return [int(v) for v in raw.replace(",", " ").split()]
        if "None" in type_name and raw.lower() in ("", "none"):
            return None
        if type_name.startswith("int"):
            return int(raw)
        if type_name.startswith("float"):
            return float(raw)
        if type_name.startswith("bool"):
            return raw.lower() in ("1", "true", "yes", "on")
        return raw
    except ValueError:
        raise ConfigurationError(f"[{section}] {key} = {raw!r} is not a valid {type_name}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    rc = base or RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]; expected one of {', '.join(SECTIONS)}")
        types = _field_types(type(getattr(rc, section)))
        values = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigurationError(f"unknown key in [{section}]: {key}")
            values[key] = _parse_value(section, key, raw, types[key])
        rc = rc.replace(section, **values)
    return rc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_config(path.read_text())


def format_config(rc: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        section = getattr(rc, name)
        parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump_config(rc: RunConfig, path) -> None:
    Path(path).write_text(format_config(rc))
