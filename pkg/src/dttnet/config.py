"""Run configuration: INI sections ``[run] [model] [spectral] [train] [data]``.

Every key has a default; unknown sections or keys are errors. ``--set
section.key=value`` overrides are applied after the file.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .spectral import SpectralConfig
from .training import TrainConfig

__all__ = ["ConfigError", "DataPaths", "RunConfig", "load_config", "dump_config", "parse_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataPaths:
    data_dir: str = ""
    patterns_dir: str = ""
    train_split: str = "train"
    valid_split: str = "valid"
    test_split: str = "test"
    pattern_ratio: str = "5,1,4"
    zero_fraction: float = 0.55
    pattern_gain: float = 1.0
    vocal_chops: str = "vocal_chops"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataPaths = field(default_factory=DataPaths)


def _scalar_fields(cls):
    return {f.name: f for f in fields(cls) if f.name not in ("spectral", "model", "train", "data")}


def _cast(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section.strip(), {})[name.strip()] = value
    return out


def load_config(path: str | Path | None = None, overrides=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for s, kv in parse_overrides(overrides).items():
        sections.setdefault(s, {}).update(kv)
    unknown = set(sections) - {"run", "model", "spectral", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    def values(section: str, cls, defaults):
        given = sections.get(section, {})
        known = _scalar_fields(cls)
        bad = set(given) - set(known)
        if bad:
            raise ConfigError(f"[{section}] unknown keys: {sorted(bad)}")
        return {k: _cast(v, getattr(defaults, k), f"{section}.{k}") for k, v in given.items()}

    try:
        run_kv = values("run", RunConfig, RunConfig())
        model_kv = values("model", ModelConfig, ModelConfig())
        source = model_kv.pop("source", "vocals")
        base = ModelConfig.for_source(source)
        spectral = replace(base.spectral, **values("spectral", SpectralConfig, base.spectral))
        model = replace(base, spectral=spectral, **model_kv)
        train = replace(TrainConfig(), **values("train", TrainConfig, TrainConfig()))
        data = replace(DataPaths(), **values("data", DataPaths, DataPaths()))
    except (ValueError, NotImplementedError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    return RunConfig(model=model, train=train, data=data, **run_kv)


def dump_config(cfg: RunConfig) -> str:
    """Every effective value, in a form ``load_config`` reads back identically."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def put(section, obj):
        parser[section] = {k: _fmt(getattr(obj, k)) for k in _scalar_fields(type(obj))}

    parser["run"] = {"seed": str(cfg.seed)}
    put("model", cfg.model)
    put("spectral", cfg.model.spectral)
    put("train", cfg.train)
    put("data", cfg.data)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
