"""Run configuration: one INI-style file, strict keys, CLI overrides.

Sections map onto the dataclasses they fill: [model] -> ModelConfig,
[train] -> TrainConfig, [loss] -> LossWeights, [data] -> corpus paths.
Unknown sections or keys are rejected rather than ignored, and the
resolved merge is echoed into every run directory so the run can be
reproduced from its own artifacts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig, config_fingerprint


@dataclass
class DataConfig:
    corpus: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def fingerprint(self) -> str:
        return config_fingerprint(self.model, self.train)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig,
             "loss": LossWeights, "data": DataConfig}


def _coerce(raw: str, target_type, key: str):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def _field_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, type) else {"int": int, "float": float,
                                                     "bool": bool, "str": str}.get(str(f.type))
        out[f.name] = t
    return out


def _apply(values: dict[str, dict[str, str]]) -> RunConfig:
    kwargs: dict[str, dict] = {"model": {}, "train": {}, "loss": {}, "data": {}}
    for section, pairs in values.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        types = _field_types(_SECTIONS[section])
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {section}.{key}")
            t = types[key]
            if t is None:
                raise ConfigError(f"config key {section}.{key} is not settable from text")
            kwargs[section][key] = _coerce(raw, t, f"{section}.{key}")
    weights = LossWeights(**kwargs["loss"])
    train = TrainConfig(weights=weights, **kwargs["train"])
    return RunConfig(model=ModelConfig(**kwargs["model"]), train=train,
                     data=DataConfig(**kwargs["data"]))


def parse_overrides(items) -> dict[str, dict[str, str]]:
    """Turn CLI 'section.key=value' strings into the nested layout."""
    out: dict[str, dict[str, str]] = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return out


def load_config(path: Optional[str] = None, overrides=None) -> RunConfig:
    """Read the INI file (optional), apply overrides, validate."""
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no such config file: {p}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive
        try:
            parser.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        for section in parser.sections():
            values[section] = dict(parser.items(section))
    for section, pairs in (overrides or {}).items():
        values.setdefault(section, {}).update(pairs)
    return _apply(values)


def resolved_text(cfg: RunConfig) -> str:
    """The full configuration, every key explicit, as INI text."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    weights = cfg.train.weights
    train_items = {k: v for k, v in dataclasses.asdict(cfg.train).items()
                   if k != "weights"}
    for name, obj in (("model", dataclasses.asdict(cfg.model)),
                      ("train", train_items),
                      ("loss", dataclasses.asdict(weights)),
                      ("data", dataclasses.asdict(cfg.data))):
        parser[name] = {k: str(v) for k, v in obj.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.resolved.ini"
    target.write_text(resolved_text(cfg))
    return target
