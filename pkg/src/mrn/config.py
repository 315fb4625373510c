"""Run configuration: nested dataclasses loaded from YAML/JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import MRNConfig
from .rois import RoiSpec, canonical_roi_specs, toy_roi_specs
from .synth import SynthConfig
from .train import TrainConfig


@dataclass
class RoiConfig:
    preset: str = "canonical"
    target_size: int = 224

    def specs(self) -> dict[str, RoiSpec]:
        if self.preset == "canonical":
            return {n: dataclasses.replace(s, target_size=self.target_size) for n, s in canonical_roi_specs().items()}
        if self.preset == "toy":
            return toy_roi_specs(self.target_size)
        raise ConfigError(f"unknown ROI preset {self.preset!r}")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    model: MRNConfig = field(default_factory=MRNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def build(cls, data):
    """Instantiate dataclass ``cls`` from a (possibly partial) nested dict."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = build(hint, value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return convert(obj)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(to_dict(obj), sort_keys=True).encode()).hexdigest()[:16]


def load_run_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return build(RunConfig, data or {})


def save_run_config(config: RunConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
