"""Run configuration: a JSON document with `synth`, `train` and `inference`
sections plus a ``--set section.key=value`` override mechanism. Unknown
sections or keys are rejected before any work starts."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError
from .model import InferenceConfig
from .synth import SynthConfig
from .training import PRESETS, TrainConfig

_SECTIONS = ("synth", "train", "inference")


@dataclass
class RunConfig:
    synth: SynthConfig
    train: TrainConfig
    inference: InferenceConfig


def _build_section(cls, data: dict, presets: dict[str, dict] | None = None):
    data = dict(data)
    if presets is not None and "preset" in data:
        name = data.pop("preset")
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        data = {**presets[name], **data}
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _parse_override(item: str) -> tuple[str, str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} is not of the form section.key")
    section, field = key.split(".")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; choose from {list(_SECTIONS)}")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw  # bare strings such as preset names
    return section, field, value


def load_run_config(
    path=None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    sections = {name: dict(doc.get(name, {})) for name in _SECTIONS}
    for item in overrides:
        section, field, value = _parse_override(item)
        sections[section][field] = value
    if seed is not None:
        sections["synth"]["seed"] = seed
        sections["train"]["seed"] = seed
    return RunConfig(
        synth=_build_section(SynthConfig, sections["synth"]),
        train=_build_section(TrainConfig, sections["train"], presets=PRESETS),
        inference=_build_section(InferenceConfig, sections["inference"]),
    )
