"""Configuration loading: YAML files with dotted keys, presets and env overrides.

A config file may nest sections (``pipeline: {beta: 0.9}``) or use flat dotted
keys (``pipeline.beta: 0.9``); both forms resolve to the same settings.
Environment variables ``ASLSEG_<SECTION>_<KEY>`` override file values, e.g.
``ASLSEG_PIPELINE_BETA=0.8`` or ``ASLSEG_LOSS_LAMBDA_U=0.5``. Values are parsed
as YAML scalars.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import HU_WINDOW, MIN_TUMOR_PIXELS
from .errors import ConfigError
from .losses import LossWeights
from .models import SegmenterConfig
from .perturb import PerturbConfig
from .pipeline import PipelineConfig, Settings

ENV_PREFIX = "ASLSEG_"


@dataclass(frozen=True)
class DataConfig:
    window_lo: float = HU_WINDOW[0]
    window_hi: float = HU_WINDOW[1]
    min_tumor_pixels: int = MIN_TUMOR_PIXELS
    # label value (and above) counted as tumor; LiTS uses 1 = liver, 2 = tumor
    tumor_label: int = 2
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    labeled_fraction: float = 0.1
    partition_seed: int = 0
    synth_count: int = 200
    synth_size: int = 64
    tumor_free_fraction: float = 0.2


@dataclass(frozen=True)
class Config:
    data: DataConfig = DataConfig()
    model: SegmenterConfig = SegmenterConfig()
    loss: LossWeights = LossWeights()
    perturb: PerturbConfig = PerturbConfig()
    pipeline: PipelineConfig = PipelineConfig()

    @property
    def settings(self) -> Settings:
        return Settings(self.model, self.loss, self.perturb, self.pipeline)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTION_TYPES = {"data": DataConfig, "model": SegmenterConfig, "loss": LossWeights, "perturb": PerturbConfig,
                  "pipeline": PipelineConfig}


def flatten(d: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    """Nested mapping -> ``{"section.key": value}``; already-dotted keys pass through."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and key.count(".") == 0:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(section: str, key: str, value):
    cls = _SECTION_TYPES[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    if isinstance(value, list):
        return tuple(value)
    default = getattr(cls(), key)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_config(values: Mapping[str, Any]) -> Config:
    """Resolve dotted ``section.key`` values on top of the defaults."""
    per_section: dict[str, dict] = {s: {} for s in _SECTION_TYPES}
    for dotted, value in flatten(values).items():
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} must be of the form section.key")
        section, key = dotted.split(".", 1)
        if section not in per_section:
            raise ConfigError(f"unknown config section {section!r}")
        per_section[section][key] = _coerce(section, key, value)
    try:
        return Config(**{s: _SECTION_TYPES[s](**kw) for s, kw in per_section.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in _SECTION_TYPES or not key:
            continue
        out[f"{section}.{key}"] = yaml.safe_load(raw)
    return out


def preset_path(name: str) -> Path:
    return Path(str(resources.files("aslseg") / "presets" / f"{name}.yaml"))


def load_config(path_or_preset: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None) -> Config:
    """Load a YAML file (or a shipped preset name such as ``desk``), then apply env and explicit overrides."""
    values: dict[str, Any] = {}
    if path_or_preset is not None:
        path = Path(path_or_preset)
        if not path.exists() and preset_path(str(path_or_preset)).exists():
            path = preset_path(str(path_or_preset))
        if not path.is_file():
            raise ConfigError(f"config file {path_or_preset} not found")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(flatten(loaded))
    values.update(env_overrides(environ))
    values.update(flatten(overrides or {}))
    return build_config(values)
