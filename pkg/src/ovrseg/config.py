"""Run configuration: a YAML file with model, training, and data settings.

Every field is defaulted, so a config containing only a manifest path is
valid. Unknown keys are rejected at any level to catch typos early. The
top-level seed feeds both the model and trainer seeds unless those are given
explicitly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

from .model import ModelConfig
from .training import ITER_PRESETS, TrainConfig


class ConfigError(ValueError):
    """Invalid or unparseable run configuration."""


@dataclass
class RunConfig:
    manifest: str = ""
    output_dir: str = "runs"
    seed: int = 0
    iters_preset: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def require_manifest(self) -> None:
        if not self.manifest:
            raise ConfigError("missing required field: manifest")


def _build_section(cls, d: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    coerced = dict(d)
    for key in ("angles", "guidance_patch_sizes", "guidance_dims"):
        if key in coerced and isinstance(coerced[key], list):
            coerced[key] = tuple(coerced[key])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} config: {e}") from e


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    for section in ("model", "train"):
        if not isinstance(d.get(section) or {}, dict):
            raise ConfigError(f"{section} section must be a mapping")
    model_d = dict(d.get("model") or {})
    train_d = dict(d.get("train") or {})
    model_d.setdefault("seed", seed)
    train_d.setdefault("seed", seed)
    preset = str(d.get("iters_preset", ""))
    if preset:
        if preset.lower() not in ITER_PRESETS:
            raise ConfigError(f"unknown iters_preset {preset!r}; available: {sorted(ITER_PRESETS)}")
        train_d.setdefault("max_iters", ITER_PRESETS[preset.lower()])
    return RunConfig(
        manifest=str(d.get("manifest", "")),
        output_dir=str(d.get("output_dir", "runs")),
        seed=seed,
        iters_preset=preset,
        model=_build_section(ModelConfig, model_d, "model"),
        train=_build_section(TrainConfig, train_d, "train"),
    )


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path!r}: {e}") from e
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    """JSON-serializable snapshot (tuples become lists) for checkpoints."""

    def clean(v: Any) -> Any:
        if isinstance(v, tuple):
            return [clean(x) for x in v]
        if dataclasses.is_dataclass(v):
            return {f.name: clean(getattr(v, f.name)) for f in dataclasses.fields(v)}
        return v

    return clean(config)
