"""Experiment configuration files (JSON, schema-versioned, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import Split, SyntheticSpec, generate_synthetic, load_dataset
from .errors import ConfigError
from .ila import IlaConfig, grid_chain
from .pretrain import PretrainConfig
from .train import TrainConfig
from .vit import ViTConfig

SCHEMA_VERSION = 1


class DataConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    synthetic: Optional[SyntheticSpec] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self) -> "DataConfig":
        if (self.synthetic is None) == (self.path is None):
            raise ValueError("data needs exactly one of 'synthetic' or 'path'")
        return self

    @property
    def name(self) -> str:
        return "synthetic" if self.synthetic is not None else Path(self.path).name

    def load(self, image_size: Optional[int] = None) -> tuple[Split, Split]:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return load_dataset(self.path, image_size)


def _default_data() -> DataConfig:
    return DataConfig(synthetic=SyntheticSpec())


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    model: ViTConfig = Field(default_factory=ViTConfig)
    adapter: IlaConfig = Field(default_factory=IlaConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=_default_data)
    pretrain: Optional[PretrainConfig] = None
    output_dir: str = "runs/default"
    seeds: list[int] = Field(default_factory=lambda: [0])
    probe_size: int = 64

    @model_validator(mode="after")
    def _cross_check(self) -> "ExperimentConfig":
        # everything checkable without touching data or allocating a model
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.probe_size < 2:
            raise ValueError("probe_size must be >= 2")
        try:
            grid_chain(self.model, self.adapter)
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        if self.adapter.variant.value == "ila+" and self.model.depth % 6:
            raise ValueError(f"ila+ needs depth divisible by 6, got {self.model.depth}")
        syn = self.data.synthetic
        if syn is not None:
            if syn.num_classes != self.model.num_classes:
                raise ValueError(f"data has {syn.num_classes} classes but the model head has {self.model.num_classes}")
            check_warmup(self.training, syn.num_classes * syn.samples_per_class_train)
        if self.pretrain is not None and self.pretrain.source.image_size != self.model.image_size:
            raise ValueError(
                f"pretrain source images are {self.pretrain.source.image_size}px, model expects {self.model.image_size}px"
            )
        return self


def check_warmup(training: TrainConfig, num_train: int) -> None:
    total = training.total_steps(num_train)
    if training.epochs and training.warmup_steps >= total:
        raise ValueError(f"warmup_steps {training.warmup_steps} must be below total steps {total} ({num_train} images)")


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None


def read_raw(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(read_raw(path))


def apply_overrides(raw: dict, **overrides) -> dict:
    """Fold CLI flags into a raw config dict (``None`` values are ignored)."""
    raw = json.loads(json.dumps(raw))
    mapping = {
        "variant": ("adapter", "variant"),
        "rsds": ("adapter", "rsds_mode"),
        "image_size": ("model", "image_size"),
        "out": (None, "output_dir"),
        "seeds": (None, "seeds"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        section, field = mapping[key]
        target = raw if section is None else raw.setdefault(section, {})
        target[field] = value
    return raw


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
