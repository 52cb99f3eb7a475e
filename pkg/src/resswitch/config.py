"""Run configuration: YAML file with ``model``, ``data`` and ``train`` sections.

Command-line overrides use ``section.key=value``; a bare ``key=value`` is
accepted when the key name is unique across sections.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from .data import AugmentationConfig, load_image_folder, load_index_file
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "cifar-resnet8"
    resolutions: Tuple[int, ...] = (32, 24, 16)
    num_classes: int = 10


@dataclass
class DataConfig:
    source: str = "shapes"          # shapes | folder | index
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    n_train: int = 5000
    n_val: int = 1000
    image_size: int = 40
    data_seed: int = 0
    area_range: Tuple[float, float] = (0.08, 1.0)
    aspect_range: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_probability: float = 0.5
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(tuple(self.area_range), tuple(self.aspect_range),
                                  self.hflip_probability, "bilinear", tuple(self.mean), tuple(self.std))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig}


def valid_keys() -> List[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def _coerce(cls, name, value):
    f = {f.name: f for f in dataclasses.fields(cls)}[name]
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(value, list):
        value = tuple(value)
    elif isinstance(default, tuple) and not isinstance(value, tuple):
        value = (value,)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{name} expects true/false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) \
            and value.is_integer():
        value = int(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def _build(raw: dict) -> RunConfig:
    unknown = [k for k in raw if k not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; valid keys: {', '.join(valid_keys())}")
    parts = {}
    for section, cls in SECTIONS.items():
        values = raw.get(section) or {}
        names = {f.name for f in dataclasses.fields(cls)}
        bad = [k for k in values if k not in names]
        if bad:
            raise ConfigError(f"unknown key(s) {[f'{section}.{k}' for k in bad]}; "
                              f"valid keys: {', '.join(valid_keys())}")
        try:
            parts[section] = cls(**{k: _coerce(cls, k, v) for k, v in values.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {section} settings: {e}") from e
    return RunConfig(**parts)


def to_dict(cfg: RunConfig) -> dict:
    def plain(v):
        return list(v) if isinstance(v, tuple) else v

    return {s: {k: plain(v) for k, v in dataclasses.asdict(getattr(cfg, s)).items()} for s in SECTIONS}


def apply_overrides(raw: dict, overrides) -> dict:
    raw = {s: dict(raw.get(s) or {}) for s in set(raw) | set(SECTIONS)}
    keys = valid_keys()
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        key = key.strip()
        if "." not in key:
            matches = [k for k in keys if k.split(".", 1)[1] == key]
            if len(matches) != 1:
                raise ConfigError(f"unknown or ambiguous key {key!r}; valid keys: {', '.join(keys)}")
            key = matches[0]
        if key not in keys:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(keys)}")
        section, name = key.split(".", 1)
        value = yaml.safe_load(text)
        if isinstance(value, str) and "," in value:
            value = [yaml.safe_load(v) for v in value.split(",")]
        raw[section][name] = value
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    return _build(apply_overrides(raw, overrides))


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def load_datasets(data: DataConfig):
    """``(train_set, val_set)`` for the configured source."""
    if data.source == "shapes":
        from .synthetic import make_shapes

        return (make_shapes(data.n_train, data.image_size, seed=data.data_seed),
                make_shapes(data.n_val, data.image_size, seed=data.data_seed + 10_000))
    loader = {"folder": load_image_folder, "index": load_index_file}.get(data.source)
    if loader is None:
        raise ConfigError(f"unknown data source {data.source!r}; choose shapes, folder or index")
    if not data.train_path:
        raise ConfigError(f"data.source={data.source} needs data.train_path")
    train = loader(data.train_path)
    val = loader(data.val_path) if data.val_path else None
    return train, val
