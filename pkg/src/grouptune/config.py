"""Experiment configuration: one JSON document drives a whole run.

Sections: ``dataset`` (what to train on), ``split`` (how to divide it into
labeled / unlabeled / test), ``train`` (every trainer knob), plus
``out_dir``, ``seeds`` (used by the ablation harness) and an optional
``pretrained_checkpoint``. Unknown keys are rejected by name so a typo
cannot silently fall back to a default. parse -> serialize -> parse is the
identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .datagen import (Dataset, SplitData, load_csv, load_image_dir,
                      make_gaussian_mixture, split_label_proportion,
                      split_per_class_count)
from .trainer import TrainConfig

DATASET_KINDS = ("gaussian_mixture", "csv", "image_dir")
SPLIT_MODES = ("proportion", "per_class")


class ConfigError(ValueError):
    """A configuration document failed validation."""


@dataclass
class DatasetSpec:
    kind: str = "gaussian_mixture"
    num_categories: int = 8
    dim: int = 32
    per_class: int = 60
    separation: float = 3.0
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, "
                              f"got {self.kind!r}")
        if self.kind != "gaussian_mixture" and not self.path:
            raise ConfigError(f"dataset.path is required for kind "
                              f"{self.kind!r}")


@dataclass
class SplitSpec:
    mode: str = "proportion"
    proportion: float = 0.1
    per_class: int = 4
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"split.mode must be one of {SPLIT_MODES}, "
                              f"got {self.mode!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/run"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    pretrained_checkpoint: Optional[str] = None


def _from_dict(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key '{section}.{key}'")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"dataset", "split", "train", "out_dir", "seeds",
             "pretrained_checkpoint"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    seeds = raw.get("seeds", [0, 1, 2])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        raise ConfigError("'seeds' must be a nonempty list of integers")
    out_dir = raw.get("out_dir", "runs/run")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("'out_dir' must be a nonempty string")
    pretrained = raw.get("pretrained_checkpoint")
    if pretrained is not None and not isinstance(pretrained, str):
        raise ConfigError("'pretrained_checkpoint' must be a string or null")
    return ExperimentConfig(
        dataset=_from_dict(DatasetSpec, raw.get("dataset", {}), "dataset"),
        split=_from_dict(SplitSpec, raw.get("split", {}), "split"),
        train=_from_dict(TrainConfig, raw.get("train", {}), "train"),
        out_dir=out_dir, seeds=list(seeds), pretrained_checkpoint=pretrained)


def serialize_config(config: ExperimentConfig) -> dict:
    raw = dataclasses.asdict(config)
    raw["train"]["hidden_dims"] = list(config.train.hidden_dims)
    return raw


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")
    return parse_config(raw)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings to a raw config dict.

    Values parse as JSON literals when possible (``0.01``, ``true``,
    ``[64,32]``) and fall back to plain strings.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, value = item.partition("=")
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: '{part}' is not a "
                                  "section")
        node[parts[-1]] = parsed
    return raw


def build_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "gaussian_mixture":
        return make_gaussian_mixture(spec.num_categories, spec.dim,
                                     spec.per_class, spec.separation,
                                     seed=spec.seed)
    if spec.kind == "csv":
        return load_csv(spec.path, spec.num_categories)
    return load_image_dir(spec.path, spec.num_categories)


def build_splits(config: ExperimentConfig) -> SplitData:
    data = build_dataset(config.dataset)
    if config.split.mode == "proportion":
        return split_label_proportion(data, config.split.proportion,
                                      config.split.test_fraction,
                                      seed=config.split.seed)
    return split_per_class_count(data, config.split.per_class,
                                 config.split.test_fraction,
                                 seed=config.split.seed)
