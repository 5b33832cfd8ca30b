"""Experiment configuration: dataclass tree, YAML round-trip, dotted overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from .conv import ConvConfig
from .errors import InvalidConfigError
from .heads import TaskSpec
from .phantoms import PhantomSpec
from .volume import AugmentConfig
from .vit import ViTConfig

OUTPUT_ROOT_ENV = "VOXMAE_OUTPUT_ROOT"


@dataclass
class BackboneConfig:
    arch: str = "vit"
    vit: ViTConfig = field(default_factory=ViTConfig)
    conv: ConvConfig = field(default_factory=ConvConfig)
    checkpoint: Optional[str] = None  # pretrained weights for adaptation commands

    def active(self):
        if self.arch == "vit":
            return self.vit
        if self.arch == "conv":
            return self.conv
        raise InvalidConfigError(f"unknown backbone arch {self.arch!r}")


@dataclass
class DataConfig:
    phantom: Optional[PhantomSpec] = field(default_factory=PhantomSpec)
    root: Optional[str] = None  # cohort directory with manifest.tsv; overrides phantom
    split_seed: int = 0
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(zoom_range=(1.0, 1.0)))


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_steps: int = 40
    checkpoint_every: int = 100
    seed: int = 0
    augment: bool = True


@dataclass
class AdaptConfig:
    regime: Optional[str] = None  # None -> the task's own adaptation field
    base_lr: float = 1e-3
    llrd_decay: float = 0.75
    epochs: int = 100
    batch_size: int = 8
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    schedule: str = "cosine"
    seed: int = 0
    runs: int = 3
    sweep_sizes: Tuple[int, ...] = (8, 16, 32, 64, 128)


@dataclass
class EvalConfig:
    level: float = 0.80
    comparisons: List[Tuple[str, str]] = field(default_factory=list)
    models: Dict[str, str] = field(default_factory=dict)  # report label -> experiment directory


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tasks: Dict[str, TaskSpec] = field(default_factory=dict)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = ""


# ---------------------------------------------------------------------------
# dict conversion


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _convert(tp, value):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        return None
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value)
    if origin in (tuple, Tuple):
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        return tuple(_convert(a, v) for a, v in zip(args, value)) if args else tuple(value)
    if origin in (list, List):
        return [_convert(args[0], v) for v in value] if args else list(value)
    if origin in (dict, Dict):
        return {k: _convert(args[1], v) for k, v in value.items()}
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v) for k, v in data.items()}
    return cls(**kwargs)


def dump_yaml(cfg) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse_yaml(text: str, cls=None):
    cls = cls or ExperimentConfig
    return from_dict(cls, yaml.safe_load(text) or {})


def _parse_value(raw: str):
    return yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings to a nested dict (values parsed as YAML)."""
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise InvalidConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=None, defaults=None) -> ExperimentConfig:
    """Resolve defaults < file < overrides into an :class:`ExperimentConfig`."""
    base = to_dict(defaults if defaults is not None else ExperimentConfig())
    if path is not None:
        text = Path(path).read_text()
        file_data = yaml.safe_load(text) or {}
        base = _merge(base, file_data)
    base = apply_overrides(base, overrides)
    return from_dict(ExperimentConfig, base)


def _merge(a, b):
    if isinstance(a, dict) and isinstance(b, dict):
        out = dict(a)
        for k, v in b.items():
            out[k] = _merge(a.get(k), v) if k in a and k != "tasks" else v
        return out
    return b


def default_output_root():
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")
