"""Run configuration: dataclasses, layered resolution (defaults < file < flags), hashing.

Config files are YAML (or JSON) and may be nested or use flat dotted keys; both
resolve to the same thing.  Every key accepted on the command line is the
dotted path of a dataclass field, e.g. ``dag.importance_ratio``.  A few short
aliases exist (``dag.k``, ``dag.beta``, ``dag.K``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dag import DagConfig
from .errors import ConfigurationError
from .generator import GeneratorConfig
from .heads import HeadConfig
from .losses import LossWeights, StagePairSelection

ALIASES = {
    "dag.k": "dag.oversampling_ratio",
    "dag.beta": "dag.importance_ratio",
    "dag.K": "dag.n_patches",
    "lambda_nce": "loss_weights.lambda_nce",
    "lambda_idt": "loss_weights.lambda_idt",
}


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 1
    lr_g: float = 5e-5
    lr_d: float = 2e-4
    lr_heads: float = 5e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    decay_start_fraction: float = 0.5
    identity_half: bool = True
    seed: int = 0
    stop_gradient: bool = True
    disc_width: int = 64
    checkpoint_every: int = 10
    log_sampling: bool = True
    fid_every: int = 0
    fid_samples: int = 64
    device: str = "cpu"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dag: DagConfig = field(default_factory=DagConfig)
    stages: StagePairSelection = field(default_factory=StagePairSelection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if not 0.0 <= self.decay_start_fraction <= 1.0:
            raise ConfigurationError("decay_start_fraction must lie in [0, 1]")
        for name in ("lr_g", "lr_d", "lr_heads"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


@dataclass
class DataConfig:
    root: str | None = None
    image_size: int = 256
    shuffle_seed: int = 0
    flip: bool = False
    cache: bool = True


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return to_dict(self)


# -- generic dataclass <-> dict ------------------------------------------------

def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(cls, data: dict):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} key(s): {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        if dataclasses.is_dataclass(typ):
            value = from_dict(typ, value)
        elif typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def unflatten(flat: dict) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        key = ALIASES.get(key, key)
        parts = key.split(".")
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"key {key!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return nested


def flatten(nested: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _split_sections(nested: dict) -> dict:
    """Top-level keys other than ``data``/``train`` belong to the training section."""
    out = {"train": dict(nested.get("train", {})), "data": dict(nested.get("data", {}))}
    for k, v in nested.items():
        if k not in ("train", "data"):
            out["train"][k] = v
    return out


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return data or {}


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def resolve(file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Layer defaults < ``file_data`` < ``overrides``; both may use dotted keys."""
    layers = [_split_sections(unflatten(flatten(file_data or {}))),
              _split_sections(unflatten(overrides or {}))]
    merged = {"train": {}, "data": {}}
    for layer in layers:
        merged = _merge(merged, layer)
    return from_dict(RunConfig, merged)


def config_hash(cfg: TrainConfig) -> str:
    """Hash of the architecture-defining part of a config (what a checkpoint must agree with)."""
    model = {
        "generator": to_dict(cfg.generator),
        "heads": to_dict(cfg.heads),
        "disc_width": cfg.disc_width,
        "stages": to_dict(cfg.stages),
    }
    return hashlib.sha256(json.dumps(model, sort_keys=True).encode()).hexdigest()
