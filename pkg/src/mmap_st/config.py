"""Configuration records and TOML loading.

A config file has one table per section (``[data]``, ``[ingest]``, ``[synth]``, ``[model]``,
``[train]``, ``[bank]``, ``[eval]``); keys mirror the dataclass fields below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError


@dataclass
class IngestConfig:
    n_hvg: int = 1000
    min_spots: int = 1000
    patch_size: int = 112


@dataclass
class SynthConfig:
    n_slides: int = 4
    spots_per_slide: int = 64
    n_genes: int = 8
    patch_size: int = 32
    image_size: int = 0  # 0 -> smallest square that fits the spot grid
    noise: float = 0.0
    n_test_slides: int = 1
    n_patients: int = 2
    layout: str = "regions"  # regions | blobs
    n_tissue_types: int = 4


@dataclass
class ModelConfig:
    input_size: int = 112
    vit_patch: int = 16
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    fusion_layers: int = 2
    fusion_heads: int = 4
    global_heads: int = 4
    pos_hidden: int = 16
    lora_rank: int = 0
    lora_alpha: float = 1.0
    mlp1_input: str = "e2"  # e2 | e0


@dataclass
class TrainConfig:
    lr_max: float = 1e-5
    lr_min: float = 0.0
    epochs: int = 50
    batch_size: int = 16
    gamma1: float = 0.3
    gamma2: float = 0.3
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    jitter: float = 0.1
    stage2_epochs: int = 0  # 0 -> same as epochs

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if self.stage2_epochs < 0:
            raise ConfigError("stage2_epochs must be >= 0")


@dataclass
class BankConfig:
    k_min: int = 32
    k_max: int = 80
    prototypes: str = "adaptive"  # "adaptive" or a positive integer as text
    aggregation: str = "cross_attn"  # cross_attn | cross_attn_pos | mean | sum


@dataclass
class EvalConfig:
    cluster_k: int = 5
    split: str = "test"


@dataclass
class DataConfig:
    root: str = ""


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        for section, values in (data or {}).items():
            if not hasattr(cfg, section):
                raise ConfigError(f"unknown config section [{section}]")
            update_section(getattr(cfg, section), values, section)
        return cfg


def update_section(obj, values, section="?"):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        current = getattr(obj, key)
        try:
            if isinstance(current, bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                value = bool(value)
            elif isinstance(current, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            else:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {value!r}") from exc
        setattr(obj, key, value)


def load_config(path=None):
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data)


def config_hash(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
