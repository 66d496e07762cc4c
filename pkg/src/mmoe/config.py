"""Run configuration: typed sections, strict JSON parsing, named presets."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 512
    vocab_text: int = 512
    max_seq_len: int = 256
    tie_head: bool = False
    rope_base: float = 10000.0
    attn_out_bias: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")


@dataclass
class MoEConfig:
    n_experts: int = 16
    top_k: int = 4
    renormalize_gates: bool = False
    aux_load_balance_weight: float = 0.0
    noise_bias_init: float = -10.0
    partition_seed: int = 0

    def validate(self, model: ModelConfig | None = None) -> None:
        if self.n_experts < 2:
            raise ConfigError("an MoE layer needs at least 2 experts")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if model is not None and model.d_ffn % self.n_experts:
            raise ConfigError(f"d_ffn {model.d_ffn} not divisible by n_experts {self.n_experts}")


@dataclass
class PLoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: list[str] = field(default_factory=lambda: ["query", "key", "value", "out"])

    def validate(self) -> None:
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        bad = set(self.targets) - {"query", "key", "value", "out"}
        if bad:
            raise ConfigError(f"unknown adapter targets {sorted(bad)}")


@dataclass
class VocabConfig:
    vocab_image: int = 256
    n_special: int = 2
    init_scheme: str = "gw"

    def validate(self) -> None:
        if self.init_scheme not in ("random", "mean", "gw"):
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        if self.vocab_image < 1 or self.n_special < 0:
            raise ConfigError("vocab_image must be >= 1 and n_special >= 0")


@dataclass
class GWConfig:
    epsilon: float | None = None
    epsilon_scale: float = 5e-3
    max_outer: int = 200
    max_sinkhorn: int = 500
    tol: float = 1e-7
    metric: str = "euclidean"
    geometry: str = "cooccurrence"
    geometry_dim: int = 16
    window: int = 2
    codebook_path: str | None = None
    anchors: int = 1024


@dataclass
class DataConfig:
    table_seed: int = 1234
    n_classes: int = 8
    text_len: int = 16
    text_branching: int = 4
    text_skip_weight: float = 0.3
    image_branching: int = 4
    image_class_weight: float = 0.5
    image_text_overlap: float = 0.5
    low_image_len: int = 16
    high_image_len: int = 64
    low_samples: int = 8000
    high_samples: int = 7000
    epochs_per_stage: int = 5
    pretrain_samples: int = 4000
    pretrain_len: int = 48
    eval_text_samples: int = 200
    eval_image_samples: int = 100
    probe_samples: int = 64


@dataclass
class TrainConfig:
    lr_max: float = 2e-3
    lr_min: float = 2e-4
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    batch_size: int = 16
    grad_accum: int = 1
    mode: str = "plora"
    seed: int = 0
    loss_on: str = "new"
    max_steps_per_stage: int | None = None
    pretrain_steps: int = 600
    pretrain_lr: float = 3e-3
    moe_adapt_steps: int = 300
    moe_adapt_lr: float = 1e-3
    loss_threshold: float | None = None
    moe_lr_scale: float = 0.003

    def validate(self) -> None:
        if self.mode not in ("plora", "lora", "frozen-adapter-only", "text"):
            raise ConfigError(f"unknown train mode {self.mode!r}")
        if self.loss_on not in ("all", "new"):
            raise ConfigError(f"loss_on must be 'all' or 'new', got {self.loss_on!r}")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and grad_accum must be >= 1")


@dataclass
class AnalyticsConfig:
    top_m: int | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    plora: PLoRAConfig = field(default_factory=PLoRAConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    gw: GWConfig = field(default_factory=GWConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.moe.validate(self.model)
        self.plora.validate()
        self.vocab.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {where}.{key}" if where else f"unknown config key {key}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTION_TYPES.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, key) if sub is not None else copy.deepcopy(value)
    return cls(**kwargs)


_SECTION_TYPES = {
    "model": ModelConfig, "moe": MoEConfig, "plora": PLoRAConfig, "vocab": VocabConfig,
    "gw": GWConfig, "data": DataConfig, "train": TrainConfig, "analytics": AnalyticsConfig,
}


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text())


def preset(name: str) -> RunConfig:
    """Named defaults: ``desk`` (trains on a laptop CPU) and ``paper-7b``."""
    if name == "desk":
        return RunConfig().validate()
    if name == "paper-7b":
        cfg = RunConfig(
            model=ModelConfig(n_layers=32, n_heads=32, d_model=4096, d_ffn=11008,
                              vocab_text=32000, max_seq_len=4096),
            moe=MoEConfig(n_experts=16, top_k=4),
            plora=PLoRAConfig(rank=64, alpha=128.0),
            vocab=VocabConfig(vocab_image=16384, n_special=2),
            train=TrainConfig(lr_max=2e-4, lr_min=2e-5, warmup_steps=1000,
                              batch_size=16, grad_accum=4),
            data=DataConfig(low_samples=4_000_000, high_samples=3_500_000,
                            low_image_len=1024, high_image_len=4096),
        )
        return cfg.validate()
    raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper-7b')")
