"""Experiment configuration: dataclasses plus a strict `[section]` /
`key = value` file format where unknown sections or keys are errors."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .bench import ScenarioConfig
from .encoders import ConfigError
from .prototypes import LossWeights

METHODS = ("dicop_dpl", "linear_probe", "clip_adapter", "coop", "cocoop")

ABLATION_VARIANTS = ("full", "wo_ita", "wo_prot", "plain_ce",
                     "no_projector", "no_attributes")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    finetune: str = "lora"          # "lora" or "layer_decay"
    lora_rank: int = 4
    lora_alpha: float = 4.0
    layer_decay_beta: float = 0.9

    def __post_init__(self):
        if self.finetune not in ("lora", "layer_decay"):
            raise ConfigError(f"unknown finetune mode {self.finetune!r}")
        if self.layer_decay_beta <= 0:
            raise ConfigError("layer_decay_beta must be positive")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.0005
    weight_decay: float = 0.01
    tau1: float = 0.07
    tau2: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 0.1
    sign_mode: str = "corrected"

    def weights(self):
        return LossWeights(self.tau1, self.tau2, self.lambda1, self.lambda2)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs/batch_size/lr out of range")
        self.weights()  # validate


@dataclass
class RunConfig:
    methods: tuple = METHODS
    seeds: tuple = tuple(range(10))
    data_fraction: float = 0.05
    pretrain_epochs: int = 20
    pretrain_batch_size: int = 64
    pretrain_lr: float = 0.001
    pretrain_seed: int = 0
    sweep_fractions: tuple = (0.01, 0.05, 0.10, 0.25)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; valid: {METHODS}")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("data_fraction must be in (0, 1]")


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def fingerprint_text(self):
        parts = []
        for section, obj in (("scenario", self.scenario), ("model", self.model),
                             ("train", self.train), ("run", self.run)):
            for f in fields(obj):
                parts.append(f"{section}.{f.name}={getattr(obj, f.name)!r}")
        return ";".join(parts)


_SECTIONS = {
    "scenario": ScenarioConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "run": RunConfig,
}

_LIST_KEYS = {"methods": str, "seeds": int, "sweep_fractions": float}


def _convert(value, target_type, key):
    if key in _LIST_KEYS:
        elem = _LIST_KEYS[key]
        return tuple(elem(v.strip()) for v in value.split(",") if v.strip())
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {value!r} for key {key!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def parse_config(text) -> ExperimentConfig:
    """Parse the config file format; every key must belong to its section."""
    values = {name: {} for name in _SECTIONS}
    section = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {ln}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {ln}: key outside any [section]")
        key, value = (p.strip() for p in line.split("=", 1))
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        if key not in known:
            raise ConfigError(
                f"line {ln}: unknown key {key!r} in [{section}]; "
                f"valid: {sorted(known)}"
            )
        py_type = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}[key]
        values[section][key] = _convert(value, py_type, key)
    return ExperimentConfig(**{name: _SECTIONS[name](**vals)
                               for name, vals in values.items()})


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config_text():
    return """\
[scenario]
kind = new
pretrain_pairs_per_class = 500
adapt_samples_per_group = 300
noise_std = 0.05
data_seed = 1234

[model]
embed_dim = 64
n_layers = 2
n_heads = 4
finetune = lora
lora_rank = 4
lora_alpha = 4

[train]
epochs = 200
batch_size = 64
lr = 0.002
tau1 = 0.07
tau2 = 0.5
lambda1 = 0.5
lambda2 = 0.05

[run]
methods = dicop_dpl,linear_probe,clip_adapter,coop,cocoop
seeds = 0,1,2,3,4,5,6,7,8,9
data_fraction = 0.05
pretrain_epochs = 20
"""
