"""Run configuration: strict dataclass schema loaded from JSON files.

Nested sections map to dataclasses; unknown keys are rejected. Dotted
overrides (``"optim.lr": 0.01``) are applied on top of a loaded config.
"""

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
class ClusterSpec:
    name: str
    weights: list[float]
    sample_share: float
    investor_share: float


def default_clusters() -> list[ClusterSpec]:
    return [
        ClusterSpec("high", [5.0, 5.0, 0.0, 0.0, -5.0], 0.70, 0.10),
        ClusterSpec("low", [-5.0, 0.0, 5.0, 0.0, 5.0], 0.10, 0.50),
        ClusterSpec("medium", [-5.0, 0.0, 5.0, 5.0, 0.0], 0.20, 0.40),
    ]


@dataclass
class GeneratorConfig:
    n_samples: int = 100_000
    n_investors: int = 500
    n_features: int = 5
    alpha: float = 0.5
    # "std": b ~ N(0, alpha) has standard deviation alpha; "variance": variance alpha
    alpha_is: str = "std"
    # "scalar": one bias added to every weight component; "vector": one draw per component
    bias_mode: str = "scalar"
    split_fractions: list[float] = field(default_factory=lambda: [0.7, 0.2, 0.1])
    clusters: list[ClusterSpec] = field(default_factory=default_clusters)


@dataclass
class DataConfig:
    path: str | None = None
    generator: GeneratorConfig | None = None
    # generator seed; None means "use the run seed"
    seed: int | None = None
    gating_column: Any = "investor_id"
    feature_columns: list[str] | None = None


@dataclass
class ModelConfig:
    type: str = "exnet"
    n_experts: int = 3
    embed_dim: int = 64
    hidden: list[int] = field(default_factory=list)
    dropout: float = 0.0
    batchnorm: bool = True
    init_std: float = 0.05
    n_classes: int = 2


@dataclass
class LossConfig:
    task: str = "cross_entropy"
    gamma: float = 0.0
    lambda_spec: float = 7e-3
    lambda_entropy: float = 1e-3
    top_l: int = 1
    rescale_spec: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    # "val_loss" (lower is better) or "val_accuracy" (higher is better)
    monitor: str = "val_loss"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead: bool = True
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out: str | None = None


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _convert(cls, names[key], value, f"{where}.{key}" if where else key)
    return cls(**kwargs)


_SECTIONS = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "optim"): OptimConfig,
    (DataConfig, "generator"): GeneratorConfig,
}


def _convert(cls, f, value, where):
    sub = _SECTIONS.get((cls, f.name))
    if sub is not None:
        return None if value is None else _build(sub, value, where)
    if cls is GeneratorConfig and f.name == "clusters":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list of clusters")
        return [_build(ClusterSpec, c, f"{where}[{i}]") for i, c in enumerate(value)]
    return value


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return config_from_dict(raw)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def set_dotted(raw: dict, key: str, value):
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    raw = copy.deepcopy(config_to_dict(cfg))
    for key, value in overrides.items():
        set_dotted(raw, key, value)
    return config_from_dict(raw)


def validate(cfg: RunConfig):
    m, l, o = cfg.model, cfg.loss, cfg.optim
    if m.type not in ("exnet", "embed_mlp"):
        raise ConfigError(f"model.type must be 'exnet' or 'embed_mlp', got {m.type!r}")
    if m.n_experts < 1:
        raise ConfigError("model.n_experts must be >= 1")
    if m.embed_dim < 0 or (m.type == "exnet" and m.embed_dim < 1):
        raise ConfigError("model.embed_dim must be >= 1 for exnet and >= 0 for embed_mlp")
    if not 0.0 <= m.dropout < 1.0:
        raise ConfigError("model.dropout must be in [0, 1)")
    if m.init_std < 0:
        raise ConfigError("model.init_std must be >= 0")
    if m.n_classes < 2:
        raise ConfigError("model.n_classes must be >= 2")
    if l.task not in ("cross_entropy", "focal"):
        raise ConfigError(f"loss.task must be 'cross_entropy' or 'focal', got {l.task!r}")
    if l.gamma < 0:
        raise ConfigError("loss.gamma must be >= 0")
    if l.lambda_spec < 0 or l.lambda_entropy < 0:
        raise ConfigError("loss weights must be >= 0")
    if m.type == "exnet" and not 1 <= l.top_l <= m.n_experts:
        raise ConfigError(f"loss.top_l={l.top_l} must be in [1, n_experts={m.n_experts}]")
    if o.lr <= 0 or o.batch_size < 1 or o.max_epochs < 1 or o.patience < 0:
        raise ConfigError("optim: lr > 0, batch_size >= 1, max_epochs >= 1, patience >= 0 required")
    if o.monitor not in ("val_loss", "val_accuracy"):
        raise ConfigError("optim.monitor must be 'val_loss' or 'val_accuracy'")
    if o.lookahead_k < 1 or not 0.0 < o.lookahead_alpha <= 1.0:
        raise ConfigError("optim: lookahead_k >= 1 and lookahead_alpha in (0, 1] required")
    g = cfg.data.generator
    if g is not None:
        if g.alpha_is not in ("variance", "std"):
            raise ConfigError("generator.alpha_is must be 'variance' or 'std'")
        if g.bias_mode not in ("scalar", "vector"):
            raise ConfigError("generator.bias_mode must be 'scalar' or 'vector'")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
