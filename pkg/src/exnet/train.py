"""End-to-end fitting of ExNet / Embed-MLP on a :class:`Dataset`."""

from __future__ import annotations

import logging

import numpy as np

from .config import ConfigError, LossConfig, ModelConfig, OptimConfig, RunConfig
from .core import SeededRng
from .data import Dataset, EntityIndex
from .model import EmbedMlpModel, ExNetModel
from .optim import TrainHistory, train_loop

log = logging.getLogger(__name__)


def build_model(model_cfg: ModelConfig, loss_cfg: LossConfig, num_entities, num_features, rng):
    if model_cfg.type == "exnet":
        return ExNetModel(num_entities, num_features, model_cfg, loss_cfg, rng)
    if model_cfg.type == "embed_mlp":
        return EmbedMlpModel(num_entities, num_features, model_cfg, loss_cfg, rng)
    raise ConfigError(f"unknown model type {model_cfg.type!r}")


def split_arrays(ds: Dataset, index: EntityIndex, split):
    rows = ds.rows(split)
    return index.encode(ds.categories[rows]), ds.features[rows], ds.labels[rows]


def check_config(model_cfg, loss_cfg, optim_cfg):
    if model_cfg.type == "exnet" and not 1 <= loss_cfg.top_l <= model_cfg.n_experts:
        raise ConfigError(f"top_l={loss_cfg.top_l} exceeds n_experts={model_cfg.n_experts}")
    if optim_cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if model_cfg.batchnorm and optim_cfg.batch_size < 2:
        raise ConfigError("input batch normalization needs batch_size >= 2")


def fit(ds: Dataset, model_cfg: ModelConfig, loss_cfg: LossConfig, optim_cfg: OptimConfig, seed=0, on_epoch=None):
    """Train on the ``train`` split, early-stop on ``val``.

    Returns ``(model, history, entity_index)``; the model is the best
    validation snapshot.
    """
    check_config(model_cfg, loss_cfg, optim_cfg)
    if len(ds.rows("train")) == 0 or len(ds.rows("val")) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    index = EntityIndex.fit(ds.categories[ds.rows("train")])
    rng = SeededRng(seed)
    model = build_model(model_cfg, loss_cfg, len(index), ds.n_features, rng)
    history = train_loop(model, split_arrays(ds, index, "train"), split_arrays(ds, index, "val"),
                         optim_cfg, rng, on_epoch=on_epoch)
    return model, history, index


def fit_run(ds: Dataset, cfg: RunConfig, on_epoch=None):
    return fit(ds, cfg.model, cfg.loss, cfg.optim, cfg.seed, on_epoch=on_epoch)


def exnet_train(ds, model_cfg, loss_cfg, optim_cfg, seed=0):
    if model_cfg.type != "exnet":
        raise ConfigError("exnet_train needs model.type == 'exnet'")
    return fit(ds, model_cfg, loss_cfg, optim_cfg, seed)


def embed_mlp_train(ds, model_cfg, loss_cfg, optim_cfg, seed=0):
    if model_cfg.type != "embed_mlp":
        raise ConfigError("embed_mlp_train needs model.type == 'embed_mlp'")
    return fit(ds, model_cfg, loss_cfg, optim_cfg, seed)


def predict_dataset(model, index: EntityIndex, ds: Dataset, split=None):
    rows = np.arange(len(ds)) if split is None else ds.rows(split)
    return model.predict(index.encode(ds.categories[rows]), ds.features[rows])


__all__ = ["fit", "fit_run", "exnet_train", "embed_mlp_train", "build_model", "predict_dataset", "TrainHistory"]
