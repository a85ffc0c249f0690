"""ExNet (gating block + experts block) and the Embed-MLP baseline.

The experts run as one stacked network: every parameter of the experts
block carries a leading expert axis, and expert outputs have shape
``(n_experts, batch, n_classes)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .config import LossConfig, ModelConfig
from .core import SeededRng, normal_sample, softmax, softmax_backward
from .nn import Embedding, mlp_stack


def task_loss(probs, labels, loss_cfg, return_grad=False):
    if loss_cfg.task == "focal":
        return losses.focal_loss(probs, labels, loss_cfg.gamma, return_grad)
    return losses.cross_entropy(probs, labels, return_grad)


def combine(P, F):
    """Per-row convex combination: out[b] = sum_j P[b, j] F[j, b]."""
    return (P.T[:, :, None] * F).sum(axis=0)


class _Model:
    """Shared parameter/state plumbing."""

    def get_state(self):
        state = {k: v.copy() for k, v in self.params().items()}
        state.update({k: np.array(v, copy=True) for k, v in self.buffers().items()})
        return state

    def set_state(self, state):
        for k, p in self.params().items():
            p[...] = state[k]
        self.load_buffers(state)

    def evaluate(self, ids, X, y):
        probs = self.predict(ids, X)
        return {
            "loss": task_loss(probs, y, self.loss_cfg),
            "accuracy": float(np.mean(np.argmax(probs, axis=1) == y)),
        }


class ExNetModel(_Model):
    def __init__(self, num_entities, num_features, model_cfg: ModelConfig, loss_cfg: LossConfig, rng=None):
        if model_cfg.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 1 <= loss_cfg.top_l <= model_cfg.n_experts:
            raise ValueError(f"top_l={loss_cfg.top_l} must be in [1, n_experts={model_cfg.n_experts}]")
        rng = rng if rng is not None else SeededRng(0)
        init = rng.stream("init")
        self.cfg, self.loss_cfg = model_cfg, loss_cfg
        self.num_entities, self.num_features = num_entities, num_features
        n, d = model_cfg.n_experts, model_cfg.embed_dim
        self.entity_emb = Embedding(num_entities, d, init, init_std=model_cfg.init_std)
        self.expert_emb = normal_sample(init, 0.0, model_cfg.init_std, (n, d))
        self.experts = mlp_stack(
            num_features, model_cfg.hidden, model_cfg.n_classes, init,
            dropout=model_cfg.dropout, batchnorm=model_cfg.batchnorm, n_stack=n,
        )

    @property
    def n_experts(self):
        return self.cfg.n_experts

    def params(self):
        out = {"gating.entity_emb": self.entity_emb.params["table"], "gating.expert_emb": self.expert_emb}
        out.update(self.experts.named_params("experts."))
        return out

    def buffers(self):
        return self.experts.named_state("experts.")

    def load_buffers(self, state):
        self.experts.load_state(state, "experts.")

    def gate_forward(self, ids):
        self._E = self.entity_emb.forward(ids)
        return softmax(self._E @ self.expert_emb.T, axis=1)

    def experts_forward(self, X, training=False, rng=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise ValueError(f"expected features of width {self.num_features}, got shape {X.shape}")
        logits = self.experts.forward(X, training=training, rng=rng)
        return softmax(logits, axis=-1)

    def predict(self, ids, X):
        return combine(self.gate_forward(ids), self.experts_forward(X))

    def loss_and_grads(self, ids, X, y, rng=None, training=True):
        lc = self.loss_cfg
        P = self.gate_forward(ids)
        F = self.experts_forward(X, training=training, rng=rng)
        out = combine(P, F)

        task, d_out = task_loss(out, y, lc, return_grad=True)
        ent, d_P_ent = losses.entropy_loss(P, return_grad=True)
        spec = losses.spec_loss(F, P, lc.top_l, lc.rescale_spec, return_grad=True)
        total = losses.total_loss(task, ent, spec.used, lc.lambda_spec, lc.lambda_entropy)

        d_P = (F * d_out[None, :, :]).sum(axis=2).T + lc.lambda_entropy * d_P_ent
        d_F = P.T[:, :, None] * d_out[None, :, :] + lc.lambda_spec * spec.grad

        d_logits = softmax_backward(F, d_F, axis=-1)
        self.experts.backward(d_logits)
        d_gate = softmax_backward(P, d_P, axis=1)
        g_expert_emb = d_gate.T @ self._E
        self.entity_emb.backward(d_gate @ self.expert_emb)

        grads = {"gating.entity_emb": self.entity_emb.grads["table"], "gating.expert_emb": g_expert_emb}
        grads.update(self.experts.named_grads("experts."))
        rescaled = 0.0 if spec.degenerate_weights else (spec.raw + 1.0) / 2.0
        bundle = losses.LossBundle(task, ent, spec.raw, rescaled, total, lc.lambda_spec, lc.lambda_entropy, lc.rescale_spec)
        return bundle, grads

    def embeddings(self):
        return self.entity_emb.params["table"].copy()


class EmbedMlpModel(_Model):
    """One MLP over [features, entity embedding]; ``embed_dim=0`` is a plain MLP."""

    def __init__(self, num_entities, num_features, model_cfg: ModelConfig, loss_cfg: LossConfig, rng=None):
        rng = rng if rng is not None else SeededRng(0)
        init = rng.stream("init")
        self.cfg, self.loss_cfg = model_cfg, loss_cfg
        self.num_entities, self.num_features = num_entities, num_features
        d = model_cfg.embed_dim
        self.entity_emb = Embedding(num_entities, d, init, init_std=model_cfg.init_std) if d > 0 else None
        self.net = mlp_stack(
            num_features + d, model_cfg.hidden, model_cfg.n_classes, init,
            dropout=model_cfg.dropout, batchnorm=model_cfg.batchnorm,
        )

    def params(self):
        out = {}
        if self.entity_emb is not None:
            out["entity_emb"] = self.entity_emb.params["table"]
        out.update(self.net.named_params("net."))
        return out

    def buffers(self):
        return self.net.named_state("net.")

    def load_buffers(self, state):
        self.net.load_state(state, "net.")

    def _inputs(self, ids, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise ValueError(f"expected features of width {self.num_features}, got shape {X.shape}")
        if self.entity_emb is None:
            return X
        return np.concatenate([X, self.entity_emb.forward(ids)], axis=1)

    def predict(self, ids, X):
        return softmax(self.net.forward(self._inputs(ids, X)), axis=1)

    def loss_and_grads(self, ids, X, y, rng=None, training=True):
        probs = softmax(self.net.forward(self._inputs(ids, X), training=training, rng=rng), axis=1)
        task, d_probs = task_loss(probs, y, self.loss_cfg, return_grad=True)
        d_in = self.net.backward(softmax_backward(probs, d_probs, axis=1))
        grads = {}
        if self.entity_emb is not None:
            self.entity_emb.backward(d_in[:, self.num_features:])
            grads["entity_emb"] = self.entity_emb.grads["table"]
        grads.update(self.net.named_grads("net."))
        bundle = losses.LossBundle(task, 0.0, 0.0, 0.0, task, 0.0, 0.0, False)
        return bundle, grads

    def embeddings(self):
        if self.entity_emb is None:
            return np.zeros((self.num_entities, 0))
        return self.entity_emb.params["table"].copy()


@dataclass
class AttributionReport:
    entity_keys: list
    attributions: np.ndarray  # (num_entities, n_experts)
    embeddings: np.ndarray  # (num_entities, d)

    @property
    def dominant_expert(self):
        return np.argmax(self.attributions, axis=1)

    @property
    def dominant_prob(self):
        return np.max(self.attributions, axis=1)


def extract_attributions(model: ExNetModel, entity_keys=None) -> AttributionReport:
    """One pass of every entity through the gating block alone."""
    ids = np.arange(model.num_entities)
    keys = list(entity_keys) if entity_keys is not None else [str(i) for i in ids]
    return AttributionReport(keys, model.gate_forward(ids), model.embeddings())
