"""Hand-differentiated layers.

Every layer keeps what it needs for ``backward`` from the last ``forward``
call. Parameters live in ``layer.params`` and gradients of the last backward
pass in ``layer.grads`` under the same keys.

Layers that receive ``n_stack`` hold ``n_stack`` independent parameter sets
stacked on a leading axis. Their outputs then have shape
``(n_stack, batch, features)``; inputs may be shared ``(batch, features)``
or already stacked. This is how the experts block runs all experts at once.
"""

from __future__ import annotations

import numpy as np

from .core import normal_sample


def glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out > 0 else 0.0
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None, n_stack=None):
        super().__init__()
        self.in_dim, self.out_dim, self.n_stack = in_dim, out_dim, n_stack
        wshape = (in_dim, out_dim) if n_stack is None else (n_stack, in_dim, out_dim)
        bshape = (out_dim,) if n_stack is None else (n_stack, 1, out_dim)
        if rng is None:
            w = np.zeros(wshape)
        else:
            w = glorot_uniform(rng, in_dim, out_dim, wshape)
        self.params = {"W": w, "b": np.zeros(bshape)}
        self._x = None

    def forward(self, x, training=False, rng=None):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Dense expects {self.in_dim} input features, got shape {x.shape}")
        self._x = x
        return np.matmul(x, self.params["W"]) + self.params["b"]

    def backward(self, grad_out):
        x, W = self._x, self.params["W"]
        if self.n_stack is None:
            self.grads = {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}
            return grad_out @ W.T
        if x.ndim == 2:
            gW = np.matmul(x.T, grad_out)
        else:
            gW = np.matmul(np.swapaxes(x, 1, 2), grad_out)
        self.grads = {"W": gW, "b": grad_out.sum(axis=1, keepdims=True)}
        gx = np.matmul(grad_out, np.swapaxes(W, 1, 2))
        return gx.sum(axis=0) if x.ndim == 2 else gx


class ReLU(Layer):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out):
        return np.where(self._mask, grad_out, 0.0)


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1/(1-rate) in training."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad_out):
        return grad_out if self._mask is None else grad_out * self._mask


class InputBatchNorm(Layer):
    """Per-feature batch normalization of the raw inputs.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``.
    With ``n_stack`` the normalization is shared and only the scale/shift are
    per stack member, which is exactly what ``n_stack`` separate layers fed the
    same batch would compute.
    """

    def __init__(self, num_features, momentum=0.99, eps=1e-5, n_stack=None):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.num_features, self.momentum, self.eps, self.n_stack = num_features, momentum, eps, n_stack
        shape = (num_features,) if n_stack is None else (n_stack, 1, num_features)
        self.params = {"gamma": np.ones(shape), "beta": np.zeros(shape)}
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ValueError(f"InputBatchNorm expects (batch, {self.num_features}), got {x.shape}")
        if training:
            if x.shape[0] < 2:
                raise ValueError("batch normalization in training mode needs batch size >= 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        self._training = training
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, grad_out):
        xhat, gamma = self._xhat, self.params["gamma"]
        if self.n_stack is None:
            self.grads = {"gamma": (grad_out * xhat).sum(axis=0), "beta": grad_out.sum(axis=0)}
            dxhat = grad_out * gamma
        else:
            self.grads = {
                "gamma": (grad_out * xhat).sum(axis=1, keepdims=True),
                "beta": grad_out.sum(axis=1, keepdims=True),
            }
            dxhat = (grad_out * gamma).sum(axis=0)
        if not self._training:
            return dxhat * self._inv_std
        B = xhat.shape[0]
        return (self._inv_std / B) * (
            B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Embedding(Layer):
    def __init__(self, num_entities, dim, rng=None, init_std=0.05):
        super().__init__()
        self.num_entities, self.dim = num_entities, dim
        if rng is None:
            table = np.zeros((num_entities, dim))
        else:
            table = normal_sample(rng, 0.0, init_std, (num_entities, dim))
        self.params = {"table": table}

    def forward(self, ids, training=False, rng=None):
        ids = np.asarray(ids)
        bad = (ids < 0) | (ids >= self.num_entities)
        if bad.any():
            raise IndexError(f"entity id {int(ids[bad][0])} out of range [0, {self.num_entities})")
        self._ids = ids
        return self.params["table"][ids]

    def backward(self, grad_out):
        g = np.zeros_like(self.params["table"])
        np.add.at(g, self._ids, grad_out)
        self.grads = {"table": g}
        return None


class Sequential:
    """Chain of layers; parameter keys are prefixed with the layer index."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out[f"{prefix}{i}.{k}"] = layer.grads[k]
        return out

    def named_state(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, InputBatchNorm):
                out[f"{prefix}{i}.running_mean"] = layer.running_mean
                out[f"{prefix}{i}.running_var"] = layer.running_var
        return out

    def load_state(self, state, prefix=""):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, InputBatchNorm):
                layer.running_mean = np.array(state[f"{prefix}{i}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(state[f"{prefix}{i}.running_var"], dtype=np.float64)


def mlp_stack(in_dim, hidden, out_dim, rng, dropout=0.0, batchnorm=False, n_stack=None):
    """[InputBatchNorm] -> (Dense -> ReLU -> Dropout)* -> Dense."""
    layers = []
    if batchnorm:
        layers.append(InputBatchNorm(in_dim, n_stack=n_stack))
    d = in_dim
    for h in hidden:
        layers.append(Dense(d, h, rng, n_stack=n_stack))
        layers.append(ReLU())
        if dropout > 0:
            layers.append(Dropout(dropout))
        d = h
    layers.append(Dense(d, out_dim, rng, n_stack=n_stack))
    return Sequential(layers)
