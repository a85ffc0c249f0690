"""Nadam, the Lookahead wrapper, early stopping and the mini-batch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class Nadam:
    """Adam with a Nesterov look-ahead on the bias-corrected first moment.

    Update, per parameter block, at step t::

        m = b1 m + (1 - b1) g ;  v = b2 v + (1 - b2) g^2
        m_hat = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
        p -= lr m_hat / (sqrt(v / (1 - b2^t)) + eps)

    ``nesterov=False`` replaces ``m_hat`` by ``m / (1 - b1^t)`` (plain Adam).
    Parameters are updated in place.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, nesterov=True):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps, self.nesterov = lr, beta1, beta2, eps, nesterov
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.nesterov:
                m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1**t)
            else:
                m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Lookahead:
    """Slow weights pulled toward the fast ones every ``k`` inner steps."""

    def __init__(self, params, k=5, alpha=0.5):
        if k < 1:
            raise ValueError("lookahead k must be >= 1")
        if not 0.0 < alpha <= 1.0:
            raise ValueError("lookahead alpha must be in (0, 1]")
        self.k, self.alpha = k, alpha
        self.slow = {name: p.copy() for name, p in params.items()}
        self.inner_step = 0

    def maybe_sync(self, params):
        self.inner_step += 1
        if self.inner_step % self.k:
            return params
        for name, fast in params.items():
            slow = self.slow[name]
            slow += self.alpha * (fast - slow)
            fast[...] = slow
        return params


class EarlyStopper:
    """Tracks the best monitored value and a snapshot of the model at that epoch.

    Training stops once more than ``patience`` consecutive epochs fail to improve.
    """

    def __init__(self, patience, mode="min"):
        if mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        self.patience, self.mode = patience, mode
        self.best = None
        self.best_epoch = None
        self.snapshot = None
        self.wait = 0

    def improved(self, value):
        if self.best is None:
            return True
        return value < self.best if self.mode == "min" else value > self.best

    def update(self, epoch, value, snapshot_fn):
        """Record one epoch; returns True when training should stop."""
        if self.improved(value):
            self.best, self.best_epoch, self.wait = value, epoch, 0
            self.snapshot = snapshot_fn()
            return False
        self.wait += 1
        return self.wait > self.patience


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    monitor: str = "val_loss"

    COLUMNS = (
        "epoch", "train_loss", "train_task", "train_entropy", "train_spec_raw",
        "train_spec_used", "val_loss", "val_accuracy",
    )

    def append(self, **row):
        self.epochs.append(row)

    def column(self, key):
        return [r[key] for r in self.epochs]

    @property
    def best(self):
        return self.epochs[self.best_epoch - 1]

    def __len__(self):
        return len(self.epochs)


def iter_batches(n_rows, batch_size, rng):
    """Shuffled index batches; the last partial batch is kept.

    A trailing batch of one row is merged into the previous one, since batch
    statistics and correlations need at least two rows.
    """
    order = rng.permutation(n_rows)
    starts = list(range(0, n_rows, batch_size))
    if len(starts) > 1 and n_rows - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n_rows
        yield order[start:stop]


def train_loop(model, train, val, optim_cfg, rng, on_epoch=None) -> TrainHistory:
    """Mini-batch training with Nadam (+ Lookahead) and early stopping.

    ``train`` and ``val`` are ``(ids, features, labels)`` tuples. ``model``
    must provide ``params()``, ``loss_and_grads(ids, X, y, rng)``,
    ``evaluate(ids, X, y)`` and ``get_state()`` / ``set_state()``. The model
    is left at the best-validation snapshot.
    """
    ids, X, y = train
    if len(y) == 0 or len(val[2]) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if optim_cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = model.params()
    opt = Nadam(optim_cfg.lr, optim_cfg.beta1, optim_cfg.beta2, optim_cfg.eps)
    look = Lookahead(params, optim_cfg.lookahead_k, optim_cfg.lookahead_alpha) if optim_cfg.lookahead else None
    mode = "min" if optim_cfg.monitor == "val_loss" else "max"
    stopper = EarlyStopper(optim_cfg.patience, mode)
    shuffle_rng = rng.stream("shuffle")
    dropout_rng = rng.stream("dropout")
    history = TrainHistory(monitor=optim_cfg.monitor)

    for epoch in range(1, optim_cfg.max_epochs + 1):
        sums = np.zeros(5)
        for b in iter_batches(len(y), optim_cfg.batch_size, shuffle_rng):
            bundle, grads = model.loss_and_grads(ids[b], X[b], y[b], dropout_rng)
            opt.step(params, grads)
            if look is not None:
                look.maybe_sync(params)
            sums += len(b) * np.array([
                bundle.total, bundle.task_loss, bundle.entropy_loss,
                bundle.spec_loss_raw, bundle.spec_loss_used,
            ])
        sums /= len(y)
        ev = model.evaluate(*val)
        history.append(
            epoch=epoch, train_loss=sums[0], train_task=sums[1], train_entropy=sums[2],
            train_spec_raw=sums[3], train_spec_used=sums[4],
            val_loss=ev["loss"], val_accuracy=ev["accuracy"],
        )
        log.debug("epoch %d train %.5f val_loss %.5f val_acc %.4f", epoch, sums[0], ev["loss"], ev["accuracy"])
        if on_epoch is not None:
            on_epoch(history)
        stop = stopper.update(epoch, ev[optim_cfg.monitor[4:]], model.get_state)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    model.set_state(stopper.snapshot)
    return history
