"""Task losses and the two gating regularizers.

Each loss returns its value together with the gradient with respect to its
probability input, so callers can chain the result into a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


def _label_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    C = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    rows = np.arange(len(labels))
    return probs, labels, rows, probs[rows, labels]


def cross_entropy(probs, labels, return_grad=False):
    """Mean of -log p[label] over the batch."""
    probs, labels, rows, p = _label_probs(probs, labels)
    B = len(labels)
    pc = np.maximum(p, PROB_FLOOR)
    value = float(-np.log(pc).mean())
    if not return_grad:
        return value
    grad = np.zeros_like(probs)
    grad[rows, labels] = np.where(p > PROB_FLOOR, -1.0 / (B * pc), 0.0)
    return value, grad


def focal_loss(probs, labels, gamma, return_grad=False):
    """Mean of -(1 - p)^gamma * log p at the label; gamma=0 is cross-entropy."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0:
        return cross_entropy(probs, labels, return_grad)
    probs, labels, rows, p = _label_probs(probs, labels)
    B = len(labels)
    pc = np.maximum(p, PROB_FLOOR)
    q = 1.0 - pc
    logp = np.log(pc)
    value = float(-(q**gamma * logp).mean())
    if not return_grad:
        return value
    with np.errstate(divide="ignore", invalid="ignore"):
        dmod = np.where(q > 0, gamma * q ** (gamma - 1.0), 0.0)
    d = -(-dmod * logp + q**gamma / pc) / B
    grad = np.zeros_like(probs)
    grad[rows, labels] = np.where(p > PROB_FLOOR, d, 0.0)
    return value, grad


def entropy_loss(P, return_grad=False):
    """Mean entropy of the attribution rows; 0 log 0 counts as 0."""
    P = np.asarray(P, dtype=np.float64)
    B = P.shape[0]
    logp = np.log(np.maximum(P, PROB_FLOOR))
    value = float(-(P * logp).sum() / B)
    if not return_grad:
        return value
    grad = -(logp + (P > PROB_FLOOR)) / B
    return value, grad


def top_l_mask(P, top_l):
    """Boolean mask of each row's ``top_l`` largest entries (ties: lower index)."""
    P = np.asarray(P)
    if top_l == 1:
        order = np.argmax(P, axis=1)[:, None]
    else:
        order = np.argsort(-P, axis=1, kind="stable")[:, :top_l]
    mask = np.zeros(P.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def pair_weights(P, top_l):
    """Normalized off-diagonal weights from top-L masked mean attributions.

    Returns ``(weights, mean_attr)``; weights are all zero when no two
    experts carry attribution mass.
    """
    mask = top_l_mask(P, top_l)
    counts = mask.sum(axis=0)
    sums = np.where(mask, P, 0.0).sum(axis=0)
    pbar = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    w = np.outer(pbar, pbar)
    np.fill_diagonal(w, 0.0)
    total = w.sum()
    if total > 0:
        w = w / total
    return w, pbar


def _normalized_centered(F):
    # F: (n, B, C) -> unit-norm centered columns laid out (C, n, B), norms (C, n)
    Fc = np.ascontiguousarray(np.transpose(F, (2, 0, 1)))
    Fc -= Fc.mean(axis=2, keepdims=True)
    norms = np.sqrt(np.einsum("cnb,cnb->cn", Fc, Fc))
    safe = np.where(norms > 0, norms, 1.0)
    Z = Fc / safe[:, :, None]
    Z *= (norms > 0)[:, :, None]
    return Z, norms


def expert_correlations(F):
    """Per-output-column correlation matrices, shape (C, n, n), and their mean over C.

    A constant expert column has correlation 0 with everything.
    """
    Z, _ = _normalized_centered(np.asarray(F, dtype=np.float64))
    R = np.clip(Z @ np.transpose(Z, (0, 2, 1)), -1.0, 1.0)
    return R, R.mean(axis=0)


@dataclass
class SpecResult:
    raw: float
    used: float
    grad: np.ndarray | None
    weights: np.ndarray
    degenerate_weights: bool


def spec_loss(expert_outputs, P, top_l=1, rescale=True, return_grad=False):
    """Attribution-weighted mean correlation between expert outputs.

    ``expert_outputs`` has shape (n, batch, C); ``P`` has shape (batch, n).
    The top-L mask and the pair weights are constants of the batch: the
    gradient (w.r.t. expert outputs only) flows through the correlations.
    Only experts with non-zero weight are correlated, which is exact since
    the others enter every sum with weight 0.
    """
    F = np.asarray(expert_outputs, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    n, B, C = F.shape
    if P.shape != (B, n):
        raise ValueError(f"attribution shape {P.shape} does not match ({B}, {n})")
    if not 1 <= top_l <= n:
        raise ValueError(f"top_l must be in [1, {n}], got {top_l}")
    zero_grad = np.zeros_like(F) if return_grad else None
    if n == 1:
        return SpecResult(0.0, 0.0, zero_grad, np.zeros((1, 1)), True)
    if B < 2:
        raise ValueError("specialization loss needs a batch of at least 2 rows")
    w, _ = pair_weights(P, top_l)
    if w.sum() == 0:
        return SpecResult(0.0, 0.0, zero_grad, w, True)
    active = np.flatnonzero(w.sum(axis=1) > 0)
    wa = w[np.ix_(active, active)]
    Z, norms = _normalized_centered(F[active])
    R = np.clip(Z @ np.transpose(Z, (0, 2, 1)), -1.0, 1.0)
    raw = float((wa * R.mean(axis=0)).sum())
    raw = min(1.0, max(-1.0, raw))
    used = (raw + 1.0) / 2.0 if rescale else raw
    grad = None
    if return_grad:
        scale = 0.5 if rescale else 1.0
        A = scale * (wa + wa.T) / C
        # d r_ij / d f_i = (z_j - r_ij z_i) / |f_i - mean|
        g = A @ Z - (A * R).sum(axis=2)[:, :, None] * Z
        safe = np.where(norms > 0, norms, 1.0)
        g = g / safe[:, :, None] * (norms > 0)[:, :, None]
        grad = np.zeros_like(F)
        grad[active] = np.transpose(g, (1, 2, 0))
    return SpecResult(raw, used, grad, w, False)


def total_loss(task, entropy, spec_used, lambda_spec, lambda_entropy):
    if lambda_spec < 0 or lambda_entropy < 0:
        raise ValueError("loss weights must be >= 0")
    return task + lambda_spec * spec_used + lambda_entropy * entropy


@dataclass
class LossBundle:
    task_loss: float
    entropy_loss: float
    spec_loss_raw: float
    spec_loss_rescaled: float
    total: float
    lambda_spec: float
    lambda_entropy: float
    rescale: bool = True

    @property
    def spec_loss_used(self):
        return self.spec_loss_rescaled if self.rescale else self.spec_loss_raw
