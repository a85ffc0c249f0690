"""Seeded randomness and the small numeric kernel shared by every module.

Matrices are plain ``numpy.ndarray`` objects in float64.
"""

from __future__ import annotations

import zlib

import numpy as np


class SeededRng:
    """Master seed that hands out independent, named random streams.

    Each stream is a ``numpy.random.Generator`` (PCG64) seeded from
    ``(seed, crc32(name))``, so adding or removing draws in one consumer
    never shifts the draws of another.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))

    def child(self, name: str) -> "SeededRng":
        """Derive a new master seed, e.g. for one point of a sweep."""
        g = self.stream("child:" + name)
        return SeededRng(int(g.integers(0, 2**63 - 1)))

    def __repr__(self):
        return f"SeededRng({self.seed})"


def _lastaxis_reduce(v, fn):
    # reducing a short trailing axis column by column is much faster than ufunc.reduce
    acc = v[..., 0]
    for c in range(1, v.shape[-1]):
        acc = fn(acc, v[..., c])
    return acc[..., None]


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty input")
    if (axis == -1 or axis == v.ndim - 1) and v.shape[-1] <= 8:
        e = np.exp(v - _lastaxis_reduce(v, np.maximum))
        return e / _lastaxis_reduce(e, np.add)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs, grad_out, axis=-1):
    """Vector-Jacobian product of softmax given its output."""
    pg = grad_out * probs
    if (axis == -1 or axis == probs.ndim - 1) and probs.shape[-1] <= 8:
        return pg - probs * _lastaxis_reduce(pg, np.add)
    return pg - probs * np.sum(pg, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def pearson_corr(a, b, *, with_flag=False):
    """Pearson correlation of two vectors, clamped to [-1, 1].

    A constant input has no defined correlation; 0 is returned instead and,
    with ``with_flag=True``, the second element of the returned pair is True.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("pearson_corr needs at least 2 observations")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt(ac @ ac)
    nb = np.sqrt(bc @ bc)
    degenerate = bool(na == 0.0 or nb == 0.0)
    r = 0.0 if degenerate else float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0))
    return (r, degenerate) if with_flag else r


def normal_sample(rng: np.random.Generator, mean, std, shape):
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(mean, std, size=shape)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b
