"""Synthetic market with three investor clusters and known event probabilities.

An investor ``a`` in cluster ``c`` has weights ``w_a = w_c + b_a`` and shows
interest (label 1) when ``sigmoid(w_a . x) > u`` with ``x ~ N(0, I_p)`` and
``u ~ U[0, 1]``. Rows pick a cluster by its sample share, then an investor
uniformly inside that cluster.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ClusterSpec, GeneratorConfig, default_clusters
from .core import SeededRng, pearson_corr, sigmoid
from .data import SPLITS, Dataset, write_csv

SHARE_TOL = 1e-9


def largest_remainder(shares, total):
    """Integer counts summing to ``total`` that best match ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


@dataclass
class SyntheticDataset(Dataset):
    investor_cluster: np.ndarray = None  # cluster index per investor
    investor_weights: np.ndarray = None  # (n_investors, p)
    uniforms: np.ndarray = None  # the U draw of every row
    cluster_names: list = field(default_factory=list)
    generator: GeneratorConfig = None
    seed: int = 0

    @property
    def investor_ids(self):
        return np.array([int(c) for c in self.categories])

    def metadata(self):
        return {
            "seed": self.seed,
            "generator": asdict(self.generator),
            "investors": [
                {
                    "investor_id": str(i),
                    "cluster": self.cluster_names[int(k)],
                    "weights": [float(v) for v in self.investor_weights[i]],
                }
                for i, k in enumerate(self.investor_cluster)
            ],
        }

    def save(self, csv_path, meta_path=None):
        csv_path = Path(csv_path)
        write_csv(self, csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
        meta_path.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return csv_path, meta_path


def _check_shares(clusters, attr):
    total = sum(getattr(c, attr) for c in clusters)
    if abs(total - 1.0) > SHARE_TOL:
        raise ValueError(f"cluster {attr} values sum to {total}, expected 1")
    if any(getattr(c, attr) < 0 for c in clusters):
        raise ValueError(f"negative cluster {attr}")


def generate(cfg: GeneratorConfig | None = None, seed=0) -> SyntheticDataset:
    cfg = cfg or GeneratorConfig()
    clusters = cfg.clusters
    p = cfg.n_features
    _check_shares(clusters, "sample_share")
    _check_shares(clusters, "investor_share")
    if cfg.alpha < 0:
        raise ValueError("alpha must be >= 0")
    if abs(sum(cfg.split_fractions) - 1.0) > SHARE_TOL or len(cfg.split_fractions) != 3:
        raise ValueError("split_fractions must be three values summing to 1")
    for c in clusters:
        if len(c.weights) != p:
            raise ValueError(f"cluster {c.name!r}: weight vector length {len(c.weights)} != {p}")
    K = len(clusters)
    rng = SeededRng(seed)

    inv_rng = rng.stream("investors")
    per_cluster = largest_remainder([c.investor_share for c in clusters], cfg.n_investors)
    if np.any(per_cluster[[c.sample_share > 0 for c in clusters]] == 0):
        raise ValueError("a cluster with positive sample share received no investors")
    inv_cluster = inv_rng.permutation(np.repeat(np.arange(K), per_cluster))
    bias_std = np.sqrt(cfg.alpha) if cfg.alpha_is == "variance" else cfg.alpha
    base = np.array([clusters[k].weights for k in inv_cluster], dtype=np.float64).reshape(cfg.n_investors, p)
    if cfg.bias_mode == "scalar":
        bias = inv_rng.normal(0.0, 1.0, size=(cfg.n_investors, 1)) * bias_std
    else:
        bias = inv_rng.normal(0.0, 1.0, size=(cfg.n_investors, p)) * bias_std
    weights = base + bias

    row_rng = rng.stream("rows")
    N = cfg.n_samples
    row_cluster = row_rng.choice(K, size=N, p=[c.sample_share for c in clusters])
    members = [np.flatnonzero(inv_cluster == k) for k in range(K)]
    pick = row_rng.random(N)
    investor = np.empty(N, dtype=np.int64)
    for k in range(K):
        rows = row_cluster == k
        m = members[k]
        investor[rows] = m[np.minimum((pick[rows] * len(m)).astype(np.int64), len(m) - 1)]

    X = rng.stream("features").normal(0.0, 1.0, size=(N, p))
    true_prob = sigmoid(np.einsum("ij,ij->i", weights[investor], X))
    u = rng.stream("labels").random(N)
    labels = (true_prob > u).astype(np.int64)

    counts = largest_remainder(cfg.split_fractions, N)
    split = np.repeat(np.array(SPLITS, dtype=object), counts)
    names = [c.name for c in clusters]
    return SyntheticDataset(
        features=X,
        categories=np.array([str(i) for i in investor], dtype=object),
        labels=labels,
        split=split,
        feature_names=[f"f{j}" for j in range(p)],
        true_prob=true_prob,
        cluster=np.array([names[k] for k in inv_cluster[investor]], dtype=object),
        investor_cluster=inv_cluster,
        investor_weights=weights,
        uniforms=u,
        cluster_names=names,
        generator=cfg,
        seed=seed,
    )


def perfect_model_predictions(true_prob):
    """Label 1 iff the true probability exceeds 0.5 (a tie predicts 0)."""
    return (np.asarray(true_prob) > 0.5).astype(np.int64)


def perfect_model_metrics(ds: Dataset) -> dict:
    """Accuracy of the oracle that knows every row's event probability.

    Returns ``{split: {"accuracy": a, "clusters": {name: a}}}``.
    """
    if ds.true_prob is None:
        raise ValueError("dataset has no true_prob column; the perfect model needs it")
    pred = perfect_model_predictions(ds.true_prob)
    correct = pred == ds.labels
    out = {}
    for s in SPLITS:
        rows = ds.split == s
        if not rows.any():
            continue
        entry = {"accuracy": float(correct[rows].mean()), "clusters": {}}
        if ds.cluster is not None:
            for name in sorted(set(ds.cluster[rows])):
                sel = rows & (ds.cluster == name)
                entry["clusters"][name] = float(correct[sel].mean())
        out[s] = entry
    return out


def expected_perfect_accuracy(true_prob):
    """Expected accuracy of the perfect model: mean of max(p, 1 - p)."""
    p = np.asarray(true_prob)
    return float(np.maximum(p, 1.0 - p).mean())


def cluster_weight_correlations(clusters: list[ClusterSpec] | None = None):
    clusters = clusters if clusters is not None else default_clusters()
    if len(clusters) < 2:
        raise ValueError("need at least 2 clusters")
    K = len(clusters)
    R = np.eye(K)
    for i in range(K):
        for j in range(i + 1, K):
            R[i, j] = R[j, i] = pearson_corr(clusters[i].weights, clusters[j].weights)
    return R
