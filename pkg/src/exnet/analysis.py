"""Metrics, cluster recovery, permutation importance and report export."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SeededRng
from .data import SPLITS, Dataset, EntityIndex

log = logging.getLogger(__name__)


def _classes(preds):
    preds = np.asarray(preds)
    # argmax breaks ties toward the lower class index
    return np.argmax(preds, axis=1) if preds.ndim == 2 else preds.astype(np.int64)


def accuracy(preds, labels):
    """Fraction correct; ``preds`` are class probabilities (batch, C) or class ids."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    pred = _classes(preds)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {labels.shape}")
    return float(np.mean(pred == labels))


def average_precision(scores, labels, name="positive"):
    """Step-wise AP: sum over the descending-score sweep of (R_k - R_{k-1}) P_k.

    Tied scores keep their original row order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError(f"average precision of class {name!r} needs both positive and negative labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def macro_ap(probs, labels):
    """Unweighted mean over classes of one-vs-rest AP."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean([average_precision(probs[:, c], labels == c, name=c) for c in range(probs.shape[1])]))


def per_cluster_metrics(probs, labels, cluster_labels, clusters=None):
    """Accuracy and macro AP restricted to the rows of each cluster.

    Clusters without rows are skipped with a warning; AP is None when a
    cluster's labels are all of one class.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    cluster_labels = np.asarray(cluster_labels)
    names = clusters if clusters is not None else sorted(set(cluster_labels.tolist()))
    out = {}
    for name in names:
        sel = cluster_labels == name
        if not sel.any():
            log.warning("cluster %r has no rows; omitted", name)
            continue
        try:
            ap = macro_ap(probs[sel], labels[sel])
        except ValueError:
            ap = None
        out[name] = {"accuracy": accuracy(probs[sel], labels[sel]), "macro_ap": ap, "n_rows": int(sel.sum())}
    return out


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b):
    """Pair-counting ARI between two partitions of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("partitions must label the same items")
    n = a.size
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    sum_cells = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # both partitions trivial (all singletons or one block)
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class ClusterRecovery:
    dominant_expert: np.ndarray
    dominant_prob: np.ndarray
    ari: float
    experts_used: int

    def fraction_confident(self, threshold=0.99):
        return float(np.mean(self.dominant_prob > threshold))


def cluster_recovery(report, truth) -> ClusterRecovery:
    """Compare the dominant-expert partition of a report with true clusters.

    ``truth`` lists the true cluster of every entity in report order.
    """
    truth = np.asarray(truth)
    if len(truth) != len(report.attributions):
        raise ValueError("truth must cover every entity of the report")
    dom = report.dominant_expert
    return ClusterRecovery(dom, report.dominant_prob, adjusted_rand_index(dom, truth), int(len(np.unique(dom))))


@dataclass
class ImportanceReport:
    metric: str
    baseline: float
    n_repeats: int
    changes: dict = field(default_factory=dict)  # group -> mean relative change, percent
    per_repeat: dict = field(default_factory=dict)  # group -> list of relative changes, percent


METRICS = {"macro_ap": macro_ap, "accuracy": accuracy}


def _resolve_groups(feature_groups, feature_names, n_features):
    groups = {}
    for group, cols in feature_groups.items():
        idx = []
        for c in cols:
            if isinstance(c, str):
                if feature_names is None or c not in feature_names:
                    raise ValueError(f"unknown column {c!r} in feature group {group!r}")
                idx.append(feature_names.index(c))
            else:
                if not 0 <= int(c) < n_features:
                    raise ValueError(f"unknown column {c!r} in feature group {group!r}")
                idx.append(int(c))
        groups[group] = idx
    return groups


def permutation_importance(predict_fn, ids, X, y, feature_groups, metric="macro_ap", n_repeats=100,
                           seed=0, feature_names=None) -> ImportanceReport:
    """Mean relative metric change (percent) when a feature group is shuffled.

    All columns of a group are permuted with one shared row permutation per
    repeat. ``predict_fn(ids, X)`` returns class probabilities.
    """
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    score = METRICS[metric]
    X = np.asarray(X, dtype=np.float64)
    groups = _resolve_groups(feature_groups, feature_names, X.shape[1])
    baseline = score(predict_fn(ids, X), y)
    rng = SeededRng(seed)
    report = ImportanceReport(metric, baseline, n_repeats)
    for group, cols in groups.items():
        g_rng = rng.stream("perm:" + group)
        vals = []
        for _ in range(n_repeats):
            perm = g_rng.permutation(len(X))
            Xp = X.copy()
            Xp[:, cols] = X[perm][:, cols]
            vals.append(100.0 * (score(predict_fn(ids, Xp), y) - baseline) / baseline)
        report.per_repeat[group] = vals
        report.changes[group] = float(np.mean(vals))
    return report


def metric_report(model, index: EntityIndex, ds: Dataset) -> dict:
    """Per-split accuracy / macro AP and per-cluster metrics per split."""
    report = {"splits": {}, "clusters": {}}
    for s in SPLITS:
        rows = ds.rows(s)
        if len(rows) == 0:
            continue
        probs = model.predict(index.encode(ds.categories[rows]), ds.features[rows])
        y = ds.labels[rows]
        entry = {"accuracy": accuracy(probs, y), "n_rows": int(len(rows))}
        try:
            entry["macro_ap"] = macro_ap(probs, y)
        except ValueError:
            entry["macro_ap"] = None
        report["splits"][s] = entry
        if ds.cluster is not None:
            report["clusters"][s] = per_cluster_metrics(probs, y, ds.cluster[rows])
    return report


def with_percentages(report):
    """Copy of a metric report with every accuracy/AP also given in percent (2 decimals)."""
    def walk(node):
        if isinstance(node, dict):
            out = {}
            for k, v in node.items():
                out[k] = walk(v)
                if k in ("accuracy", "macro_ap") and isinstance(v, float):
                    out[k + "_pct"] = round(100.0 * v, 2)
            return out
        return node
    return walk(report)


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(history.COLUMNS)
        for row in history.epochs:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in history.COLUMNS[1:]])


def export_reports(model, index: EntityIndex, ds: Dataset, out_dir, history=None, report=None):
    """Write attributions.csv, embeddings.csv, metrics.json and history.csv."""
    from .model import ExNetModel, extract_attributions

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    written = []
    emb = model.embeddings()
    if isinstance(model, ExNetModel):
        att = extract_attributions(model, index.keys)
        n = att.attributions.shape[1]
        with open(out / "attributions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id"] + [f"p_expert_{j}" for j in range(n)] + ["dominant_expert", "dominant_prob"])
            for key, row, dom, dp in zip(att.entity_keys, att.attributions, att.dominant_expert, att.dominant_prob):
                w.writerow([key] + [repr(float(v)) for v in row] + [int(dom), repr(float(dp))])
        written.append(out / "attributions.csv")
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id"] + [f"e_{j}" for j in range(emb.shape[1])])
        for key, row in zip(index.keys, emb):
            w.writerow([key] + [repr(float(v)) for v in row])
    written.append(out / "embeddings.csv")
    if report is None:
        report = metric_report(model, index, ds)
    write_json(with_percentages(report), out / "metrics.json")
    written.append(out / "metrics.json")
    if history is not None:
        write_history(history, out / "history.csv")
        written.append(out / "history.csv")
    return written
