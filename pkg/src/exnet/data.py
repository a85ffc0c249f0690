"""Row-indexed datasets and the CSV contract.

CSV header: ``investor_id,f0..f{p-1},label,true_prob,cluster,split``.
``true_prob`` and ``cluster`` are optional; the gating column can be any
categorical column (or several, joined into one key).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
RESERVED = {"label", "true_prob", "cluster", "split"}
KEY_SEP = "|"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    categories: np.ndarray  # gating key per row (str)
    labels: np.ndarray
    split: np.ndarray
    feature_names: list
    true_prob: np.ndarray | None = None
    cluster: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    def rows(self, split):
        return np.flatnonzero(self.split == split)

    def subset(self, idx):
        return Dataset(
            self.features[idx], self.categories[idx], self.labels[idx], self.split[idx],
            list(self.feature_names),
            None if self.true_prob is None else self.true_prob[idx],
            None if self.cluster is None else self.cluster[idx],
        )

    def split_view(self, split):
        return self.subset(self.rows(split))


class EntityIndex:
    """Dense ids 0..n-1 for gating keys, in order of first appearance."""

    def __init__(self, keys):
        self.keys = list(keys)
        self._index = {k: i for i, k in enumerate(self.keys)}
        if len(self._index) != len(self.keys):
            raise DataError("duplicate entity keys")

    @classmethod
    def fit(cls, categories):
        seen = {}
        for c in categories:
            if c not in seen:
                seen[c] = len(seen)
        return cls(seen)

    def __len__(self):
        return len(self.keys)

    def encode(self, categories):
        try:
            return np.fromiter((self._index[c] for c in categories), dtype=np.int64, count=len(categories))
        except KeyError as exc:
            raise DataError(f"unknown entity {exc.args[0]!r} (not seen in the training split)") from None


def write_csv(ds: Dataset, path, gating_name="investor_id"):
    cols = [gating_name] + list(ds.feature_names) + ["label"]
    if ds.true_prob is not None:
        cols.append("true_prob")
    if ds.cluster is not None:
        cols.append("cluster")
    cols.append("split")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(ds)):
            row = [ds.categories[i]] + [repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i])]
            if ds.true_prob is not None:
                row.append(repr(float(ds.true_prob[i])))
            if ds.cluster is not None:
                row.append(ds.cluster[i])
            row.append(ds.split[i])
            w.writerow(row)


def read_csv(path, gating_column="investor_id", feature_columns=None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    pos = {name: i for i, name in enumerate(header)}
    gating = [gating_column] if isinstance(gating_column, str) else list(gating_column)
    for name in gating + ["label", "split"]:
        if name not in pos:
            raise DataError(f"{path}: missing column {name!r}")
    if feature_columns is None:
        feature_columns = [h for h in header if h not in RESERVED and h not in gating and h != "investor_id"]
    missing = [c for c in feature_columns if c not in pos]
    if missing:
        raise DataError(f"{path}: unknown feature column(s) {missing}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        feats = np.array([[float(r[pos[c]]) for c in feature_columns] for r in rows], dtype=np.float64)
        labels = np.array([int(r[pos["label"]]) for r in rows], dtype=np.int64)
        true_prob = np.array([float(r[pos["true_prob"]]) for r in rows]) if "true_prob" in pos else None
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from None
    if not np.isfinite(feats).all():
        raise DataError(f"{path}: non-finite feature values")
    cats = np.array([KEY_SEP.join(r[pos[g]] for g in gating) for r in rows], dtype=object)
    split = np.array([r[pos["split"]] for r in rows], dtype=object)
    bad = set(split) - set(SPLITS)
    if bad:
        raise DataError(f"{path}: unknown split tag(s) {sorted(bad)}")
    cluster = np.array([r[pos["cluster"]] for r in rows], dtype=object) if "cluster" in pos else None
    return Dataset(feats, cats, labels, split, list(feature_columns), true_prob, cluster)
