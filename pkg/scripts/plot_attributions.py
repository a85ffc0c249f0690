"""Plot an exported run: investors per dominant expert and a 2-D view of the embeddings.

Usage: python scripts/plot_attributions.py RUN_DIR [--out FIG.png]

Reads ``attributions.csv`` and ``embeddings.csv`` written by ``exnet train`` or
``exnet analyze``. The embedding view is a plain PCA projection; swap in UMAP
or t-SNE externally if preferred. Not part of the package.
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_table(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    run = Path(args.run_dir)

    att = read_table(run / "attributions.csv")
    dom = np.array([int(r["dominant_expert"]) for r in att])
    emb_rows = read_table(run / "embeddings.csv")
    emb = np.array([[float(v) for k, v in r.items() if k != "entity_id"] for r in emb_rows])

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))
    experts, counts = np.unique(dom, return_counts=True)
    ax1.bar([str(e) for e in experts], counts)
    ax1.set_xlabel("dominant expert")
    ax1.set_ylabel("investors")

    centered = emb - emb.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    xy = centered @ vt[:2].T
    sc = ax2.scatter(xy[:, 0], xy[:, 1], c=dom, s=8, cmap="tab10")
    ax2.set_title("investor embeddings (PCA)")
    fig.colorbar(sc, ax=ax2, label="dominant expert")
    fig.tight_layout()
    out = Path(args.out) if args.out else run / "attributions.png"
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
