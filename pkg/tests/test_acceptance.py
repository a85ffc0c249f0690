"""End-to-end acceptance checks on the synthetic market.

Training points use master seeds 0, 1, 2 (one seed drives both the dataset
and the model). A point that needs "best of 3 seeds" stops at the first
seed that already satisfies it. Each training run is timed.
"""

import functools
import math
import time

import numpy as np
import pytest

from exnet.analysis import adjusted_rand_index, average_precision, cluster_recovery, permutation_importance
from exnet.cli import main
from exnet.config import GeneratorConfig, LossConfig, ModelConfig, OptimConfig, default_clusters
from exnet.core import SeededRng, sigmoid, softmax
from exnet.losses import entropy_loss, pair_weights, spec_loss
from exnet import losses
from exnet.model import ExNetModel, extract_attributions
from exnet.nn import Dense, Embedding, InputBatchNorm, ReLU, mlp_stack
from exnet.synthdata import generate, perfect_model_metrics
from exnet.train import fit, predict_dataset
from oracles import brute_ap, brute_ari, brute_entropy, brute_spec, central_diff, rel_error

SEEDS = (0, 1, 2)
POINT_BUDGET_S = 15 * 60
LOSSES = {
    "sweep": LossConfig(lambda_spec=7e-3, lambda_entropy=1e-3),
    "recovery": LossConfig(lambda_spec=7e-3, lambda_entropy=1e-1),
}


@functools.lru_cache(maxsize=None)
def dataset(seed):
    return generate(GeneratorConfig(), seed=seed)


@functools.lru_cache(maxsize=None)
def perfect_test_accuracy(seed):
    return perfect_model_metrics(dataset(seed))["test"]["accuracy"]


@functools.lru_cache(maxsize=None)
def trained(kind, n, seed, loss="sweep"):
    """Train one point; returns (model, index, test accuracy, seconds)."""
    ds = dataset(seed)
    if kind == "exnet":
        mc = ModelConfig(type="exnet", n_experts=n, embed_dim=64, hidden=[], batchnorm=True)
        oc = OptimConfig(lr=1e-3, batch_size=64, max_epochs=200, patience=20)
    else:
        mc = ModelConfig(type="embed_mlp", embed_dim=64, hidden=[128, 64], dropout=0.15, batchnorm=True)
        oc = OptimConfig(lr=4.2e-5, batch_size=64, max_epochs=200, patience=20)
    t0 = time.perf_counter()
    model, _, index = fit(ds, mc, LOSSES[loss], oc, seed=seed)
    secs = time.perf_counter() - t0
    probs = predict_dataset(model, index, ds, "test")
    acc = float(np.mean(probs.argmax(axis=1) == ds.labels[ds.rows("test")]))
    return model, index, acc, secs


def best_of_seeds(kind, n, ok, loss="sweep"):
    """Run seeds in order until ``ok(acc, seed)`` holds; returns (best acc, its seed, all runs)."""
    runs = []
    for s in SEEDS:
        _, _, acc, secs = trained(kind, n, s, loss)
        runs.append((s, acc, secs))
        if ok(acc, s):
            return acc, s, runs
    best = max(runs, key=lambda r: r[1])
    return best[1], best[0], runs


def _fmt(runs):
    return ", ".join(f"seed {s}: {100 * a:.2f}% in {t:.0f}s" for s, a, t in runs)


# 1 -------------------------------------------------------------------------

def test_c1_perfect_model(verdict):
    rows, ok = [], True
    for s in SEEDS:
        t0 = time.perf_counter()
        acc = perfect_model_metrics(generate(GeneratorConfig(), seed=s))["test"]["accuracy"]
        secs = time.perf_counter() - t0
        ok &= abs(acc - 0.9371) <= 0.015 and secs < 10
        rows.append(f"seed {s}: {100 * acc:.2f}% ({secs:.2f}s)")
    assert verdict(1, ok, "perfect-model test accuracy within 93.71 +- 1.5pp; " + ", ".join(rows))


# 2 -------------------------------------------------------------------------

def _sweep_ok(acc, seed):
    return acc >= 0.92 and perfect_test_accuracy(seed) - acc <= 0.015


@pytest.fixture(scope="module")
def sweep():
    res = {1: best_of_seeds("exnet", 1, lambda a, s: 0.70 <= a <= 0.80)}
    for n in (3, 10, 100):
        res[n] = best_of_seeds("exnet", n, _sweep_ok)
    return res


@pytest.mark.slow
def test_c2a_exnet1_range(sweep, verdict):
    acc, seed, runs = sweep[1]
    ok = 0.70 <= acc <= 0.80 and all(t < POINT_BUDGET_S for _, _, t in runs)
    assert verdict("2a", ok, f"ExNet-1 test accuracy {100 * acc:.2f}% in [70, 80] ({_fmt(runs)})")


@pytest.mark.parametrize("n", [3, 10, 100])
@pytest.mark.slow
def test_c2b_exnet_n(sweep, verdict, n):
    acc, seed, runs = sweep[n]
    gap = perfect_test_accuracy(seed) - acc
    ok = _sweep_ok(acc, seed) and all(t < POINT_BUDGET_S for _, _, t in runs)
    assert verdict(f"2b (n={n})", ok,
                   f"ExNet-{n} test accuracy {100 * acc:.2f}% >= 92.00, gap to perfect {100 * gap:.2f}pp <= 1.5 "
                   f"({_fmt(runs)})")


@pytest.mark.slow
def test_c2c_gap(sweep, verdict):
    a1, a3 = sweep[1][0], sweep[3][0]
    assert verdict("2c", a3 - a1 >= 0.10, f"ExNet-3 beats ExNet-1 by {100 * (a3 - a1):.2f}pp >= 10")


# 3 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c3_cluster_recovery(verdict):
    lines, ok = [], False
    for s in SEEDS:
        model, index, acc, secs = trained("exnet", 100, s, "recovery")
        ds = dataset(s)
        truth = ds.investor_cluster[[int(k) for k in index.keys]]
        rec = cluster_recovery(extract_attributions(model, index.keys), truth)
        frac = rec.fraction_confident(0.99)
        lines.append(f"seed {s}: {100 * frac:.1f}% dominant > 0.99, ARI {rec.ari:.3f}, "
                     f"{rec.experts_used} experts used, test {100 * acc:.2f}%")
        if frac >= 0.95 and rec.ari >= 0.95:
            ok = True
            break
    assert verdict(3, ok, "ExNet-100 with lambda_entropy=0.1: " + "; ".join(lines))


# 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c4_embed_mlp(sweep, verdict):
    best_exnet = max(sweep[n][0] for n in (1, 3, 10, 100))
    acc, seed, runs = best_of_seeds("embed_mlp", 0, lambda a, s: 0.925 <= a <= best_exnet + 0.005)
    ok = 0.925 <= acc <= best_exnet + 0.005
    assert verdict(4, ok, f"Embed-MLP test accuracy {100 * acc:.2f}% >= 92.50 and <= best ExNet "
                          f"{100 * best_exnet:.2f}% + 0.5pp ({_fmt(runs)})")


# 5 -------------------------------------------------------------------------

def _layer_error(layer, x, training=True, seed=0):
    R = np.random.default_rng(seed).normal(size=layer.forward(x, training=training).shape)

    def f():
        return float((layer.forward(x, training=training) * R).sum())

    layer.forward(x, training=training)
    gx = layer.backward(R)
    errs = [rel_error(layer.grads[k], central_diff(f, p)) for k, p in layer.params.items()]
    errs.append(rel_error(gx, central_diff(f, x)))
    return max(errs)


def _exnet_error():
    g = np.random.default_rng(11)
    mc = ModelConfig(n_experts=2, embed_dim=3, hidden=[4], dropout=0.0, batchnorm=True, init_std=0.8)
    lc = LossConfig(lambda_spec=0.5, lambda_entropy=0.3, top_l=2)
    model = ExNetModel(4, 3, mc, lc, SeededRng(3))
    ids, X, y = np.array([0, 1, 2, 3, 1, 2]), g.normal(size=(6, 3)), np.array([0, 1, 1, 0, 1, 0])
    _, grads = model.loss_and_grads(ids, X, y)
    grads = {k: v.copy() for k, v in grads.items()}
    frozen = pair_weights(model.gate_forward(ids), lc.top_l)
    original = losses.pair_weights
    losses.pair_weights = lambda P, L: frozen
    try:
        return max(rel_error(grads[k], central_diff(lambda: model.loss_and_grads(ids, X, y)[0].total, p))
                   for k, p in model.params().items())
    finally:
        losses.pair_weights = original


def test_c5_gradients(verdict):
    t0 = time.perf_counter()
    g = np.random.default_rng(0)
    errs = {
        "dense": _layer_error(Dense(4, 3, SeededRng(1).stream("init")), g.normal(size=(5, 4))),
        "stacked dense": _layer_error(Dense(4, 3, SeededRng(2).stream("init"), n_stack=3), g.normal(size=(5, 4))),
        "relu": _layer_error(ReLU(), g.normal(size=(6, 4)) + 0.01),
        "batchnorm": _layer_error(InputBatchNorm(5), g.normal(size=(8, 5))),
    }
    emb = Embedding(6, 3, SeededRng(0).stream("init"), init_std=1.0)
    ids = np.array([0, 2, 2, 5])
    net = mlp_stack(3, [8, 4], 2, SeededRng(4).stream("init"), dropout=0.3, batchnorm=True)
    R = g.normal(size=(4, 2))

    def f():
        return float((net.forward(emb.forward(ids), training=True, rng=np.random.default_rng(99)) * R).sum())

    f()
    emb.backward(net.backward(R))
    grads = {**net.named_grads(), "emb": emb.grads["table"]}
    params = {**net.named_params(), "emb": emb.params["table"]}
    errs["embedding + bn/dense/relu/dropout stack"] = max(
        rel_error(grads[k], central_diff(f, p)) for k, p in params.items())
    errs["full ExNet (task + spec + entropy)"] = _exnet_error()
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-5 and secs < 30
    assert verdict(5, ok, f"max relative error {worst:.2e} < 1e-5 over {len(errs)} checks in {secs:.1f}s")


# 6 -------------------------------------------------------------------------

def test_c6_loss_oracles(verdict):
    ent_err = 0.0
    for s in range(100):
        g = np.random.default_rng(s)
        P = softmax(g.normal(scale=3, size=(int(g.integers(1, 20)), int(g.integers(1, 10)))), axis=1)
        ent_err = max(ent_err, abs(entropy_loss(P) - brute_entropy(P.tolist())))
    spec_err, in_range = 0.0, True
    for s in range(150):
        g = np.random.default_rng(1000 + s)
        n, B, C = int(g.integers(2, 7)), int(g.integers(2, 12)), int(g.integers(1, 4))
        F = softmax(g.normal(size=(n, B, C)), axis=-1)
        P = softmax(g.normal(scale=float(g.uniform(0.5, 4)), size=(B, n)), axis=1)
        L, rescale = int(g.integers(1, n + 1)), bool(g.integers(0, 2))
        r = spec_loss(F, P, L, rescale)
        raw, used = brute_spec(F.tolist(), P.tolist(), L, rescale)
        spec_err = max(spec_err, abs(r.raw - raw), abs(r.used - used))
        in_range &= -1.0 <= r.raw <= 1.0
    ok = ent_err < 1e-10 and spec_err < 1e-10 and in_range
    assert verdict(6, ok, f"entropy max error {ent_err:.1e} (100 batches), spec max error {spec_err:.1e} "
                          f"(150 configs), raw in [-1, 1]: {in_range}")


# 7 -------------------------------------------------------------------------

def test_c7_metric_oracles(verdict):
    ap_err = 0.0
    for s in range(60):
        g = np.random.default_rng(s)
        n = int(g.integers(2, 25))
        labels = g.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = np.round(g.random(n), 1)
        ap_err = max(ap_err, abs(average_precision(scores, labels) - brute_ap(scores.tolist(), labels.tolist())))
    ari_err = 0.0
    for s in range(60):
        g = np.random.default_rng(500 + s)
        n = int(g.integers(2, 31))
        a, b = g.integers(0, int(g.integers(1, 6)), size=n), g.integers(0, int(g.integers(1, 6)), size=n)
        ari_err = max(ari_err, abs(adjusted_rand_index(a, b) - brute_ari(a.tolist(), b.tolist())))
    ok = ap_err < 1e-12 and ari_err < 1e-12
    assert verdict(7, ok, f"AP max error {ap_err:.1e} over 60 sets, ARI max error {ari_err:.1e} over 60 partitions")


# 8 -------------------------------------------------------------------------

def test_c8_determinism(tmp_path, verdict):
    """Run gen/train/eval twice into the same directories and compare every artifact byte for byte."""
    small = ["--set", "data.generator.n_samples=4000", "--set", "data.generator.n_investors=40"]
    fast = ["--set", "optim.max_epochs=3", "--set", "model.embed_dim=8"]
    files = ["data/data.csv", "data/data.meta.json", "run/checkpoint.bin", "run/metrics.json", "run/history.csv",
             "run/attributions.csv", "eval/metrics.json"]
    snapshots = []
    for _ in range(2):
        assert main(["gen", "--seed", "5", "--out", str(tmp_path / "data"), *small]) == 0
        assert main(["train", "--config", str(tmp_path / "data" / "config.json"),
                     "--data", str(tmp_path / "data" / "data.csv"), "--out", str(tmp_path / "run"), *fast]) == 0
        assert main(["eval", str(tmp_path / "run" / "checkpoint.bin"), "--data", str(tmp_path / "data" / "data.csv"),
                     "--out", str(tmp_path / "eval")]) == 0
        snapshots.append({f: (tmp_path / f).read_bytes() for f in files})
        for f in files:
            (tmp_path / f).unlink()
    same = {f: snapshots[0][f] == snapshots[1][f] for f in files}
    assert verdict(8, all(same.values()), "bit-identical " + ", ".join(f"{f}={v}" for f, v in same.items()))


# 9 -------------------------------------------------------------------------

def test_c9_generator_statistics(verdict):
    details, ok = [], True
    for s in SEEDS:
        ds = dataset(s)
        rate = ds.labels.mean()
        ok &= abs(rate - 0.5) <= 0.01
        N = len(ds)
        for k, c in enumerate(default_clusters()):
            share = np.mean(ds.cluster == c.name)
            ok &= abs(share - c.sample_share) <= 3 * math.sqrt(c.sample_share * (1 - c.sample_share) / N)
            inv = np.mean(ds.investor_cluster == k)
            M = len(ds.investor_cluster)
            ok &= abs(inv - c.investor_share) <= 3 * math.sqrt(c.investor_share * (1 - c.investor_share) / M)
        ids = ds.investor_ids
        p = sigmoid(np.einsum("ij,ij->i", ds.investor_weights[ids], ds.features))
        consistent = bool(np.array_equal((p > ds.uniforms).astype(int), ds.labels))
        ok &= consistent
        details.append(f"seed {s}: rate {rate:.4f}, labels consistent {consistent}")
    assert verdict(9, ok, "; ".join(details) + "; shares within 3 sigma")


# 10 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_permutation_importance(verdict):
    g = np.random.default_rng(0)
    X = g.normal(size=(2000, 5))
    coef = np.array([1.5, -2.0, 0.0, 0.0, 0.7])
    y = (g.random(2000) < sigmoid(X @ coef)).astype(int)

    def linear(ids, Z):
        p = sigmoid(Z @ coef)
        return np.stack([1 - p, p], axis=1)

    lin = permutation_importance(linear, np.zeros(2000), X, y, {"dead": [2, 3], "live": [0, 1, 4]}, n_repeats=100)
    zero_ok = all(v == 0.0 for v in lin.per_repeat["dead"]) and lin.changes["live"] < 0

    model, index, _, _ = trained("exnet", 3, 0)
    ds = dataset(0)
    rows = ds.rows("test")
    ids, Xt, yt = index.encode(ds.categories[rows]), ds.features[rows], ds.labels[rows]
    rep = permutation_importance(model.predict, ids, Xt, yt, {"all": list(range(5))}, n_repeats=100)
    no_skill = float(np.mean([np.mean(yt == c) for c in (0, 1)]))
    shuffled = rep.baseline * (1 + rep.changes["all"] / 100)
    toward = rep.changes["all"] < 0 and abs(shuffled - no_skill) < 0.1 * abs(rep.baseline - no_skill)
    assert verdict(10, zero_ok and toward,
                   f"zero-coefficient group change {lin.changes['dead']:.2f}% in every repeat; trained ExNet-3 macro AP "
                   f"{rep.baseline:.4f} -> {shuffled:.4f} (no-skill {no_skill:.4f}, {rep.changes['all']:+.2f}%)")
