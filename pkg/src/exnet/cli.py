"""Command-line entry point: ``exnet gen | train | eval | analyze | sweep``.

Exit codes: 0 success, 2 user or configuration error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (
    cluster_recovery, export_reports, metric_report, permutation_importance, with_percentages, write_json,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError, DataConfig, GeneratorConfig, RunConfig, config_from_dict, config_to_dict, load_config,
    save_config, with_overrides,
)
from .core import SeededRng
from .data import DataError, Dataset, read_csv
from .model import ExNetModel, extract_attributions
from .synthdata import generate, perfect_model_metrics
from .train import fit_run

log = logging.getLogger("exnet")

USER_ERRORS = (ConfigError, DataError, CheckpointError, FileNotFoundError)


class UserError(Exception):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, default=None) -> RunConfig:
    """Flags > config file > defaults."""
    cfg = load_config(args.config) if getattr(args, "config", None) else (default or RunConfig())
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    if getattr(args, "data", None) is not None:
        overrides["data.path"] = args.data
    return with_overrides(cfg, overrides) if overrides else cfg


def load_data(data_cfg: DataConfig, run_seed) -> Dataset:
    if data_cfg.path:
        return read_csv(data_cfg.path, data_cfg.gating_column, data_cfg.feature_columns)
    if data_cfg.generator is not None:
        return generate(data_cfg.generator, seed=run_seed if data_cfg.seed is None else data_cfg.seed)
    raise ConfigError("data: give either 'path' or 'generator'")


def _out_dir(cfg_out, fallback):
    out = Path(cfg_out or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    default = RunConfig(data=DataConfig(generator=GeneratorConfig()))
    cfg = resolve_config(args, default)
    gen_cfg = cfg.data.generator or GeneratorConfig()
    seed = cfg.seed if cfg.data.seed is None else cfg.data.seed
    try:
        ds = generate(gen_cfg, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg.out, "data")
    csv_path, meta_path = ds.save(out / "data.csv")
    save_config(cfg, out / "config.json")
    lines = [f"rows {len(ds)}  investors {gen_cfg.n_investors}  positive rate {ds.labels.mean():.4f}"]
    for k, name in enumerate(ds.cluster_names):
        lines.append(
            f"  {name:<8} sample share {np.mean(ds.cluster == name):.4f}  "
            f"investor share {np.mean(ds.investor_cluster == k):.4f}"
        )
    lines.append(f"wrote {csv_path} and {meta_path}")
    print("\n".join(lines))
    return 0


def run_training(cfg: RunConfig, out: Path, ds=None, quiet=False):
    """Train one configuration and write its full artifact set to ``out``."""
    ds = ds if ds is not None else load_data(cfg.data, cfg.seed)
    model, history, index = fit_run(ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    # the output location is not part of the model, so it stays out of the checkpoint
    save_checkpoint(out / "checkpoint.bin", model, index, {**config_to_dict(cfg), "out": None})
    report = metric_report(model, index, ds)
    report["history"] = {"best_epoch": history.best_epoch, "epochs_run": len(history),
                         "stopped_early": history.stopped_early}
    export_reports(model, index, ds, out, history=history, report=report)
    if not quiet:
        for split, m in report["splits"].items():
            print(f"{split:<5} accuracy {100 * m['accuracy']:.2f}%")
        for name, m in sorted(report["clusters"].get("test", {}).items()):
            print(f"  test/{name:<8} accuracy {100 * m['accuracy']:.2f}%")
    return model, history, index, report


def cmd_train(args):
    cfg = resolve_config(args)
    out = _out_dir(cfg.out, "run")
    if cfg.out is None:
        cfg = with_overrides(cfg, {"out": str(out)})
    run_training(cfg, out)
    return 0


def _checkpoint_data(header, args):
    if args.data:
        raw = header.get("config") or {}
        data = raw.get("data") or {}
        return read_csv(args.data, data.get("gating_column", "investor_id"), data.get("feature_columns"))
    if not header.get("config"):
        raise ConfigError("checkpoint carries no config; pass --data")
    cfg = config_from_dict(header["config"])
    return load_data(cfg.data, cfg.seed)


def _compatible(model, ds):
    if ds.n_features != model.num_features:
        raise DataError(f"dataset has {ds.n_features} features, checkpoint expects {model.num_features}")


def cmd_eval(args):
    model, index, header = load_checkpoint(args.checkpoint)
    ds = _checkpoint_data(header, args)
    _compatible(model, ds)
    report = metric_report(model, index, ds)
    if args.perfect:
        report["perfect_model"] = perfect_model_metrics(ds)
    out = _out_dir(args.out, Path(args.checkpoint).parent / "eval")
    write_json(with_percentages(report), out / "metrics.json")
    for split, m in report["splits"].items():
        print(f"{split:<5} accuracy {100 * m['accuracy']:.2f}%")
    if args.perfect:
        for split, m in report["perfect_model"].items():
            print(f"perfect {split:<5} accuracy {100 * m['accuracy']:.2f}%")
    return 0


def entity_truth(ds, index):
    """Ground-truth cluster of each entity (its first row), or None."""
    if ds.cluster is None:
        return None
    first = {}
    for cat, cl in zip(ds.categories, ds.cluster):
        first.setdefault(cat, cl)
    return np.array([first[k] for k in index.keys], dtype=object)


def cmd_analyze(args):
    model, index, header = load_checkpoint(args.checkpoint)
    ds = _checkpoint_data(header, args)
    _compatible(model, ds)
    out = _out_dir(args.out, Path(args.checkpoint).parent / "analysis")
    export_reports(model, index, ds, out)
    result = {}
    if isinstance(model, ExNetModel):
        truth = entity_truth(ds, index)
        if truth is None:
            print("no ground-truth clusters in the dataset; cluster recovery skipped")
        else:
            rec = cluster_recovery(extract_attributions(model, index.keys), truth)
            result["cluster_recovery"] = {
                "ari": rec.ari, "experts_used": rec.experts_used,
                "fraction_dominant_above_0.99": rec.fraction_confident(0.99),
                "mean_dominant_prob": float(rec.dominant_prob.mean()),
            }
            print(f"ARI {rec.ari:.4f}  experts used {rec.experts_used}  "
                  f"dominant > 0.99: {100 * rec.fraction_confident(0.99):.2f}%")
    if args.groups:
        groups = json.loads(Path(args.groups).read_text()) if Path(args.groups).is_file() else json.loads(args.groups)
        rows = ds.rows(args.split)
        if args.entity is not None:
            rows = rows[ds.categories[rows] == args.entity]
            if len(rows) == 0:
                raise DataError(f"entity {args.entity!r} has no rows in split {args.split!r}")
        ids = index.encode(ds.categories[rows])
        try:
            imp = permutation_importance(model.predict, ids, ds.features[rows], ds.labels[rows], groups,
                                         metric=args.metric, n_repeats=args.repeats, seed=args.seed or 0,
                                         feature_names=ds.feature_names)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        result["permutation_importance"] = {
            "metric": imp.metric, "baseline": imp.baseline, "n_repeats": imp.n_repeats,
            "changes_pct": {g: round(v, 2) for g, v in imp.changes.items()},
        }
        for g, v in imp.changes.items():
            print(f"{g:<16} {v:+.2f}%")
    write_json(result, out / "analysis.json")
    return 0


# sweeps ---------------------------------------------------------------------

SWEEP_KEYS = {"base", "axis", "overrides", "seeds", "repeats", "mode", "random"}


def load_sweep(path):
    spec = json.loads(Path(path).read_text())
    unknown = set(spec) - SWEEP_KEYS
    if unknown:
        raise ConfigError(f"sweep spec: unknown key(s) {sorted(unknown)}")
    base = config_from_dict(spec.get("base", {}))
    mode = spec.get("mode", "grid")
    if mode not in ("grid", "random"):
        raise ConfigError("sweep mode must be 'grid' or 'random'")
    if mode == "grid":
        axis = spec.get("axis")
        if not axis or "key" not in axis or not axis.get("values"):
            raise ConfigError("sweep spec needs axis.key and a non-empty axis.values")
    return spec, base


def sweep_points(spec, base: RunConfig):
    """List of ``(label, overrides)`` per point, in axis order."""
    root = SeededRng(base.seed)
    if "seeds" in spec:
        seeds = [int(s) for s in spec["seeds"]]
    else:
        seeds = [root.child(f"repeat:{r}").seed % 2**31 for r in range(int(spec.get("repeats", 1)))]
    points = []
    if spec.get("mode", "grid") == "grid":
        key = spec["axis"]["key"]
        for value in spec["axis"]["values"]:
            extra = dict(spec.get("overrides", {}).get(str(value), {}))
            for s in seeds:
                points.append((f"{key.split('.')[-1]}={value}_seed={s}", {key: value, "seed": s, **extra}))
    else:
        rnd = spec.get("random", {})
        space = rnd.get("space", {})
        g = root.stream("random-search")
        for i in range(int(rnd.get("n_samples", 10))):
            ov = {}
            for key, dist in space.items():
                if "choice" in dist:
                    ov[key] = dist["choice"][int(g.integers(len(dist["choice"])))]
                elif "log_uniform" in dist:
                    lo, hi = dist["log_uniform"]
                    ov[key] = float(np.exp(g.uniform(np.log(lo), np.log(hi))))
                elif "uniform" in dist:
                    lo, hi = dist["uniform"]
                    ov[key] = float(g.uniform(lo, hi))
                else:
                    raise ConfigError(f"random space {key!r}: use choice, uniform or log_uniform")
            for s in seeds:
                points.append((f"sample={i}_seed={s}", {**ov, "seed": s}))
    return points


def _run_point(args):
    cfg_dict, out = args
    cfg = config_from_dict(cfg_dict)
    _, history, _, report = run_training(cfg, Path(out), quiet=True)
    return report, history.best_epoch, len(history)


def cmd_sweep(args):
    spec, base = load_sweep(args.spec)
    out = _out_dir(args.out or base.out, "sweep")
    points = sweep_points(spec, base)
    jobs = []
    for label, ov in points:
        cfg = with_overrides(base, {**ov, "out": str(out / label)})
        jobs.append((config_to_dict(cfg), str(out / label)))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    cluster_names = sorted({c for r, _, _ in results for c in r["clusters"].get("test", {})})
    header = ["point", *sorted({k for _, ov in points for k in ov}), "train_acc", "val_acc", "test_acc",
              *[f"test_acc_{c}" for c in cluster_names], "best_epoch", "epochs_run"]
    keys = header[1:header.index("train_acc")]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for (label, ov), (report, best, n_ep) in zip(points, results):
            sp = report["splits"]
            row = [label, *[ov.get(k, "") for k in keys]]
            row += [f"{100 * sp[s]['accuracy']:.2f}" if s in sp else "" for s in ("train", "val", "test")]
            test_cl = report["clusters"].get("test", {})
            row += [f"{100 * test_cl[c]['accuracy']:.2f}" if c in test_cl else "" for c in cluster_names]
            row += [best, n_ep]
            w.writerow(row)
            print(",".join(str(v) for v in row))
    print(f"wrote {out / 'summary.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="exnet", description="ExNet experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        if data:
            sp.add_argument("--data", help="dataset CSV (overrides data.path)")

    common(sub.add_parser("gen", help="generate the synthetic dataset"), data=False)
    common(sub.add_parser("train", help="train a model"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data")
    ev.add_argument("--out")
    ev.add_argument("--perfect", action="store_true", help="also report the perfect model")

    an = sub.add_parser("analyze", help="attributions, cluster recovery, permutation importance")
    an.add_argument("checkpoint")
    an.add_argument("--data")
    an.add_argument("--out")
    an.add_argument("--groups", help="JSON mapping group -> columns (inline or a file path)")
    an.add_argument("--repeats", type=int, default=100)
    an.add_argument("--metric", choices=["macro_ap", "accuracy"], default="macro_ap")
    an.add_argument("--split", default="test")
    an.add_argument("--entity", help="restrict importance to one gating key")
    an.add_argument("--seed", type=int, default=0)

    sw = sub.add_parser("sweep", help="run a grid or random sweep")
    sw.add_argument("spec")
    sw.add_argument("--out")
    sw.add_argument("--jobs", type=int, default=1)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
