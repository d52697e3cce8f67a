"""Command-line entry point: ``itfr {synth,prep,ml1m,train,eval,report,sweep}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import DataError, convert_ml1m, generate_toy, load_dataset, read_split, split_dataset, \
    write_dataset, write_split
from .evaluate import METRICS, evaluate, write_report
from .model import DegenerateEmbedding, load_checkpoint, save_checkpoint
from .train import METHODS, NumericalError, TrainConfig, train

_logger = logging.getLogger("itfr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag name -> TrainConfig field; all default to None so a --config file can sit underneath
_HYPER = {
    "lr": float, "batch_size": int, "epochs": int, "negatives": int, "l2": float, "d": int,
    "eta": float, "gamma": float, "rho": float, "tau": float, "seed": int, "eval_every": int,
    "patience": int, "k": int, "init_scale": float,
}
_FLAGS = ("no_sa", "no_cb", "no_pn", "pn_only")
_RUN_KEYS = ("method", "variant", "seed", "eta", "gamma", "rho", "tau", "l2", "lr", "epochs",
             "batch_size", "negatives", "d", "group_mixing", "beta_source")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_args(p):
    p.add_argument("--data", required=True, help="directory written by `prep`")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (or a run manifest); flags override it")
    p.add_argument("--method", choices=METHODS)
    for flag in _FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), action="store_true", default=None)
    for name, typ in _HYPER.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ)
    p.add_argument("--beta-source", choices=("sharp", "plain"))
    p.add_argument("--group-mixing", choices=("count", "mean"))
    p.add_argument("--diagnostics", action="store_true", help="write per-epoch weight diagnostics")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="itfr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the two-gender, two-genre toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items-per-group", type=int, default=50)
    p.add_argument("--pos-per-user", type=int, default=20)
    p.add_argument("--users-per-group", type=int, default=100)
    p.add_argument("--minority-per-group", type=int, default=10)

    p = sub.add_parser("prep", help="load TSVs, split, write split files")
    p.add_argument("--interactions", required=True)
    p.add_argument("--user-groups", required=True)
    p.add_argument("--item-groups", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ml1m", help="convert a local MovieLens-1M directory into TSV inputs")
    p.add_argument("--raw", required=True, help="directory holding users.dat, movies.dat, ratings.dat")
    p.add_argument("--out", required=True)

    _add_train_args(sub.add_parser("train", help="train one model and evaluate it on test"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate report.csv files into mean/std rows")
    p.add_argument("--runs", nargs="+", required=True, help="run directories or report CSV files")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="train every combination in a JSON grid")
    p.add_argument("--grid", required=True, help='{"base": {...}, "grid": {"eta": [..], "seed": [..]}}')
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return raw.get("config", raw)


def _config_from_args(args) -> TrainConfig:
    merged = _load_config_file(args.config) if args.config else {}
    for name in list(_HYPER) + list(_FLAGS) + ["method", "beta_source", "group_mixing"]:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def variant_name(cfg: TrainConfig) -> str:
    parts = [cfg.method]
    parts += [flag.replace("_", "-") for flag in ("no_sa", "no_cb", "no_pn") if getattr(cfg, flag)]
    if cfg.pn_only:
        parts.append("pn")
    return "+".join(parts)


def run_info(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d["variant"] = variant_name(cfg)
    return {key: d[key] for key in _RUN_KEYS}


def run_training(cfg: TrainConfig, data_dir, out_dir, diagnostics=False) -> dict:
    """Train, checkpoint, evaluate and write a self-describing run directory."""
    ds, split = read_split(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, split, ds)
    save_checkpoint(result.table, out / "checkpoint.bin")
    result.write_log(out / "train_log.csv")
    if diagnostics:
        with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
            for row in result.diagnostics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    report, util = evaluate(result.table, ds, split, cfg.k)
    info = run_info(cfg)
    write_report(out, report, util, ds, info)
    manifest = {
        "config": cfg.to_dict(),
        "data": str(data_dir),
        "data_sidecar_sha256": _sha256(Path(data_dir) / "split.json"),
        "seeds": [cfg.seed],
        "best_epoch": result.best_epoch,
        "best_val_recall": result.best_recall,
        "artifacts": {name: _sha256(out / name)
                      for name in ("checkpoint.bin", "train_log.csv", "report.json", "report.csv",
                                   "utility.csv")},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return report.metrics()


def cmd_synth(args):
    ds = generate_toy(args.seed, users_per_group=args.users_per_group,
                      minority_per_group=args.minority_per_group,
                      items_per_group=args.items_per_group, positives_per_user=args.pos_per_user)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.positives)} interactions, {ds.n_users} users, {ds.n_items} items to {args.out}")


def cmd_prep(args):
    ds = load_dataset(args.interactions, args.user_groups, args.item_groups)
    split = split_dataset(ds, args.ratios, args.seed)
    write_split(ds, split, args.out)
    print(f"train/validation/test = {len(split.train)}/{len(split.validation)}/{len(split.test)}")


def cmd_ml1m(args):
    ds = convert_ml1m(args.raw, args.out)
    print(f"kept {ds.n_users} users, {ds.n_items} items, {len(ds.positives)} interactions")


def cmd_train(args):
    cfg = _config_from_args(args)
    metrics = run_training(cfg, args.data, args.out, args.diagnostics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_eval(args):
    ds, split = read_split(args.data)
    table = load_checkpoint(args.checkpoint)
    if (table.n_users, table.n_items) != (ds.n_users, ds.n_items):
        raise DataError("checkpoint shape does not match the dataset")
    manifest_path = Path(args.checkpoint).with_name("manifest.json")
    if manifest_path.exists():
        cfg = TrainConfig.from_dict(_load_config_file(manifest_path))
        info = run_info(cfg)
        k = args.k or cfg.k
    else:
        info = {"checkpoint": str(args.checkpoint)}
        k = args.k or 20
    report, util = evaluate(table, ds, split, k)
    write_report(args.out, report, util, ds, info)
    print(json.dumps(report.metrics(), sort_keys=True))


def _read_report_rows(paths) -> list:
    rows = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            path = path / "report.csv"
        with open(path, encoding="utf-8", newline="") as fh:
            rows.extend(csv.DictReader(fh))
    if not rows:
        raise DataError("no report rows found")
    return rows


def aggregate_reports(rows) -> list:
    """Mean and population std of every metric per configuration (seed excluded)."""
    metric_cols = [c for c in rows[0] if c.split("@")[0] in METRICS]
    key_cols = [c for c in rows[0] if c not in metric_cols and c != "seed"]
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[c] for c in key_cols), []).append(row)
    out = []
    for key, members in groups.items():
        agg = dict(zip(key_cols, key))
        agg["runs"] = len(members)
        agg["seeds"] = " ".join(sorted((m.get("seed", "") for m in members), key=str))
        for c in metric_cols:
            vals = np.array([float(m[c]) if m[c] not in ("", "nan") else math.nan for m in members])
            agg[f"{c}_mean"] = repr(float(np.mean(vals)))
            agg[f"{c}_std"] = repr(float(np.std(vals)))
        out.append(agg)
    return out


def cmd_report(args):
    agg = aggregate_reports(_read_report_rows(args.runs))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(agg[0]))
        writer.writeheader()
        writer.writerows(agg)
    print(f"wrote {len(agg)} aggregated rows to {out}")


def expand_grid(grid_spec: dict) -> list:
    base = dict(grid_spec.get("base", {}))
    grid = grid_spec.get("grid", {})
    keys = sorted(grid)
    combos = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = dict(base)
        cfg.update(zip(keys, values))
        name = "_".join(f"{k}={v}" for k, v in zip(keys, values)) or "run"
        combos.append((name, cfg))
    return combos


def cmd_sweep(args):
    with open(args.grid, encoding="utf-8") as fh:
        grid_spec = json.load(fh)
    try:
        combos = [(name, TrainConfig.from_dict(cfg)) for name, cfg in expand_grid(grid_spec)]
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    run_dirs = []
    for name, cfg in combos:
        run_dir = out / name
        _logger.info("sweep run %s", name)
        run_training(cfg, args.data, run_dir)
        run_dirs.append(run_dir)
    agg = aggregate_reports(_read_report_rows(run_dirs))
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(agg[0]))
        writer.writeheader()
        writer.writerows(agg)
    print(f"{len(run_dirs)} runs; summary in {out / 'summary.csv'}")


COMMANDS = {"synth": cmd_synth, "prep": cmd_prep, "ml1m": cmd_ml1m, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report, "sweep": cmd_sweep}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateEmbedding, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
