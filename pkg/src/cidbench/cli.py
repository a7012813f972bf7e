"""Command-line entry point: ``cidbench <subcommand> [options]``.

Exit codes: 0 on success, 1 when a sweep produced no successful cell,
2 on usage, config or data errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import atomic_write_text, load_dataset, save_dataset
from .errors import CidBenchError, ConfigError
from .forge import ClusterWorldConfig, gen_cluster_world, gen_toy, inject_bias
from .metrics import full_report
from .runner import (
    TRAIN_DEFAULTS,
    bias_sensitivity,
    load_config,
    parse_config,
    run_experiment,
    tau_ablation,
    write_curves,
)
from .trainer import TrainConfig, load_model, save_model, train
from .weighting import CidConfig, cid_weights, ifw_weights, normalize_per_class

CONFIG_HELP = """\
Experiment config (JSON). Unknown keys are rejected.
  data      exactly one of
              path: dataset directory (meta.csv, features.csv, proxies.csv)
              toy: true
              world: {num_identities, samples_per_identity, proxy_dim, cluster_std,
                      skew_fraction, skewed_positive_rate, base_positive_rate,
                      task_signal, noise_std, split_fractions, identity_disjoint}
            plus optional normalize (default true), proxies_from_features
  bias      {spec: e.g. "FPMN", p: percent removed from each listed cell}
  train     {method: name or list of ce|ifw|cid|dro|irm|arl, epochs, batch_size,
             lr, lr_decay_epoch, lr_decay_factor, momentum, weight_decay,
             architecture: linear|mlp1, hidden_dim,
             cid: {tau: number or list}, dro: {nu}, irm: {lambda}, arl: {adversary_lr}}
  metrics   {radius_count (default 10), min_id_count (default 1)}
  seeds     list of unsigned integers (default [1, 2, 3, 4, 5])
  out       output directory (the --out flag overrides it)
"""


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(args, name):
    if getattr(args, name) is None:
        raise SystemExit(f"cidbench {args.command}: --{name.replace('_', '-')} is required")
    return getattr(args, name)


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- subcommands ------------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    save_dataset(gen_toy(args.seed), _require(args, "out"))
    return 0


def cmd_gen_world(args) -> int:
    params = {}
    if args.config:
        doc = _read_json(args.config)
        params = doc.get("data", {}).get("world", doc)
    try:
        cfg = ClusterWorldConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad world config: {exc}") from None
    out = Path(_require(args, "out"))
    save_dataset(gen_cluster_world(cfg, args.seed), out)
    _write_json(out / "world.json", {"seed": args.seed, "world": cfg.to_dict()})
    return 0


def cmd_inject_bias(args) -> int:
    ds = load_dataset(_require(args, "data"))
    biased, removed = inject_bias(ds, args.spec, args.p, args.seed)
    out = Path(_require(args, "out"))
    save_dataset(biased, out)
    _write_json(out / "bias_manifest.json",
                {"spec": args.spec, "p": args.p, "seed": args.seed, "cells": removed})
    return 0


def cmd_weights(args) -> int:
    ds = load_dataset(_require(args, "data"))
    rows = np.arange(ds.n) if args.subset == "all" else ds.split_indices(args.subset)
    labels = ds.labels[rows]
    if args.method == "cid":
        raw = cid_weights(ds.proxies[rows], labels, None, CidConfig(args.tau))
        norm = normalize_per_class(raw, labels)
        raw_w, normed = raw.weights, norm.weights
        z = np.array([raw.class_normalizers[int(c)] for c in labels])
    else:
        w = ifw_weights(labels)
        raw_w = normed = w.weights
        z = np.ones(len(rows))
    lines = ["sample_id,raw_weight,normalizer,normalized_weight"]
    lines += [f"{ds.sample_ids[i]},{a:.17g},{b:.17g},{c:.17g}" for i, a, b, c in zip(rows, raw_w, z, normed)]
    out = Path(_require(args, "out"))
    target = out / "weights.csv" if out.suffix != ".csv" else out
    target.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(target, "\n".join(lines) + "\n")
    return 0


def _train_config_from_file(path, seed: int) -> TrainConfig:
    section = dict(TRAIN_DEFAULTS)
    if path:
        doc = _read_json(path)
        if "data" in doc:
            cfg = parse_config(doc)
            section = dict(cfg.train, method=cfg.methods[0])
        else:
            section.update(doc.get("train", doc))
    section["seed"] = seed
    try:
        return TrainConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def cmd_train(args) -> int:
    ds = load_dataset(_require(args, "data"))
    cfg = _train_config_from_file(args.config, args.seed)
    model, history = train(ds, cfg)
    save_model(model, cfg, _require(args, "out"),
               {"best_epoch": history.best_epoch, "best_val_acc": history.best_val_acc})
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(_require(args, "data"))
    model, _ = load_model(_require(args, "model"))
    report = full_report(ds, model, args.split, args.radius_count, args.min_id_count).to_dict()
    out = Path(_require(args, "out"))
    target = out if out.suffix == ".json" else out / "report.json"
    _write_json(target, report)
    write_curves(target.parent, report)
    return 0


def _experiment_config(args):
    cfg = load_config(_require(args, "config"))
    if args.out is not None:
        cfg.raw["out"] = args.out
        cfg.out = args.out
    if args.seeds:
        cfg.raw["seeds"] = args.seeds
        cfg.seeds = list(args.seeds)
    return cfg


def _finish(result) -> int:
    summary = {k.name: k_cell["mean"] for k, k_cell in result.cells.items()}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 1 if result.all_failed else 0


def cmd_experiment(args) -> int:
    return _finish(run_experiment(_experiment_config(args), force=args.force))


def cmd_tau_ablation(args) -> int:
    cfg = _experiment_config(args)
    taus = args.taus if args.taus else cfg.taus
    return _finish(tau_ablation(cfg, taus, force=args.force))


def cmd_bias_sensitivity(args) -> int:
    cfg = _experiment_config(args)
    return _finish(bias_sensitivity(cfg, args.setups, args.ps, force=args.force))


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed (default 0)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--config", help="JSON config file; see `cidbench --help` for keys")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="cidbench",
        description="Conditional inverse density weighting benchmark.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    add("gen-toy", cmd_gen_toy, "write the 14-point two-class toy dataset to --out")
    add("gen-world", cmd_gen_world,
        "write a synthetic cluster world to --out; --config holds ClusterWorldConfig keys")

    p = add("inject-bias", cmd_inject_bias, "remove p percent of each listed (group, label) cell from train/val")
    p.add_argument("--data", help="input dataset directory")
    p.add_argument("--spec", required=True, help="cells such as FP, MN or FPMN")
    p.add_argument("--p", type=float, required=True, help="percent of each cell to remove")

    p = add("weights", cmd_weights, "write weights.csv for a dataset split")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--tau", type=float, default=0.1, help="CID temperature (default 0.1)")
    p.add_argument("--subset", choices=["train", "val", "test", "all"], default="train")
    p.add_argument("--method", choices=["cid", "ifw"], default="cid")

    p = add("train", cmd_train, "train one model; --out is the model JSON path")
    p.add_argument("--data", help="dataset directory")

    p = add("eval", cmd_eval, "evaluate a model; writes report.json plus curve CSVs")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--radius-count", type=int, default=10)
    p.add_argument("--min-id-count", type=int, default=1)

    for name, func, text in (
        ("experiment", cmd_experiment, "run every method/seed cell of --config"),
        ("tau-ablation", cmd_tau_ablation, "sweep the CID temperature; writes tau_curve.csv"),
        ("bias-sensitivity", cmd_bias_sensitivity, "sweep bias setups and levels; writes sensitivity.csv"),
    ):
        p = add(name, func, text)
        p.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
        p.add_argument("--force", action="store_true", help="overwrite results of a different config")
        if name == "tau-ablation":
            p.add_argument("--taus", type=float, nargs="+", help="temperatures (default: config cid.tau)")
        if name == "bias-sensitivity":
            p.add_argument("--setups", nargs="+", default=["FP", "MN", "FPMN"])
            p.add_argument("--ps", type=float, nargs="+", default=[25, 50, 75, 90])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CidBenchError, OSError, json.JSONDecodeError) as exc:
        print(f"cidbench {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
