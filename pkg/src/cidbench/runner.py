"""Experiment orchestration: config parsing, method/tau/bias sweeps over
seeds, and the JSON/CSV artifacts each sweep leaves behind.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
from scipy.stats import spearmanr

from .data import EmbeddingDataset, atomic_write_text, load_dataset, normalize_proxies
from .errors import CidBenchError, ConfigError, ParseError
from .forge import ClusterWorldConfig, gen_cluster_world, gen_toy, inject_bias, parse_subpop_spec
from .metrics import MetricsReport, full_report
from .trainer import METHODS, TrainConfig, save_model, train
from .weighting import CidConfig

log = logging.getLogger(__name__)

DEFAULT_SEEDS = [1, 2, 3, 4, 5]

_number = {"type": "number"}
_count = {"type": "integer", "minimum": 0}

WORLD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "num_identities": _count,
        "samples_per_identity": _count,
        "proxy_dim": _count,
        "cluster_std": _number,
        "skew_fraction": _number,
        "skewed_positive_rate": _number,
        "base_positive_rate": _number,
        "task_signal": _number,
        "noise_std": _number,
        "split_fractions": {"type": "array", "items": _number, "minItems": 3, "maxItems": 3},
        "identity_disjoint": {"type": "boolean"},
    },
}

_methods = {"oneOf": [
    {"enum": list(METHODS)},
    {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
]}
_taus = {"oneOf": [_number, {"type": "array", "items": _number, "minItems": 1}]}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "toy": {"type": ["boolean", "object"]},
                "world": WORLD_SCHEMA,
                "normalize": {"type": "boolean"},
                "proxies_from_features": {"type": "boolean"},
            },
            "oneOf": [{"required": ["path"]}, {"required": ["toy"]}, {"required": ["world"]}],
        },
        "bias": _section({"spec": {"type": "string"}, "p": _number}),
        "train": _section({
            "method": _methods,
            "epochs": _count,
            "batch_size": _count,
            "lr": _number,
            "lr_decay_epoch": {"type": ["integer", "null"], "minimum": 0},
            "lr_decay_factor": _number,
            "momentum": _number,
            "weight_decay": _number,
            "architecture": {"enum": ["linear", "mlp1"]},
            "hidden_dim": _count,
            "cid": _section({"tau": _taus}),
            "dro": _section({"nu": _number}),
            "irm": _section({"lambda": _number}),
            "arl": _section({"adversary_lr": _number}),
        }),
        "metrics": _section({"radius_count": _count, "min_id_count": _count}),
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out": {"type": "string"},
    },
}

# Recipe used when a config leaves the train section partly empty.
TRAIN_DEFAULTS = {
    "method": "ce",
    "epochs": 60,
    "batch_size": 16,
    "lr": 0.01,
    "lr_decay_epoch": 30,
    "lr_decay_factor": 10.0,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "architecture": "linear",
    "hidden_dim": 32,
}


@dataclass
class ExperimentConfig:
    raw: dict
    data: dict
    train: dict
    methods: list
    taus: list
    bias: Optional[dict] = None
    radius_count: int = 10
    min_id_count: int = 1
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out: Optional[str] = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def train_config(self, method: str, seed: int, tau: Optional[float] = None) -> TrainConfig:
        t = dict(self.train)
        t.update(method=method, seed=seed)
        if tau is not None:
            t["cid"] = {"tau": tau}
        return TrainConfig.from_dict(t)


def config_hash(raw: dict) -> str:
    body = {k: v for k, v in raw.items() if k != "out"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    raw = copy.deepcopy(raw)
    train_sec = dict(TRAIN_DEFAULTS)
    train_sec.update(raw.get("train", {}))
    methods = train_sec.pop("method")
    methods = [methods] if isinstance(methods, str) else list(methods)
    taus = train_sec.get("cid", {}).get("tau", CidConfig().tau)
    taus = [taus] if not isinstance(taus, list) else list(taus)
    train_sec["cid"] = {"tau": taus[0]}
    if "world" in raw["data"]:
        ClusterWorldConfig(**raw["data"]["world"])
    if "bias" in raw:
        try:
            parse_subpop_spec(raw["bias"].get("spec", ""))
        except ParseError as exc:
            raise ConfigError(f"invalid config at bias/spec: {exc}") from None
        if not 0 <= raw["bias"].get("p", 0) <= 100:
            raise ConfigError("bias.p must lie in [0, 100]")
    cfg = ExperimentConfig(
        raw=raw,
        data=raw["data"],
        train=train_sec,
        methods=methods,
        taus=taus,
        bias=raw.get("bias"),
        radius_count=raw.get("metrics", {}).get("radius_count", 10),
        min_id_count=raw.get("metrics", {}).get("min_id_count", 1),
        seeds=list(raw.get("seeds", DEFAULT_SEEDS)),
        out=raw.get("out"),
    )
    # fail fast on bad hyperparameters
    for m in methods:
        cfg.train_config(m, cfg.seeds[0], taus[0] if m == "cid" else None)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(json.load(fh))


# --- data ----------------------------------------------------------------------

def build_dataset(data: dict, seed: int) -> EmbeddingDataset:
    if "path" in data:
        ds = load_dataset(data["path"], proxies_from_features=data.get("proxies_from_features", False))
    elif "toy" in data:
        ds = gen_toy(seed)
    else:
        ds = gen_cluster_world(ClusterWorldConfig(**data["world"]), seed)
    if data.get("normalize", True) and not ds.normalized:
        ds = normalize_proxies(ds)
    return ds


# --- sweeps --------------------------------------------------------------------

@dataclass(frozen=True)
class CellKey:
    method: str
    tau: Optional[float]
    setup: Optional[str]
    p: float

    @property
    def name(self) -> str:
        parts = [self.method]
        if self.tau is not None:
            parts.append(f"tau{self.tau:g}")
        if self.setup is not None:
            parts.append(f"{self.setup}{self.p:g}")
        return "_".join(parts)

    def as_dict(self) -> dict:
        return {"method": self.method, "tau": self.tau, "setup": self.setup, "p": self.p}


@dataclass
class SweepResult:
    config_hash: str
    cells: dict = field(default_factory=dict)  # CellKey -> {"per_seed": {...}, "mean": {...}, "std": {...}}

    @property
    def all_failed(self) -> bool:
        return not any(
            "error" not in rep for cell in self.cells.values() for rep in cell["per_seed"].values()
        )

    def mean(self, key: CellKey, metric: str) -> Optional[float]:
        return self.cells[key]["mean"].get(metric)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "cells": [
                dict(k.as_dict(), name=k.name, **{
                    "per_seed": {str(s): r for s, r in v["per_seed"].items()},
                    "mean": v["mean"],
                    "std": v["std"],
                })
                for k, v in self.cells.items()
            ],
        }


def _aggregate(per_seed: dict) -> tuple[dict, dict]:
    ok = [r for r in per_seed.values() if "error" not in r]
    mean, std = {}, {}
    for metric in MetricsReport.SCALARS:
        vals = [r[metric] for r in ok if r.get(metric) is not None]
        if vals:
            arr = np.array(vals, dtype=np.float64)
            mean[metric] = float(arr.mean())
            std[metric] = float(arr.std())
    return mean, std


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_curves(directory: Path, report: dict) -> None:
    if report.get("mm_curve") is not None:
        _write_csv(directory / "mm_curve.csv", ["k", "mm"],
                   [(k + 1, v) for k, v in enumerate(report["mm_curve"])])
    if report.get("den_curve") is not None:
        den = report["den_curve"]
        _write_csv(directory / "den_curve.csv", ["radius", "den"], list(zip(den["radii"], den["values"])))


def prepare_output(out: Optional[str], chash: str, raw: dict, force: bool) -> Optional[Path]:
    if out is None:
        return None
    out = Path(out)
    marker = out / "run_config.json"
    if marker.exists() and not force:
        previous = json.loads(marker.read_text(encoding="utf-8")).get("config_hash")
        if previous != chash:
            raise ConfigError(
                f"{out} holds results of config {previous}, not {chash}; pass force to overwrite"
            )
    _write_json(marker, {"config_hash": chash, "config": raw})
    return out


def run_grid(cfg: ExperimentConfig, grid: list, force: bool = False) -> SweepResult:
    """Run every CellKey in ``grid`` for every seed in ``cfg.seeds``."""
    chash = cfg.config_hash
    out = prepare_output(cfg.out, chash, cfg.raw, force)
    result = SweepResult(config_hash=chash)
    manifests = {}
    for seed in cfg.seeds:
        base = None
        biased = {}
        for key in grid:
            per_seed = result.cells.setdefault(key, {"per_seed": {}})["per_seed"]
            cell_dir = None if out is None else out / "cells" / key.name / f"seed_{seed}"
            try:
                if base is None:
                    base = build_dataset(cfg.data, seed)
                if key.setup is None:
                    ds = base
                else:
                    bkey = (key.setup, key.p)
                    if bkey not in biased:
                        biased[bkey] = inject_bias(base, key.setup, key.p, seed)
                    ds, removed = biased[bkey]
                    manifest = {"spec": key.setup, "p": key.p, "seed": seed, "cells": removed,
                                "config_hash": chash}
                    manifests[f"{key.setup}{key.p:g}/seed_{seed}"] = manifest
                tcfg = cfg.train_config(key.method, seed, key.tau)
                model, _ = train(ds, tcfg)
                # datasets without a test split (the toy) are scored on train
                split = "test" if ds.split_indices("test").size else "train"
                report = full_report(ds, model, split, cfg.radius_count, cfg.min_id_count)
                rep = report.to_dict()
                rep.update(config_hash=chash, seed=seed, cell=key.name, eval_split=split)
                if cell_dir is not None:
                    save_model(model, tcfg, cell_dir / "model.json", {"config_hash": chash})
                    _write_json(cell_dir / "report.json", rep)
                    write_curves(cell_dir, rep)
                    if key.setup is not None:
                        _write_json(cell_dir / "bias_manifest.json", manifest)
                per_seed[seed] = rep
            except CidBenchError as exc:
                log.warning("cell %s seed %s failed: %s", key.name, seed, exc)
                per_seed[seed] = {"error": f"{type(exc).__name__}: {exc}", "seed": seed}
    for cell in result.cells.values():
        cell["mean"], cell["std"] = _aggregate(cell["per_seed"])
    if out is not None:
        _write_json(out / "sweep_summary.json", result.to_dict())
        if manifests:
            _write_json(out / "bias_manifest.json", {"config_hash": chash, "runs": manifests})
    return result


def _method_grid(cfg: ExperimentConfig, setup: Optional[str], p: float, taus=None) -> list:
    taus = cfg.taus if taus is None else taus
    grid = []
    for m in cfg.methods:
        for tau in (taus if m == "cid" else [None]):
            grid.append(CellKey(m, tau, setup, p))
    return grid


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> SweepResult:
    setup = p = None
    if cfg.bias is not None:
        setup, p = str(parse_subpop_spec(cfg.bias["spec"])), float(cfg.bias.get("p", 0))
    return run_grid(cfg, _method_grid(cfg, setup, p if p is not None else 0.0), force)


def tau_ablation(cfg: ExperimentConfig, taus: list, force: bool = False) -> SweepResult:
    cfg = replace(cfg, methods=["cid"])
    for t in taus:
        CidConfig(t)
    setup, p = None, 0.0
    if cfg.bias is not None:
        setup, p = str(parse_subpop_spec(cfg.bias["spec"])), float(cfg.bias.get("p", 0))
    grid = [CellKey("cid", float(t), setup, p) for t in taus]
    result = run_grid(cfg, grid, force)
    if cfg.out is not None:
        rows = []
        for key in grid:
            m = result.cells[key]["mean"]
            rows.append((f"{key.tau:g}", m.get("aumm"), m.get("delta_id"), m.get("acc")))
        _write_csv(Path(cfg.out) / "tau_curve.csv", ["tau", "aumm_mean", "delta_id_mean", "acc_mean"], rows)
    return result


SENSITIVITY_METRICS = ("acc", "id_acc", "id_acc_bottom10", "delta_id", "aumm", "aud")


def bias_sensitivity(cfg: ExperimentConfig, setups: list, ps: list, force: bool = False) -> SweepResult:
    grid = []
    for setup in setups:
        setup = str(parse_subpop_spec(setup))
        for p in ps:
            grid.extend(_method_grid(cfg, setup, float(p)))
    result = run_grid(cfg, grid, force)
    if cfg.out is not None:
        rows = []
        for key in grid:
            cell = result.cells[key]
            label = key.method if key.tau is None else f"{key.method}@{key.tau:g}"
            for metric in SENSITIVITY_METRICS:
                if metric in cell["mean"]:
                    rows.append((key.setup, f"{key.p:g}", label, metric, cell["mean"][metric], cell["std"][metric]))
        _write_csv(Path(cfg.out) / "sensitivity.csv", ["setup", "p", "method", "metric", "mean", "std"], rows)
    return result


def monotonicity(ps: list, values: list) -> float:
    """Spearman rank correlation of a metric against the bias level."""
    return float(spearmanr(ps, values).statistic)
