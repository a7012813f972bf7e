"""Synthetic identity-structured datasets and controlled bias injection.

``gen_cluster_world`` plants an identity-to-label shortcut: every
identity is a tight cluster on the unit sphere, a fraction of identities
are strongly skewed toward the positive label, and the classifier sees the
proxy coordinates next to one genuinely task-informative coordinate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .data import EmbeddingDataset
from .errors import ConfigError, ParseError, PreconditionError
from .rng import Rng64State, fnv1a64, rng_next, shuffle_indices

GROUP_CHARS = ("M", "F")
POLARITY_CHARS = ("P", "N")
POLARITY_LABEL = {"P": 1, "N": 0}


@dataclass(frozen=True)
class ClusterWorldConfig:
    num_identities: int = 100
    samples_per_identity: int = 40
    proxy_dim: int = 16
    cluster_std: float = 0.01
    skew_fraction: float = 0.5
    skewed_positive_rate: float = 0.95
    base_positive_rate: float = 0.5
    task_signal: float = 1.0
    noise_std: float = 1.0
    split_fractions: tuple = (0.6, 0.2, 0.2)
    identity_disjoint: bool = False

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.num_identities < 1 or self.samples_per_identity < 1:
            raise ConfigError("num_identities and samples_per_identity must be >= 1")
        if self.num_identities * self.samples_per_identity < 10:
            raise ConfigError("the world needs at least 10 samples")
        if self.proxy_dim < 2:
            raise ConfigError("proxy_dim must be >= 2")
        if not self.cluster_std > 0:
            raise ConfigError("cluster_std must be positive")
        for name in ("skew_fraction", "skewed_positive_rate", "base_positive_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.task_signal > 0:
            raise ConfigError("task_signal must be positive")
        if not self.noise_std >= 0:
            raise ConfigError("noise_std must be non-negative")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three non-negative numbers summing to 1, got {fr}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


def gen_toy(seed: int = 0) -> EmbeddingDataset:
    """Two-class toy in a 2-D unit-circle proxy space.

    Class 0 has 10 points: 7 packed near angle 0 and 3 spread far apart.
    Class 1 has 4 points near angle 1.2 rad. Features equal proxies.
    """
    rng = np.random.default_rng(seed)
    dense = rng.normal(0.0, 0.04, 7)
    sparse = np.array([2.2, 3.4, 4.6]) + rng.uniform(-0.1, 0.1, 3)
    minority = 1.2 + rng.normal(0.0, 0.15, 4)
    angles = np.concatenate([dense, sparse, minority])
    z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = [0] * 10 + [1] * 4
    ids = [f"toy{i:02d}" for i in range(14)]
    return EmbeddingDataset(
        sample_ids=ids,
        features=z,
        proxies=z,
        labels=labels,
        splits=["train"] * 14,
        num_classes=2,
        normalized=True,
        proxies_alias_features=True,
    )


def _split_counts(m: int, fractions) -> tuple[int, int]:
    n_train = int(round(fractions[0] * m))
    n_val = int(round(fractions[1] * m))
    n_val = min(n_val, m - n_train)
    return n_train, n_val


def gen_cluster_world(cfg: ClusterWorldConfig, seed: int = 0) -> EmbeddingDataset:
    if not isinstance(cfg, ClusterWorldConfig):
        raise ConfigError("gen_cluster_world expects a ClusterWorldConfig")
    rng = np.random.default_rng(seed)
    n_id, per = cfg.num_identities, cfg.samples_per_identity

    centroids = rng.normal(size=(n_id, cfg.proxy_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    n_skewed = int(round(cfg.skew_fraction * n_id))
    skewed = np.zeros(n_id, dtype=bool)
    skewed[rng.permutation(n_id)[:n_skewed]] = True
    rates = np.where(skewed, cfg.skewed_positive_rate, cfg.base_positive_rate)

    ident = np.repeat(np.arange(n_id), per)
    proxies = centroids[ident] + rng.normal(0.0, cfg.cluster_std, size=(n_id * per, cfg.proxy_dim))
    proxies /= np.linalg.norm(proxies, axis=1, keepdims=True)
    labels = (rng.random(n_id * per) < rates[ident]).astype(np.int64)
    signal = cfg.task_signal * (2 * labels - 1) + rng.normal(0.0, 1.0, n_id * per) * cfg.noise_std
    features = np.hstack([proxies, signal[:, None]])

    splits = np.empty(n_id * per, dtype=object)
    if cfg.identity_disjoint:
        order = shuffle_indices(n_id, seed ^ fnv1a64("identity-split"))
        n_train, n_val = _split_counts(n_id, cfg.split_fractions)
        tag = {}
        for rank, k in enumerate(order):
            tag[k] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        splits[:] = [tag[k] for k in ident]
    else:
        n_train, n_val = _split_counts(per, cfg.split_fractions)
        for k in range(n_id):
            rows = np.flatnonzero(ident == k)
            order = shuffle_indices(per, (seed + k * 0x9E3779B97F4A7C15) & ((1 << 64) - 1))
            for rank, pos in enumerate(order):
                splits[rows[pos]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    width = len(str(n_id * per - 1))
    return EmbeddingDataset(
        sample_ids=[f"s{i:0{width}d}" for i in range(n_id * per)],
        features=features,
        proxies=proxies,
        labels=labels,
        splits=list(splits),
        num_classes=2,
        identities=[f"id{k:03d}" for k in ident],
        groups=["M" if k < n_id // 2 else "F" for k in ident],
        normalized=True,
    )


@dataclass(frozen=True)
class SubpopSpec:
    cells: tuple  # of (group, polarity) pairs

    def __str__(self):
        return "".join(g + p for g, p in self.cells)


def parse_subpop_spec(text: str) -> SubpopSpec:
    if not isinstance(text, str) or len(text) < 2 or len(text) % 2:
        raise ParseError(f"subpopulation spec {text!r} must have an even length >= 2")
    cells = []
    for pos in range(0, len(text), 2):
        g, p = text[pos], text[pos + 1]
        if g not in GROUP_CHARS:
            raise ParseError(f"position {pos}: group must be M or F, got {g!r}")
        if p not in POLARITY_CHARS:
            raise ParseError(f"position {pos + 1}: polarity must be P or N, got {p!r}")
        if (g, p) in cells:
            raise ParseError(f"position {pos}: duplicate cell {g + p}")
        cells.append((g, p))
    return SubpopSpec(tuple(cells))


def cell_seed(seed: int, cell: str) -> int:
    """Seed for one cell: seed XOR the first SplitMix64 output of FNV-1a(cell)."""
    _, out = rng_next(Rng64State(fnv1a64(cell)))
    return (seed ^ out) & ((1 << 64) - 1)


def removal_count(p, m: int) -> int:
    return math.floor(Fraction(str(p)) * m / 100)


def inject_bias(dataset: EmbeddingDataset, spec, p, seed: int = 0) -> tuple[EmbeddingDataset, dict]:
    """Drop ``floor(p * m / 100)`` train/val members of every (group, label) cell.

    Returns the reduced dataset and ``{cell: {"members", "removed"}}``.
    Test rows are never touched.
    """
    if isinstance(spec, str):
        spec = parse_subpop_spec(spec)
    if dataset.groups is None:
        raise PreconditionError("bias injection needs group annotations")
    if dataset.num_classes != 2:
        raise PreconditionError("bias injection needs a binary task")
    if not 0 <= float(p) <= 100:
        raise ConfigError(f"p must lie in [0, 100], got {p}")

    drop = set()
    report = {}
    for g, pol in sorted(spec.cells):
        label = POLARITY_LABEL[pol]
        members = [
            i for i in range(dataset.n)
            if dataset.groups[i] == g and dataset.labels[i] == label and dataset.splits[i] in ("train", "val")
        ]
        members.sort(key=lambda i: dataset.sample_ids[i])
        k = removal_count(p, len(members))
        order = shuffle_indices(len(members), cell_seed(seed, g + pol))
        drop.update(members[j] for j in order[:k])
        report[g + pol] = {"members": len(members), "removed": k}

    if not drop:
        return dataset, report
    keep = [i for i in range(dataset.n) if i not in drop]
    return dataset.subset(keep), report
