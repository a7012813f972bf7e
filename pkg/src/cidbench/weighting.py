"""Conditional inverse density (CID) weights, IFW weights, and a
numerical solver for the per-sample neighborhood maximization that the
CID closed form solves exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, PreconditionError


@dataclass(frozen=True)
class CidConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not (self.tau > 0) or not np.isfinite(self.tau):
            raise ConfigError(f"tau must be a positive finite number, got {self.tau}")


@dataclass
class WeightVector:
    """Per-sample weights aligned with the subset they were computed on.

    ``class_normalizers`` maps label -> Z_y, the sum of raw weights of that
    class inside the subset.
    """

    weights: np.ndarray
    class_normalizers: dict = field(default_factory=dict)
    normalized: bool = False


def _check_subset(labels: np.ndarray, subset) -> np.ndarray:
    idx = np.arange(len(labels)) if subset is None else np.asarray(subset, dtype=np.int64)
    if idx.size == 0:
        raise PreconditionError("subset must be non-empty")
    return idx


def cid_weights(proxies, labels, subset: Optional[Sequence[int]], cfg: CidConfig) -> WeightVector:
    """Raw CID weight of each subset member.

    weight_i = exp(z_i.z_i / tau) / sum_{k in subset, y_k = y_i} exp(z_i.z_k / tau)

    The returned vector is ordered like ``subset`` (or the full index
    range when ``subset`` is None).
    """
    if not isinstance(cfg, CidConfig):
        cfg = CidConfig(cfg)
    z = np.asarray(proxies, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    idx = _check_subset(y, subset)
    zs = z[idx]
    if not np.isfinite(zs).all():
        raise PreconditionError("proxy embeddings must be finite")
    ys = y[idx]

    weights = np.empty(idx.size)
    normalizers = {}
    for c in np.unique(ys):
        members = np.flatnonzero(ys == c)
        zc = zs[members]
        logits = (zc @ zc.T) / cfg.tau
        row_max = logits.max(axis=1, keepdims=True)
        denom = np.exp(logits - row_max).sum(axis=1)
        own = np.exp(np.diagonal(logits) - row_max[:, 0])
        w = own / denom
        weights[members] = w
        normalizers[int(c)] = float(w.sum())
    return WeightVector(weights=weights, class_normalizers=normalizers, normalized=False)


def normalize_per_class(w: WeightVector, labels, subset: Optional[Sequence[int]] = None) -> WeightVector:
    """Divide every weight by its class normalizer so each class sums to 1."""
    if w.normalized:
        raise PreconditionError("weights are already normalized")
    y = np.asarray(labels, dtype=np.int64)
    idx = _check_subset(y, subset)
    ys = y[idx]
    if ys.size != w.weights.size:
        raise PreconditionError("weight vector and subset differ in length")
    out = np.empty_like(w.weights)
    for c in np.unique(ys):
        z_c = w.class_normalizers.get(int(c), 0.0)
        if not z_c > 0:
            raise DegenerateInputError(f"class {int(c)} has a zero normalizer")
        members = ys == c
        out[members] = w.weights[members] / z_c
    return WeightVector(weights=out, class_normalizers=dict(w.class_normalizers), normalized=True)


def ifw_weights(labels) -> WeightVector:
    """Inverse-frequency weights 1 / (C * N_y) over the classes present.

    Each present class sums to 1/C and the whole vector sums to 1.
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise DegenerateInputError("cannot weight an empty label list")
    classes, counts = np.unique(y, return_counts=True)
    n_cls = len(classes)
    lookup = dict(zip(classes.tolist(), counts.tolist()))
    weights = np.array([1.0 / (n_cls * lookup[int(c)]) for c in y])
    return WeightVector(
        weights=weights,
        class_normalizers={int(c): 1.0 / n_cls for c in classes},
        normalized=True,
    )


def neighborhood_objective(p: np.ndarray, sims: np.ndarray, tau: float) -> float:
    """sum_j p_j s_j - tau * KL(p || uniform)."""
    m = p.size
    pos = p > 0
    kl = float(np.sum(p[pos] * np.log(m * p[pos])))
    return float(p @ sims) - tau * kl


def inner_max_oracle(
    proxies,
    labels,
    i: int,
    subset: Optional[Sequence[int]],
    cfg: CidConfig,
    iterations: int = 10_000,
    step: float = 0.5,
    return_trace: bool = False,
):
    """Maximize the KL-regularized neighborhood objective by mirror ascent.

    Starts from the uniform point on the simplex over same-class subset
    members of sample ``i`` and applies exponentiated-gradient updates.
    Returns ``(p, members)`` where ``members`` are the dataset indices the
    entries of ``p`` refer to, plus the objective trace if requested.
    """
    if not isinstance(cfg, CidConfig):
        cfg = CidConfig(cfg)
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    z = np.asarray(proxies, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    idx = _check_subset(y, subset)
    members = idx[y[idx] == y[i]]
    if members.size == 0:
        raise PreconditionError("sample class has no members in the subset")
    sims = z[members] @ z[i]
    m = members.size
    p = np.full(m, 1.0 / m)
    trace = [neighborhood_objective(p, sims, cfg.tau)]
    # gradient of the objective: s_j - tau * (log(m p_j) + 1)
    eta = step / cfg.tau
    for _ in range(iterations):
        grad = sims - cfg.tau * (np.log(m * p) + 1.0)
        logp = np.log(p) + eta * grad
        logp -= logp.max()
        p = np.exp(logp)
        p /= p.sum()
        if return_trace:
            trace.append(neighborhood_objective(p, sims, cfg.tau))
    if return_trace:
        return p, members, np.array(trace)
    return p, members
