"""Mini-batch SGD for linear and one-hidden-layer classifiers under the
CE, IFW, CID, DRO, IRM and ARL objectives.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .data import EmbeddingDataset, atomic_write_text
from .errors import ConfigError, PreconditionError, ShapeError
from .objectives import (
    AdversaryState,
    ArlConfig,
    DroConfig,
    IrmConfig,
    arl_update,
    arl_weights,
    dro_weights,
    irm_penalty,
)
from .rng import MASK64, SplitMix64, fnv1a64, shuffle_indices
from .weighting import CidConfig, cid_weights, ifw_weights, normalize_per_class

METHODS = ("ce", "ifw", "cid", "dro", "irm", "arl")
ARCHITECTURES = ("linear", "mlp1")


@dataclass
class ModelParams:
    architecture: str
    W: np.ndarray  # (C, d_in) output layer; d_in = d_f (linear) or h (mlp1)
    b: np.ndarray  # (C,)
    W1: Optional[np.ndarray] = None  # (h, d_f)
    b1: Optional[np.ndarray] = None  # (h,)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return (self.W1 if self.architecture == "mlp1" else self.W).shape[1]

    def names(self) -> list[str]:
        return ["W", "b", "W1", "b1"] if self.architecture == "mlp1" else ["W", "b"]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in self.names()]

    def copy(self) -> "ModelParams":
        return replace(self, **{k: getattr(self, k).copy() for k in self.names()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for k in self.names():
            a = getattr(self, k)
            out[k] = np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return replace(self, **out)

    def to_dict(self) -> dict:
        d = {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "hidden_dim": None if self.W1 is None else int(self.W1.shape[0]),
        }
        d["params"] = {k: getattr(self, k).tolist() for k in self.names()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        p = d["params"]
        arr = lambda k: np.array(p[k], dtype=np.float64) if k in p else None
        model = cls(d["architecture"], arr("W"), arr("b"), arr("W1"), arr("b1"))
        if model.architecture == "mlp1" and model.W1 is None:
            raise ShapeError("mlp1 model file lacks hidden-layer parameters")
        return model


def init_model(architecture: str, feature_dim: int, num_classes: int, hidden_dim: int, seed: int) -> ModelParams:
    """Zero init for the linear model; seeded uniform(+-1/sqrt(d_f)) hidden layer for mlp1."""
    if architecture == "linear":
        return ModelParams("linear", np.zeros((num_classes, feature_dim)), np.zeros(num_classes))
    if architecture != "mlp1":
        raise ConfigError(f"unknown architecture {architecture!r}")
    bound = 1.0 / math.sqrt(feature_dim)
    rng = SplitMix64(seed ^ fnv1a64("mlp1-init"))
    W1 = rng.uniform(-bound, bound, hidden_dim * feature_dim).reshape(hidden_dim, feature_dim)
    return ModelParams(
        "mlp1",
        W=np.zeros((num_classes, hidden_dim)),
        b=np.zeros(num_classes),
        W1=W1,
        b1=np.zeros(hidden_dim),
    )


def _forward_cache(model: ModelParams, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_dim:
        raise ShapeError(f"expected features with {model.feature_dim} columns, got shape {X.shape}")
    if model.architecture == "linear":
        return X @ model.W.T + model.b, X, None
    pre = X @ model.W1.T + model.b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ model.W.T + model.b, hidden, pre


def forward(model: ModelParams, features) -> np.ndarray:
    return _forward_cache(model, features)[0]


def representation(model: ModelParams, features) -> np.ndarray:
    """Input seen by the ARL adversary: raw features or hidden activations."""
    return _forward_cache(model, features)[1]


def _backward(model: ModelParams, X, hidden, pre, dlogits) -> dict:
    grads = {"W": dlogits.T @ hidden, "b": dlogits.sum(axis=0)}
    if model.architecture == "mlp1":
        dhidden = (dlogits @ model.W) * (pre > 0)
        grads["W1"] = dhidden.T @ X
        grads["b1"] = dhidden.sum(axis=0)
    return grads


def ce_loss_and_grad(logits, labels):
    """Per-sample cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    rows = np.arange(len(y))
    losses = -logp[rows, y]
    grad = softmax(logits, axis=1)
    grad[rows, y] -= 1.0
    return losses, grad


def predict(model: ModelParams, features):
    """Argmax labels (ties go to the smaller class index) and the logits."""
    scores = forward(model, features)
    return np.argmax(scores, axis=1), scores


@dataclass
class TrainConfig:
    method: str = "ce"
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.01
    lr_decay_epoch: Optional[int] = 30
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    architecture: str = "linear"
    hidden_dim: int = 32
    cid: CidConfig = field(default_factory=CidConfig)
    dro: DroConfig = field(default_factory=DroConfig)
    irm: IrmConfig = field(default_factory=IrmConfig)
    arl: ArlConfig = field(default_factory=ArlConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden_dim < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and hidden_dim >= 1 are required")
        if self.method == "cid" and self.batch_size < 2:
            raise ConfigError("CID needs batch_size >= 2")
        if not self.lr >= 0 or not self.lr_decay_factor > 0:
            raise ConfigError("lr must be >= 0 and lr_decay_factor > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["irm"] = {"lambda": self.irm.lam}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        subs = {
            "cid": lambda v: CidConfig(**v),
            "dro": lambda v: DroConfig(**v),
            "irm": lambda v: IrmConfig(lam=v.get("lambda", v.get("lam", 1.0))),
            "arl": lambda v: ArlConfig(**v),
        }
        for key, build in subs.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(d[key])
        return cls(**d)


@dataclass
class BatchResult:
    objective: float
    grads: dict
    losses: np.ndarray
    weights: np.ndarray
    reps: np.ndarray


def batch_weights(method: str, labels, proxies, losses, cfg: TrainConfig, reps=None,
                  adversary: Optional[AdversaryState] = None) -> np.ndarray:
    """Per-sample loss weights for one batch; every method's weights sum to 1
    (ARL's lambda is halved to get there)."""
    y = np.asarray(labels)
    b = len(y)
    if method in ("ce", "irm"):
        return np.full(b, 1.0 / b)
    if method == "ifw":
        return ifw_weights(y).weights
    if method == "cid":
        raw = cid_weights(proxies, y, None, cfg.cid)
        w = normalize_per_class(raw, y).weights
        return w / len(raw.class_normalizers)
    if method == "dro":
        return dro_weights(losses, cfg.dro)
    if method == "arl":
        return arl_weights(adversary, reps) / 2.0
    raise ConfigError(f"unknown method {method!r}")


def batch_objective(model: ModelParams, X, y, Z, cfg: TrainConfig,
                    adversary: Optional[AdversaryState] = None,
                    weights: Optional[np.ndarray] = None) -> BatchResult:
    """Weighted loss of one batch plus its gradient, weight decay excluded.

    Weights are constants of the step. Pass ``weights`` to freeze them
    (finite-difference checks do this).
    """
    logits, hidden, pre = _forward_cache(model, X)
    losses, dlogits = ce_loss_and_grad(logits, y)
    if weights is None:
        weights = batch_weights(cfg.method, y, Z, losses, cfg, hidden, adversary)
    objective = float(weights @ losses)
    dlogits = dlogits * weights[:, None]
    if cfg.method == "irm":
        if model.num_classes != 2:
            raise ConfigError("IRM is only supported for binary tasks")
        f = logits[:, 1] - logits[:, 0]
        _, penalty, dpen = irm_penalty(f, y, cfg.irm)
        objective += penalty
        dlogits[:, 1] += dpen
        dlogits[:, 0] -= dpen
    grads = _backward(model, X, hidden, pre, dlogits)
    return BatchResult(objective, grads, losses, weights, hidden)


def full_objective(model: ModelParams, X, y, Z, cfg: TrainConfig, weights=None, adversary=None):
    """Batch objective plus the (weight_decay / 2) * ||params||^2 term."""
    res = batch_objective(model, X, y, Z, cfg, adversary, weights)
    reg = 0.5 * cfg.weight_decay * float(model.to_vector() @ model.to_vector())
    grad = np.concatenate([
        (res.grads[k] + cfg.weight_decay * getattr(model, k)).ravel() for k in model.names()
    ])
    return res.objective + reg, grad, res


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_acc: Optional[float] = None
    best_params: Optional[ModelParams] = None


def _accuracy(model: ModelParams, X, y) -> Optional[float]:
    if len(y) == 0:
        return None
    pred, _ = predict(model, X)
    return float(np.mean(pred == y))


def train(dataset: EmbeddingDataset, cfg: TrainConfig,
          on_batch: Optional[Callable] = None) -> tuple[ModelParams, TrainHistory]:
    """Train on the dataset's train split.

    Train indices are put in canonical order (sorted by sample_id) and
    reshuffled each epoch with ``shuffle_indices(n_train, seed + epoch)``.
    ``on_batch(epoch, batch_rows, weights)`` is called after each step.
    """
    train_rows = dataset.split_indices("train")
    if train_rows.size == 0:
        raise PreconditionError("the train split is empty")
    train_rows = np.array(sorted(train_rows, key=lambda i: dataset.sample_ids[i]), dtype=np.int64)
    val_rows = dataset.split_indices("val")
    X, Y, Z = dataset.features, dataset.labels, dataset.proxies
    if cfg.method == "irm" and dataset.num_classes != 2:
        raise ConfigError("IRM is only supported for binary tasks")

    model = init_model(cfg.architecture, X.shape[1], dataset.num_classes, cfg.hidden_dim, cfg.seed)
    velocity = {k: np.zeros_like(getattr(model, k)) for k in model.names()}
    rep_dim = X.shape[1] if cfg.architecture == "linear" else cfg.hidden_dim
    adversary = AdversaryState.zeros(rep_dim, cfg.arl.adversary_lr) if cfg.method == "arl" else None
    history = TrainHistory()

    n = train_rows.size
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_epoch is not None and epoch == cfg.lr_decay_epoch:
            lr = lr / cfg.lr_decay_factor
        order = train_rows[shuffle_indices(n, (cfg.seed + epoch) & MASK64)]
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            res = batch_objective(model, X[rows], Y[rows], Z[rows], cfg, adversary)
            loss_sum += float(res.losses.sum())
            for k in model.names():
                param = getattr(model, k)
                velocity[k] = cfg.momentum * velocity[k] - lr * (res.grads[k] + cfg.weight_decay * param)
                setattr(model, k, param + velocity[k])
            if adversary is not None:
                adversary = arl_update(adversary, res.reps, res.losses)
            if on_batch is not None:
                on_batch(epoch, rows, res.weights)
        val_acc = _accuracy(model, X[val_rows], Y[val_rows])
        history.epochs.append({"epoch": epoch, "train_loss": loss_sum / n, "val_acc": val_acc, "lr": lr})
        if val_acc is not None and (history.best_val_acc is None or val_acc > history.best_val_acc):
            history.best_epoch, history.best_val_acc = epoch, val_acc
            history.best_params = model.copy()
    return model, history


def _json_array(a: np.ndarray) -> str:
    if a.ndim == 1:
        return "[" + ", ".join("%.17g" % v for v in a) + "]"
    return "[" + ", ".join(_json_array(row) for row in a) + "]"


def save_model(model: ModelParams, cfg: Optional[TrainConfig], path, extra: Optional[dict] = None) -> str:
    doc = model.to_dict()
    doc["train_config"] = None if cfg is None else cfg.to_dict()
    if extra:
        doc.update(extra)
    # parameters are emitted with 17 significant digits, which json.dumps cannot do
    doc["params"] = "@PARAMS@"
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    body = ",\n".join(
        f'  "{k}": {_json_array(getattr(model, k))}' for k in sorted(model.names())
    )
    text = text.replace('"@PARAMS@"', "{\n" + body + "\n }")
    if path is not None:
        atomic_write_text(Path(path), text)
    return text


def load_model(path) -> tuple[ModelParams, Optional[TrainConfig]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = doc.get("train_config")
    return ModelParams.from_dict(doc), (TrainConfig.from_dict(cfg) if cfg else None)
