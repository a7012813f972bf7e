"""Baseline robust objectives: DRO loss-softmax weights, the IRM logit-scale
penalty, and the ARL linear-sigmoid adversary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, PreconditionError, UnsupportedTaskError


@dataclass(frozen=True)
class DroConfig:
    nu: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError(f"dro.nu must be positive, got {self.nu}")


@dataclass(frozen=True)
class IrmConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"irm.lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class ArlConfig:
    adversary_lr: float = 1e-2

    def __post_init__(self):
        if not self.adversary_lr >= 0:
            raise ConfigError(f"arl.adversary_lr must be non-negative, got {self.adversary_lr}")


@dataclass
class AdversaryState:
    params: np.ndarray  # (rep_dim + 1,), last entry is the bias
    lr: float

    @classmethod
    def zeros(cls, rep_dim: int, lr: float) -> "AdversaryState":
        return cls(params=np.zeros(rep_dim + 1), lr=lr)


def dro_weights(losses, cfg: DroConfig) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise PreconditionError("DRO weights need a non-empty batch")
    if not np.isfinite(losses).all():
        raise PreconditionError("losses must be finite")
    s = losses / cfg.nu
    e = np.exp(s - s.max())
    return e / e.sum()


def irm_penalty(logits, labels, cfg: IrmConfig):
    """Squared derivative of the mean BCE w.r.t. a scalar logit multiplier.

    Returns ``(g, penalty, dpenalty_dlogit)`` where ``g`` is the derivative
    at scale 1 and ``dpenalty_dlogit`` chains into the model backward pass.
    """
    f = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if f.size != y.size:
        raise PreconditionError("logits and labels differ in length")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise UnsupportedTaskError("the IRM penalty is implemented for binary labels only")
    if not np.isfinite(f).all():
        raise PreconditionError("logits must be finite")
    b = f.size
    sig = expit(f)
    d1 = sig - y
    d2 = sig * (1.0 - sig)
    g = float(np.sum(d1 * f) / b)
    penalty = cfg.lam * g * g
    dpen = 2.0 * cfg.lam * g * (d2 * f + d1) / b
    return g, penalty, dpen


def _adversary_scores(params: np.ndarray, reps: np.ndarray) -> np.ndarray:
    return expit(reps @ params[:-1] + params[-1])


def arl_weights_from_scores(f) -> np.ndarray:
    """lambda_i = 1/B + f_i / sum_j f_j."""
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise PreconditionError("ARL weights need a non-empty batch")
    return 1.0 / f.size + f / f.sum()


def arl_weights(state: AdversaryState, representations) -> np.ndarray:
    reps = np.asarray(representations, dtype=np.float64)
    return arl_weights_from_scores(_adversary_scores(state.params, reps))


def arl_gradient(params: np.ndarray, representations, losses) -> np.ndarray:
    """Gradient of sum_i lambda_i(params) * loss_i, losses held constant."""
    reps = np.asarray(representations, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    # sum_i lambda_i is constant, so a shift of the losses leaves the gradient unchanged
    losses = losses - losses[0]
    f = _adversary_scores(params, reps)
    total = f.sum()
    # d/df_j sum_i lambda_i l_i = (l_j * S - sum_i f_i l_i) / S^2
    dobj_df = (losses * total - f @ losses) / (total * total)
    dobj_dlogit = dobj_df * f * (1.0 - f)
    return np.concatenate([reps.T @ dobj_dlogit, [dobj_dlogit.sum()]])


def arl_update(state: AdversaryState, representations, losses) -> AdversaryState:
    """One gradient-ascent step of the adversary on the weighted loss."""
    losses = np.asarray(losses, dtype=np.float64)
    reps = np.asarray(representations, dtype=np.float64)
    if losses.shape[0] != reps.shape[0]:
        raise PreconditionError("losses and representations differ in length")
    if not np.isfinite(losses).all():
        raise PreconditionError("losses must be finite")
    grad = arl_gradient(state.params, reps, losses)
    return AdversaryState(params=state.params + state.lr * grad, lr=state.lr)
