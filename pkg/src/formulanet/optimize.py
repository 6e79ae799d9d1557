"""Parameter updates, elastic-net penalty, LR scheduling and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, NonFiniteGradient

IMPROVEMENT_TOL = 1e-8

OPTIMIZERS = ("sgd", "adam")
SCHEDULERS = ("none", "reduce_on_plateau")


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigInvalid(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if not self.lr >= 0:
            raise ConfigInvalid(f"lr must be >= 0, got {self.lr}")


def optimizer_step(state: OptimizerState, params: list, grads: list) -> list:
    """Update ``params`` in place and return them."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteGradient("gradient contains non-finite values")
    state.step += 1
    lr = state.lr
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        return params

    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def elastic_net(net, lam: float, alpha: float):
    """Penalty ``lam * (alpha * sum|w| + (1 - alpha) * sum w^2)`` over weights.

    Biases are not penalized. Returns ``(penalty, grads)`` where ``grads`` is
    laid out like ``net.parameters()``.
    """
    if lam < 0 or not 0.0 <= alpha <= 1.0:
        raise ConfigInvalid(f"need lambda >= 0 and alpha in [0, 1], got {lam}, {alpha}")
    penalty = 0.0
    grads = []
    for W, b in zip(net.weights, net.biases):
        if lam == 0:
            grads.append(np.zeros_like(W))
        else:
            penalty += lam * (alpha * np.abs(W).sum() + (1.0 - alpha) * (W * W).sum())
            grads.append(lam * (alpha * np.sign(W) + 2.0 * (1.0 - alpha) * W))
        if b is not None:
            grads.append(np.zeros_like(b))
    return float(penalty), grads


@dataclass
class SchedulerState:
    """Reduce-on-plateau state.

    The learning rate is recomputed from the first lr seen and the number of
    reductions so far, so it always equals ``lr0 * factor**k`` exactly.
    """

    policy: str = "none"
    patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    best_loss: float = math.inf
    epochs_since_best: int = 0
    n_reductions: int = 0
    base_lr: float = None

    def __post_init__(self):
        if self.policy not in SCHEDULERS:
            raise ConfigInvalid(f"lr scheduler must be one of {SCHEDULERS}, got {self.policy!r}")
        if self.policy != "none":
            if self.patience < 1:
                raise ConfigInvalid("scheduler patience must be >= 1")
            if not 0.0 < self.factor < 1.0:
                raise ConfigInvalid(f"scheduler factor must be in (0, 1), got {self.factor}")


def scheduler_step(state: SchedulerState, epoch_loss: float, current_lr: float) -> float:
    if state.policy == "none":
        return current_lr
    if state.base_lr is None:
        state.base_lr = current_lr
    if epoch_loss < state.best_loss - IMPROVEMENT_TOL:
        state.best_loss = epoch_loss
        state.epochs_since_best = 0
        return current_lr
    state.epochs_since_best += 1
    if state.epochs_since_best >= state.patience:
        state.epochs_since_best = 0
        state.n_reductions += 1
        return max(state.base_lr * state.factor ** state.n_reductions, state.min_lr)
    return current_lr


@dataclass
class EarlyStopState:
    enabled: bool = False
    patience: int = 10
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    snapshot: list = None


def early_stop_update(state: EarlyStopState, val_loss: float, epoch: int, params) -> str:
    """Track the best validation loss; return ``"stop"`` once patience runs out.

    ``params`` is copied into the snapshot on every improvement; the caller
    restores it after a stop.
    """
    if not state.enabled:
        return "continue"
    if val_loss < state.best_val_loss - IMPROVEMENT_TOL:
        state.best_val_loss = val_loss
        state.best_epoch = epoch
        state.epochs_since_best = 0
        state.snapshot = [np.array(p, copy=True) for p in params]
        return "continue"
    state.epochs_since_best += 1
    return "stop" if state.epochs_since_best >= state.patience else "continue"
