"""Loss families on the link scale, inverse links and intercept-only baselines.

All losses are mean per-observation negative log-likelihoods with constant
terms dropped:

    gaussian   mean((y - eta)^2)
    binomial   mean(log(1 + exp(eta)) - y * eta)
    poisson    mean(exp(eta) - y * eta)
    softmax    mean(logsumexp(eta) - eta[y])
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigInvalid, InvalidTarget, NonFiniteLoss, ShapeMismatch

LOSS_KINDS = ("gaussian", "binomial", "poisson", "softmax", "custom")
_ALIASES = {"mse": "gaussian", "normal": "gaussian"}

POISSON_ZERO_MEAN_ETA = math.log(1e-8)
_FD_STEP = 1e-6


@dataclass(frozen=True)
class LossSpec:
    kind: str = "gaussian"
    value_fn: Optional[Callable] = None
    grad_fn: Optional[Callable] = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in LOSS_KINDS:
            raise ConfigInvalid(f"unknown loss {self.kind!r}")
        if kind == "custom" and self.value_fn is None:
            raise ConfigInvalid("custom loss needs a value callback")

    @classmethod
    def custom(cls, value_fn, grad_fn=None) -> "LossSpec":
        return cls("custom", value_fn, grad_fn)

    def output_dim(self, n_classes: int = 0) -> int:
        return n_classes if self.kind == "softmax" else 1


def as_loss(loss) -> LossSpec:
    return loss if isinstance(loss, LossSpec) else LossSpec(str(loss))


def _as_eta(eta):
    eta = np.asarray(eta, dtype=np.float64)
    return eta.reshape(-1, 1) if eta.ndim == 1 else eta


def check_targets(spec: LossSpec, y, output_dim: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    kind = spec.kind
    if kind == "softmax":
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidTarget("softmax targets must be class indices")
            y = y.astype(np.int64)
        k = output_dim
        if k is not None and (k < 2 or (y.size and (y.min() < 0 or y.max() >= k))):
            raise InvalidTarget(f"softmax targets must be in [0, {k}) with >= 2 classes")
        return y
    y = y.astype(np.float64)
    if kind == "binomial" and not np.isin(y, (0.0, 1.0)).all():
        bad = y[~np.isin(y, (0.0, 1.0))][0]
        raise InvalidTarget(f"binomial targets must be 0 or 1, found {bad}")
    if kind == "poisson" and ((y < 0).any() or not np.all(np.mod(y, 1) == 0)):
        raise InvalidTarget("poisson targets must be non-negative integers")
    if not np.isfinite(y).all():
        raise InvalidTarget("targets must be finite")
    return y


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _logsumexp(eta):
    m = eta.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(eta - m).sum(axis=1, keepdims=True)))[:, 0]


def loss_value(spec: LossSpec, eta, y) -> float:
    """Loss only; cheaper than :func:`loss_and_grad` for evaluation passes."""
    eta = _as_eta(eta)
    kind = spec.kind
    if kind == "gaussian":
        return float(np.mean((y - eta[:, 0]) ** 2))
    if kind == "binomial":
        e = eta[:, 0]
        return float(np.mean(_softplus(e) - y * e))
    if kind == "poisson":
        e = eta[:, 0]
        return float(np.mean(np.exp(e) - y * e))
    if kind == "softmax":
        return float(np.mean(_logsumexp(eta) - eta[np.arange(len(y)), y]))
    return float(spec.value_fn(eta, y))


def loss_and_grad(spec: LossSpec, eta, y):
    """Mean loss and its gradient with respect to ``eta`` (batch x output_dim)."""
    eta = _as_eta(eta)
    n = eta.shape[0]
    if len(y) != n:
        raise ShapeMismatch(f"{n} predictions but {len(y)} targets")
    kind = spec.kind
    if kind in ("gaussian", "binomial", "poisson") and eta.shape[1] != 1:
        raise ShapeMismatch(f"{kind} loss needs a single output, got {eta.shape[1]}")
    if kind == "gaussian":
        r = eta[:, 0] - y
        loss = np.mean(r * r)
        grad = (2.0 / n) * r[:, None]
    elif kind == "binomial":
        e = eta[:, 0]
        loss = np.mean(_softplus(e) - y * e)
        grad = ((_stable_sigmoid(e) - y) / n)[:, None]
    elif kind == "poisson":
        e = eta[:, 0]
        ex = np.exp(e)
        loss = np.mean(ex - y * e)
        grad = ((ex - y) / n)[:, None]
    elif kind == "softmax":
        if eta.shape[1] < 2:
            raise ShapeMismatch("softmax loss needs >= 2 outputs")
        lse = _logsumexp(eta)
        rows = np.arange(n)
        loss = np.mean(lse - eta[rows, y])
        grad = np.exp(eta - lse[:, None])
        grad[rows, y] -= 1.0
        grad /= n
    else:
        loss = float(spec.value_fn(eta, y))
        if spec.grad_fn is not None:
            grad = np.asarray(spec.grad_fn(eta, y), dtype=np.float64).reshape(eta.shape)
        else:
            grad = _fd_grad(spec.value_fn, eta, y)
    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"{kind} loss is not finite")
    return loss, grad


def _fd_grad(fn, eta, y):
    grad = np.empty_like(eta)
    work = eta.copy()
    for idx in np.ndindex(eta.shape):
        orig = work[idx]
        work[idx] = orig + _FD_STEP
        up = float(fn(work, y))
        work[idx] = orig - _FD_STEP
        down = float(fn(work, y))
        work[idx] = orig
        grad[idx] = (up - down) / (2 * _FD_STEP)
    return grad


def inverse_link(spec: LossSpec, eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    kind = spec.kind
    if kind == "binomial":
        return _stable_sigmoid(eta)
    if kind == "poisson":
        return np.exp(eta)
    if kind == "softmax":
        e = _as_eta(eta)
        z = np.exp(e - e.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)
    return eta.copy()


def _xlogx(p):
    return 0.0 if p <= 0 else p * math.log(p)


def baseline_loss(spec: LossSpec, y, output_dim: Optional[int] = None) -> float:
    """Loss of the best intercept-only model for ``y``."""
    kind = spec.kind
    if kind == "softmax":
        y = check_targets(spec, y, output_dim)
        counts = np.bincount(y, minlength=output_dim or 0)
        freq = counts / counts.sum()
        return float(-sum(_xlogx(p) for p in freq))
    if kind != "custom":
        y = check_targets(spec, y)
    if kind == "gaussian":
        return float(np.var(y))
    if kind == "binomial":
        p = float(np.mean(y))
        return -(_xlogx(p) + _xlogx(1.0 - p))
    if kind == "poisson":
        m = float(np.mean(y))
        if m <= 0:
            warnings.warn("all poisson targets are 0; baseline clamped at log(1e-8)",
                          RuntimeWarning, stacklevel=2)
            eta = POISSON_ZERO_MEAN_ETA
            return float(np.mean(math.exp(eta) - y * eta))
        return m - m * math.log(m)
    k = output_dim or 1
    n = len(y)

    def at(c):
        return float(spec.value_fn(np.full((n, k), c), y))

    return at(golden_section(at, -20.0, 20.0))


def golden_section(f, lo, hi, tol=1e-10, max_iter=200) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0
