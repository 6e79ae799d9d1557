"""Model fitting, continue-training, prediction and residuals.

:func:`fit` is the one-call entry point: it encodes the data, splits off a
validation set, trains a network by mini-batch gradient descent and, when
``config.bootstrap`` is set, refits a bootstrap ensemble for uncertainty.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import objective
from .errors import (
    ArchitectureOverride,
    ConfigInvalid,
    InvalidTarget,
    ModelHasNoData,
    NonFiniteGradient,
    NonFiniteLoss,
)
from .network import (
    ACTIVATIONS,
    Network,
    NetworkConfig,
    backward,
    flatten_grads,
    forward,
    init_network,
)
from .objective import LossSpec, as_loss
from .optimize import (
    OPTIMIZERS,
    SCHEDULERS,
    EarlyStopState,
    OptimizerState,
    SchedulerState,
    early_stop_update,
    elastic_net,
    optimizer_step,
    scheduler_step,
)
from .tabular import (
    DataTable,
    Encoder,
    Formula,
    apply_encoder,
    build_design,
    extract_response,
    parse_formula,
)

# training hyperparameters that continue_training may change
CONTINUE_KEYS = frozenset({
    "lr", "lr_scheduler", "patience", "factor", "min_lr", "early_stopping",
    "batchsize", "lambda_", "alpha", "shuffle", "optimizer", "validation",
})
ARCHITECTURE_KEYS = frozenset({
    "hidden", "activation", "bias", "dropout", "loss", "standardize",
})


def _off(value) -> bool:
    return value is None or value is False or value == 0


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. Defaults follow the reference table of the
    original package (hidden (50, 50), selu, lr 0.01, batchsize 32, ...).

    ``early_stopping`` and ``bootstrap`` are off when ``None``/``False``/0,
    otherwise a patience and a replicate count respectively.
    """

    hidden: tuple = (50, 50)
    activation: str = "selu"
    bias: bool = True
    validation: float = 0.0
    epochs: int = 100
    batchsize: int = 32
    shuffle: bool = True
    lr: float = 0.01
    lambda_: float = 0.0
    alpha: float = 0.5
    dropout: float = 0.0
    early_stopping: Optional[int] = None
    bootstrap: Optional[int] = None
    optimizer: str = "sgd"
    lr_scheduler: str = "none"
    patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    loss: object = "gaussian"
    standardize: bool = True
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "loss", as_loss(self.loss))
        if _off(self.early_stopping):
            object.__setattr__(self, "early_stopping", None)
        if _off(self.bootstrap):
            object.__setattr__(self, "bootstrap", None)
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigInvalid(msg)

        if self.device != "cpu":
            bad(f"device {self.device!r} is not supported; only 'cpu'")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            bad(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batchsize) != self.batchsize or self.batchsize < 1:
            bad(f"batchsize must be an integer >= 1, got {self.batchsize}")
        if not 0.0 <= self.validation < 1.0:
            bad(f"validation must be in [0, 1), got {self.validation}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            bad(f"lr must be >= 0, got {self.lr}")
        if self.lambda_ < 0:
            bad(f"lambda must be >= 0, got {self.lambda_}")
        if not 0.0 <= self.alpha <= 1.0:
            bad(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            bad(f"dropout must be in [0, 1), got {self.dropout}")
        if any(h < 1 for h in self.hidden):
            bad(f"hidden layer widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            bad(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.optimizer not in OPTIMIZERS:
            bad(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_scheduler not in SCHEDULERS:
            bad(f"lr_scheduler must be one of {SCHEDULERS}, got {self.lr_scheduler!r}")
        if self.lr_scheduler != "none":
            if self.patience < 1:
                bad("scheduler patience must be >= 1")
            if not 0.0 < self.factor < 1.0:
                bad(f"factor must be in (0, 1), got {self.factor}")
        if self.early_stopping is not None:
            if int(self.early_stopping) != self.early_stopping or self.early_stopping < 1:
                bad(f"early_stopping must be a patience >= 1, got {self.early_stopping}")
            if self.validation <= 0:
                bad("early_stopping requires validation > 0")
        if self.bootstrap is not None and (
                int(self.bootstrap) != self.bootstrap or self.bootstrap < 2):
            bad(f"bootstrap must be a replicate count >= 2, got {self.bootstrap}")
        if int(self.seed) != self.seed or self.seed < 0:
            bad(f"seed must be a non-negative integer, got {self.seed}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["hidden"] = list(self.hidden)
        d["loss"] = self.loss.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    lr: float


@dataclass
class TrainingHistory:
    """Per-epoch losses; training loss includes the elastic-net penalty,
    validation loss does not."""

    baseline: float
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else 0

    def train_losses(self):
        return np.array([r.train_loss for r in self.records])

    def val_losses(self):
        return np.array([np.nan if r.val_loss is None else r.val_loss for r in self.records])

    def copy(self) -> "TrainingHistory":
        return TrainingHistory(self.baseline, [dataclasses.replace(r) for r in self.records])


def format_epoch_line(rec: EpochRecord, baseline: float) -> str:
    val = "NA" if rec.val_loss is None else f"{rec.val_loss:.6g}"
    return (f"epoch={rec.epoch} train={rec.train_loss:.6g} val={val} "
            f"baseline={baseline:.6g} lr={rec.lr:.6g}")


def parse_epoch_line(line: str) -> dict:
    fields = dict(part.split("=", 1) for part in line.split())
    out = {"epoch": int(fields["epoch"])}
    for key in ("train", "val", "baseline", "lr"):
        out[key] = None if fields[key] == "NA" else float(fields[key])
    return out


@dataclass
class TrainRun:
    """A trained network together with the bookkeeping needed to resume it."""

    network: Network
    history: TrainingHistory
    val_idx: np.ndarray
    stop_reason: str = "completed"

    def copy(self) -> "TrainRun":
        return TrainRun(self.network.copy(), self.history.copy(), self.val_idx.copy(),
                        self.stop_reason)


@dataclass
class FittedModel:
    network: Network
    encoder: Encoder
    formula: Formula
    loss: LossSpec
    config: TrainConfig
    history: TrainingHistory
    val_idx: np.ndarray
    table: Optional[DataTable] = None
    ensemble: object = None  # uncertainty.BootstrapEnsemble
    stop_reason: str = "completed"
    wall_time: float = 0.0
    _design: tuple = field(default=None, repr=False, compare=False)

    @property
    def output_dim(self) -> int:
        return self.network.config.output_dim

    @property
    def class_levels(self) -> tuple:
        if self.loss.kind == "softmax" and self.encoder.response_levels:
            return self.encoder.response_levels
        if self.loss.kind == "softmax":
            return tuple(str(i) for i in range(self.output_dim))
        return ()

    def require_table(self) -> DataTable:
        if self.table is None:
            raise ModelHasNoData("model was saved without its training data")
        return self.table

    def design(self):
        """``(X, y)`` for the stored training table (all rows)."""
        if self._design is None:
            table = self.require_table()
            X = apply_encoder(self.encoder, table)
            y, _ = prepare_targets(self.loss, self.encoder, table)
            self._design = (X, y)
        return self._design

    def train_mask(self) -> np.ndarray:
        n = self.require_table().n_rows
        mask = np.ones(n, dtype=bool)
        mask[self.val_idx] = False
        return mask


# ---------------------------------------------------------------------------
# Core loop
# ---------------------------------------------------------------------------

def prepare_targets(loss: LossSpec, encoder: Encoder, table: DataTable):
    """Targets as the loss expects them, plus the network output width."""
    y = extract_response(encoder, table)
    kind = loss.kind
    if encoder.response_kind == "categorical":
        n_levels = len(encoder.response_levels)
        if kind == "softmax":
            return objective.check_targets(loss, y, n_levels), n_levels
        if kind == "binomial":
            if n_levels != 2:
                raise InvalidTarget(
                    f"binomial response {encoder.response!r} needs exactly 2 levels, "
                    f"found {n_levels}"
                )
            return y.astype(np.float64), 1
        if kind != "custom":
            raise InvalidTarget(f"{kind} loss needs a numeric response")
        return y.astype(np.float64), 1
    if kind == "softmax":
        y = objective.check_targets(loss, y)
        k = int(y.max()) + 1 if y.size else 2
        return objective.check_targets(loss, y, max(k, 2)), max(k, 2)
    if kind == "custom":
        return y, 1
    return objective.check_targets(loss, y), 1


def split_validation(n: int, fraction: float, rng: np.random.Generator):
    """Uniform random validation subset of ``ceil(fraction * n)`` rows."""
    n_val = math.ceil(fraction * n) if fraction > 0 else 0
    if n_val >= n:
        raise ConfigInvalid(f"validation fraction {fraction} leaves no training rows")
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return train_idx, val_idx


def _train_idx(n, val_idx):
    mask = np.ones(n, dtype=bool)
    mask[val_idx] = False
    return np.flatnonzero(mask)


def run_epochs(net: Network, X, y, val_idx, config: TrainConfig, loss: LossSpec,
               history: TrainingHistory, rng: np.random.Generator, epochs: int,
               progress: Optional[Callable] = None) -> str:
    """Train ``net`` in place for up to ``epochs`` epochs; return the stop reason.

    Records are appended to ``history`` with epoch indices continuing from its
    last entry. Optimizer, scheduler and early-stopping state start fresh.
    """
    n = X.shape[0]
    train_idx = _train_idx(n, val_idx)
    has_val = len(val_idx) > 0
    Xv, yv = (X[val_idx], y[val_idx]) if has_val else (None, None)
    opt = OptimizerState(config.optimizer, config.lr)
    sched = SchedulerState(config.lr_scheduler, config.patience, config.factor, config.min_lr)
    stopper = EarlyStopState(config.early_stopping is not None, config.early_stopping or 0)
    bs = config.batchsize
    lam, alpha = config.lambda_, config.alpha
    start = history.last_epoch

    for k in range(1, epochs + 1):
        epoch = start + k
        before = [p.copy() for p in net.parameters()]
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        total, n_batches = 0.0, 0
        try:
            for s in range(0, len(order), bs):
                rows = order[s:s + bs]
                out, cache = forward(net, X[rows], "train", rng)
                batch_loss, g = objective.loss_and_grad(loss, out, y[rows])
                grads = flatten_grads(net, backward(net, cache, g))
                if lam > 0:
                    penalty, pgrads = elastic_net(net, lam, alpha)
                    batch_loss += penalty
                    grads = [a + b for a, b in zip(grads, pgrads)]
                optimizer_step(opt, net.parameters(), grads)
                total += batch_loss
                n_batches += 1
            train_loss = total / n_batches
            val_loss = None
            if has_val:
                out, _ = forward(net, Xv, "eval")
                val_loss = objective.loss_value(loss, out, yv)
            if not math.isfinite(train_loss) or (
                    val_loss is not None and not math.isfinite(val_loss)) or not net.is_finite():
                raise NonFiniteLoss("loss became non-finite")
        except (NonFiniteLoss, NonFiniteGradient, FloatingPointError):
            net.set_parameters(before)
            return "diverged"

        rec = EpochRecord(epoch, float(train_loss), val_loss, opt.lr)
        history.records.append(rec)
        if progress is not None:
            progress(format_epoch_line(rec, history.baseline))
        monitored = val_loss if has_val else train_loss
        opt.lr = scheduler_step(sched, monitored, opt.lr)
        if has_val and early_stop_update(stopper, val_loss, epoch, net.parameters()) == "stop":
            net.set_parameters(stopper.snapshot)
            return "early_stopped"
    return "completed"


def network_config_for(config: TrainConfig, input_dim: int, output_dim: int) -> NetworkConfig:
    return NetworkConfig(input_dim, output_dim, config.hidden, config.activation,
                         config.bias, config.dropout)


def train_network(config: TrainConfig, X, y, output_dim: int, rng: np.random.Generator,
                  progress: Optional[Callable] = None) -> TrainRun:
    """Split, initialize and train one network on an already encoded design."""
    n = X.shape[0]
    train_idx, val_idx = split_validation(n, config.validation, rng)
    return _train_on_split(config, X, y, output_dim, train_idx, val_idx, rng, progress)


def _train_on_split(config, X, y, output_dim, train_idx, val_idx, rng, progress=None):
    loss = config.loss
    baseline = objective.baseline_loss(loss, y[train_idx], output_dim)
    net = init_network(network_config_for(config, X.shape[1], output_dim), rng)
    history = TrainingHistory(baseline)
    reason = run_epochs(net, X, y, val_idx, config, loss, history, rng, config.epochs, progress)
    return TrainRun(net, history, val_idx, reason)


def fit(config: TrainConfig, table: DataTable, formula, progress: Optional[Callable] = None,
        threads: int = 1, keep_data: bool = True) -> FittedModel:
    """Encode ``table`` by ``formula`` and train a network with ``config``.

    Center/scale statistics are estimated on the training rows only so the
    validation rows never influence the fit. ``progress`` receives one log
    line per epoch of the full-data fit.
    """
    if isinstance(formula, str):
        formula = parse_formula(formula)
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_validation(table.n_rows, config.validation, rng)
    X, _, encoder = build_design(formula, table, config.standardize, fit_rows=train_idx)
    y, output_dim = prepare_targets(config.loss, encoder, table)
    run = _train_on_split(config, X, y, output_dim, train_idx, val_idx, rng, progress)

    model = FittedModel(
        network=run.network, encoder=encoder, formula=formula, loss=config.loss,
        config=config, history=run.history, val_idx=val_idx,
        table=table if keep_data else None, stop_reason=run.stop_reason,
    )
    model._design = (X, y)
    if config.bootstrap is not None:
        from .uncertainty import bootstrap_fit

        model.ensemble = bootstrap_fit(config, table, formula, config.bootstrap,
                                       config.seed, encoder=encoder, threads=threads)
    model.wall_time = time.perf_counter() - t0
    return model


def model_from_network(network: Network, table: DataTable, formula, loss="gaussian",
                       standardize: bool = False) -> FittedModel:
    """Wrap a hand-constructed network as an (untrained) fitted model."""
    if isinstance(formula, str):
        formula = parse_formula(formula)
    loss = as_loss(loss)
    X, _, encoder = build_design(formula, table, standardize)
    y, output_dim = prepare_targets(loss, encoder, table)
    cfg = network.config
    if cfg.input_dim != X.shape[1] or cfg.output_dim != output_dim:
        raise ConfigInvalid(
            f"network maps {cfg.input_dim} -> {cfg.output_dim}, data needs "
            f"{X.shape[1]} -> {output_dim}"
        )
    config = TrainConfig(hidden=cfg.hidden, activation=cfg.activation, bias=cfg.bias,
                         dropout=cfg.dropout, loss=loss, standardize=standardize)
    history = TrainingHistory(objective.baseline_loss(loss, y, output_dim))
    model = FittedModel(network, encoder, formula, loss, config, history,
                        np.zeros(0, dtype=np.int64), table)
    model._design = (X, y)
    return model


def _continue_seed(seed: int, start_epoch: int):
    return np.random.default_rng([int(seed), int(start_epoch), 0xC0])


def continue_training(model: FittedModel, epochs: int, overrides: Optional[dict] = None,
                      table: Optional[DataTable] = None, progress: Optional[Callable] = None,
                      threads: int = 1) -> FittedModel:
    """Train an existing model for ``epochs`` more epochs.

    ``overrides`` may change training hyperparameters only (lr, scheduler,
    early stopping, batchsize, lambda, alpha, ...). A new ``table`` continues
    on different data with the stored encoder and a fresh validation split.
    Bootstrap replicates are continued on their own resamples. The input model
    is left untouched.
    """
    overrides = dict(overrides or {})
    if "lambda" in overrides:
        overrides["lambda_"] = overrides.pop("lambda")
    arch = sorted(k for k in overrides if k in ARCHITECTURE_KEYS)
    if arch:
        raise ArchitectureOverride(f"cannot change {', '.join(arch)} when continuing training")
    unknown = sorted(k for k in overrides if k not in CONTINUE_KEYS)
    if unknown:
        raise ConfigInvalid(f"unknown training parameter(s): {', '.join(unknown)}")
    if int(epochs) != epochs or epochs < 1:
        raise ConfigInvalid(f"epochs must be an integer >= 1, got {epochs}")
    if table is not None and model.ensemble is not None:
        raise ConfigInvalid("continuing a bootstrapped model on new data is not supported")

    t0 = time.perf_counter()
    config = model.config.replace(epochs=int(epochs), **overrides)
    loss = model.loss
    net = model.network.copy()
    start = model.history.last_epoch
    rng = _continue_seed(config.seed, start)

    if table is None:
        table_used = model.table
        X, y = model.design()
        val_idx = model.val_idx
        if "validation" in overrides:
            _, val_idx = split_validation(len(y), config.validation, rng)
        history = model.history.copy()
    else:
        table_used = table
        X = apply_encoder(model.encoder, table)
        y, _ = prepare_targets(loss, model.encoder, table)
        train_idx, val_idx = split_validation(len(y), config.validation, rng)
        history = model.history.copy()
        history.baseline = objective.baseline_loss(loss, y[train_idx], model.output_dim)
    if config.early_stopping is not None and len(val_idx) == 0:
        raise ConfigInvalid("early_stopping requires a validation split")

    reason = run_epochs(net, X, y, val_idx, config, loss, history, rng, config.epochs, progress)
    new = dataclasses.replace(
        model, network=net, config=config, history=history, val_idx=val_idx,
        table=table_used, stop_reason=reason, _design=(X, y),
    )
    if model.ensemble is not None:
        from .uncertainty import continue_ensemble

        new.ensemble = continue_ensemble(model.ensemble, config, X, y, threads=threads)
    new.wall_time = model.wall_time + (time.perf_counter() - t0)
    return new


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_design(network: Network, loss: LossSpec, X, scale: str = "response"):
    out, _ = forward(network, X, "eval")
    if scale == "link":
        pass
    elif scale == "response":
        out = objective.inverse_link(loss, out)
    else:
        raise ConfigInvalid(f"scale must be 'response' or 'link', got {scale!r}")
    return out[:, 0] if out.shape[1] == 1 else out


def predict(model: FittedModel, table: Optional[DataTable] = None, scale: str = "response"):
    """Predict for ``table`` (default: the training table).

    Returns ``(pred, se)``; ``se`` is the standard deviation of the ensemble
    predictions on the same scale, or None without a bootstrap ensemble.
    """
    X = model.design()[0] if table is None else apply_encoder(model.encoder, table)
    pred = predict_design(model.network, model.loss, X, scale)
    se = None
    if model.ensemble is not None:
        reps = np.stack([predict_design(net, model.loss, X, scale)
                         for net in model.ensemble.networks])
        se = reps.std(axis=0, ddof=1)
    return pred, se


def residuals(model: FittedModel) -> np.ndarray:
    """Observed minus fitted on the response scale, all training-table rows.

    For softmax models the observed value is the one-hot class indicator, so
    the result has one column per class. Validation rows are included; see
    :meth:`FittedModel.train_mask` to tell them apart.
    """
    X, y = model.design()
    fitted = predict_design(model.network, model.loss, X, "response")
    if model.loss.kind == "softmax":
        onehot = np.zeros_like(fitted)
        onehot[np.arange(len(y)), y] = 1.0
        return onehot - fitted
    return np.asarray(y, dtype=np.float64) - fitted
