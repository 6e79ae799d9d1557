"""Model explanations: permutation importance, average conditional effects,
partial dependence and accumulated local effects.

All functions evaluate the network in eval mode on the training rows of the
model's stored table (validation rows excluded) and never modify the model.
Passing ``network=`` evaluates a different network (e.g. a bootstrap
replicate) against the same data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import objective
from .errors import DegenerateFeature, UnknownFeature
from .network import forward
from .training import FittedModel, predict_design
from .uncertainty import StatRow, aggregate, format_table

ARROW = "→"


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    columns: tuple
    kind: str


@dataclass
class EffectCurve:
    feature: str
    kind: str  # "pdp" | "ale"
    grid: np.ndarray
    values: np.ndarray
    se: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        head = "grid,value" + (",se" if self.se is not None else "")
        lines = [head]
        for i in range(len(self.grid)):
            row = [repr(float(self.grid[i])), repr(float(self.values[i]))]
            if self.se is not None:
                row.append(repr(float(self.se[i])))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def feature_groups(model: FittedModel) -> list:
    slices = model.encoder.column_slices()
    return [FeatureGroup(f.name, tuple(slices[f.name]), f.kind) for f in model.encoder.features]


def _data(model: FittedModel):
    X, y = model.design()
    mask = model.train_mask()
    return X[mask], y[mask]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _response(model, network, X):
    out = predict_design(network or model.network, model.loss, X, "response")
    return out[:, None] if out.ndim == 1 else out


def _numeric_feature(model: FittedModel, feature: str):
    names = [f.name for f in model.encoder.features]
    if feature not in names:
        raise UnknownFeature(f"{feature!r} is not a predictor of this model "
                             f"(predictors: {', '.join(names)})")
    enc = model.encoder.feature(feature)
    if enc.kind != "numeric":
        raise UnknownFeature(f"{feature!r} is categorical; effect curves need a numeric feature")
    col = model.encoder.column_slices()[feature][0]
    return enc, col


# ---------------------------------------------------------------------------
# Permutation importance
# ---------------------------------------------------------------------------

def permutation_importance(model: FittedModel, n_perm: int = 5, seed=0, network=None) -> list:
    """Mean loss increase when a feature's columns are jointly row-permuted.

    Returns ``[(feature, importance), ...]``. Categorical features permute
    their whole one-hot block with one row permutation.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    net = network or model.network
    X, y = _data(model)
    rng = _rng(seed)
    n = X.shape[0]
    base = objective.loss_value(model.loss, forward(net, X, "eval")[0], y)
    out = []
    for group in feature_groups(model):
        cols = list(group.columns)
        total = 0.0
        for _ in range(n_perm):
            perm = rng.permutation(n)
            Xp = X.copy()
            Xp[:, cols] = X[perm][:, cols]
            total += objective.loss_value(model.loss, forward(net, Xp, "eval")[0], y) - base
        out.append((group.name, total / n_perm))
    return out


# ---------------------------------------------------------------------------
# Average conditional effects
# ---------------------------------------------------------------------------

@dataclass
class ConditionalEffects:
    features: list
    ace: np.ndarray     # features x outputs
    local: np.ndarray   # observations x features x outputs
    skipped: list = field(default_factory=list)


def avg_conditional_effects(model: FittedModel, network=None) -> ConditionalEffects:
    """Mean central-difference derivative of the response per original unit.

    The step is 0.1 standard deviations of the design column; the derivative
    on the design scale is divided by the encoder's scale factor.
    """
    X, _ = _data(model)
    names, skipped, locals_ = [], [], []
    for f in model.encoder.features:
        if f.kind != "numeric":
            skipped.append(f.name)
            continue
        col = model.encoder.column_slices()[f.name][0]
        sd = float(X[:, col].std(ddof=1)) if X.shape[0] > 1 else 0.0
        h = 0.1 * sd if sd > 0 else 0.1
        up = X.copy()
        up[:, col] += h
        down = X.copy()
        down[:, col] -= h
        d = (_response(model, network, up) - _response(model, network, down)) / (2 * h)
        locals_.append(d / f.scale)
        names.append(f.name)
    if locals_:
        local = np.stack(locals_, axis=1)
        ace = local.mean(axis=0)
    else:
        local = np.zeros((X.shape[0], 0, model.output_dim))
        ace = np.zeros((0, model.output_dim))
    return ConditionalEffects(names, ace, local, skipped)


# ---------------------------------------------------------------------------
# Effect curves
# ---------------------------------------------------------------------------

def _train_values(model, feature):
    col = model.require_table().column(feature)
    return col.values[model.train_mask()]


def _pdp_values(model, network, X, col, grid_design, output):
    vals = np.empty(len(grid_design))
    work = X.copy()
    for i, v in enumerate(grid_design):
        work[:, col] = v
        vals[i] = _response(model, network, work)[:, output].mean()
    return vals


def partial_dependence(model: FittedModel, feature: str, grid_size: int = 20,
                       output: int = 0, network=None) -> EffectCurve:
    """Mean response with ``feature`` fixed at each point of an even grid
    over its observed range. Adds a bootstrap se band when the model has an
    ensemble and no explicit ``network`` is given."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    enc, col = _numeric_feature(model, feature)
    raw = _train_values(model, feature)
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        raise DegenerateFeature(f"{feature!r} has fewer than 2 distinct values")
    grid = np.linspace(lo, hi, grid_size)
    grid_design = (grid - enc.center) / enc.scale
    X, _ = _data(model)
    values = _pdp_values(model, network, X, col, grid_design, output)
    se = None
    if network is None and model.ensemble is not None:
        reps = np.stack([_pdp_values(model, net, X, col, grid_design, output)
                         for net in model.ensemble.networks])
        se = reps.std(axis=0, ddof=1)
    return EffectCurve(feature, "pdp", grid, values, se)


def _ale_bins(raw, n_bins):
    edges = np.unique(np.quantile(raw, np.linspace(0.0, 1.0, n_bins + 1),
                                  method="inverted_cdf"))
    if len(edges) < 2:
        raise DegenerateFeature("feature has fewer than 2 distinct values")
    # bin k (1-based) holds edges[k-1] < x <= edges[k]; the minimum joins bin 1
    bins = np.clip(np.searchsorted(edges, raw, side="left"), 1, len(edges) - 1)
    return edges, bins


def _ale_values(model, network, X, col, edges_design, bins, output):
    K = len(edges_design) - 1
    effects = np.zeros(K)
    counts = np.bincount(bins, minlength=K + 1)[1:]
    for k in range(1, K + 1):
        rows = bins == k
        if not rows.any():
            continue
        Xk = X[rows]
        hi = Xk.copy()
        hi[:, col] = edges_design[k]
        lo = Xk.copy()
        lo[:, col] = edges_design[k - 1]
        effects[k - 1] = (_response(model, network, hi)[:, output]
                          - _response(model, network, lo)[:, output]).mean()
    acc = np.concatenate([[0.0], np.cumsum(effects)])
    bin_values = 0.5 * (acc[:-1] + acc[1:])
    center = float((counts * bin_values).sum() / counts.sum())
    return acc - center, counts, bin_values - center


def accumulated_local_effects(model: FittedModel, feature: str, n_bins: int = 10,
                              output: int = 0, network=None) -> EffectCurve:
    """Accumulated local effects over quantile bins, evaluated at the edges.

    Tied quantiles are merged, so the effective bin count
    (``meta["n_bins"]``) may be smaller than requested. The curve is centered
    so that ``sum(meta["bin_counts"] * meta["bin_values"]) == 0``.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    enc, col = _numeric_feature(model, feature)
    raw = _train_values(model, feature)
    if len(np.unique(raw)) < 2:
        raise DegenerateFeature(f"{feature!r} has fewer than 2 distinct values")
    edges, bins = _ale_bins(raw, n_bins)
    edges_design = (edges - enc.center) / enc.scale
    X, _ = _data(model)
    values, counts, bin_values = _ale_values(model, network, X, col, edges_design, bins, output)
    se = None
    if network is None and model.ensemble is not None:
        reps = np.stack([_ale_values(model, net, X, col, edges_design, bins, output)[0]
                         for net in model.ensemble.networks])
        se = reps.std(axis=0, ddof=1)
    meta = {"n_bins": len(edges) - 1, "requested_bins": n_bins,
            "bin_counts": counts, "bin_values": bin_values}
    return EffectCurve(feature, "ale", edges, values, se, meta)


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

@dataclass
class Summary:
    importance: list  # StatRow
    ace: list         # StatRow
    text: str


def _ace_rows(model, effects):
    levels = model.class_levels
    names = []
    for f in effects.features:
        if model.output_dim == 1:
            names.append((f, 0, f"{f} {ARROW} {model.encoder.response}"))
        else:
            names.extend((f, k, f"{f} {ARROW} {lv}") for k, lv in enumerate(levels))
    return names


def summarize(model: FittedModel, n_perm: int = 5, seed=0) -> Summary:
    """Feature-importance and conditional-effect tables.

    With a bootstrap ensemble every statistic is recomputed per replicate (same
    data, same permutations) and passed through :func:`aggregate`.
    """
    response = model.encoder.response
    imp = permutation_importance(model, n_perm, seed)
    ace = avg_conditional_effects(model)
    ace_names = _ace_rows(model, ace)
    index = {f: i for i, f in enumerate(ace.features)}

    if model.ensemble is None:
        imp_rows = [StatRow(f"{name} {ARROW} {response}", value) for name, value in imp]
        ace_rows = [StatRow(label, float(ace.ace[index[f], k])) for f, k, label in ace_names]
    else:
        rep_imp, rep_ace = [], []
        for net in model.ensemble.networks:
            rep_imp.append([v for _, v in permutation_importance(model, n_perm, seed, net)])
            rep_ace.append(avg_conditional_effects(model, net).ace)
        rep_imp = np.array(rep_imp)
        rep_ace = np.stack(rep_ace) if rep_ace else None
        imp_rows = [aggregate(f"{name} {ARROW} {response}", value, rep_imp[:, j])
                    for j, (name, value) in enumerate(imp)]
        ace_rows = [aggregate(label, float(ace.ace[index[f], k]), rep_ace[:, index[f], k])
                    for f, k, label in ace_names]

    parts = [format_table("Feature Importance", imp_rows, "Importance")]
    if ace_rows:
        parts.append(format_table("Average Conditional Effects", ace_rows, "ACE"))
    if ace.skipped:
        parts.append("Conditional effects skipped for categorical features: "
                     + ", ".join(ace.skipped) + "\n")
    return Summary(imp_rows, ace_rows, "\n".join(parts))
