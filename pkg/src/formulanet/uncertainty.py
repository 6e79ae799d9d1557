"""Bootstrap ensembles and estimate / std. error / z / p aggregation."""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BootstrapError, TooFewReplicates
from .tabular import build_design
from .training import TrainConfig, TrainRun, prepare_targets, run_epochs, train_network

_MASK64 = (1 << 64) - 1

SIGNIF_LEGEND = "Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Replicate seed: ``splitmix64(splitmix64(master) ^ index)``."""
    return splitmix64(splitmix64(int(master_seed) & _MASK64) ^ int(index))


@dataclass
class Replicate:
    index: int
    seed: int
    resample: np.ndarray  # row indices into the full training table
    run: TrainRun

    @property
    def network(self):
        return self.run.network


@dataclass
class BootstrapEnsemble:
    replicates: list
    failures: list = field(default_factory=list)  # indices of dropped replicates
    requested: int = 0

    @property
    def B(self) -> int:
        return len(self.replicates)

    @property
    def networks(self) -> list:
        return [r.run.network for r in self.replicates]

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.replicates]


def _fit_replicate(config: TrainConfig, X, y, output_dim: int, master_seed: int, b: int):
    seed = derive_seed(master_seed, b)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    idx = rng.integers(0, n, size=n)
    run = train_network(config, X[idx], y[idx], output_dim, rng)
    return Replicate(b, seed, idx, run)


def _collect(replicates, requested):
    ok = [r for r in replicates if r.run.stop_reason != "diverged"]
    failed = [r.index for r in replicates if r.run.stop_reason == "diverged"]
    if failed:
        warnings.warn(f"{len(failed)} bootstrap replicate(s) diverged and were dropped",
                      RuntimeWarning, stacklevel=3)
    if len(ok) < 2:
        raise BootstrapError(
            f"only {len(ok)} of {requested} bootstrap replicates converged; need >= 2"
        )
    return BootstrapEnsemble(ok, failed, requested)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def bootstrap_fit(config: TrainConfig, table, formula, B: int, master_seed: int,
                  encoder=None, threads: int = 1) -> BootstrapEnsemble:
    """Refit ``B`` networks on with-replacement resamples of the table rows.

    All replicates share one encoder (the full-data fit's when given) so their
    networks consume the same design matrix. Replicate ``b`` draws everything
    from ``derive_seed(master_seed, b)``, so the result does not depend on the
    order or thread in which replicates run.
    """
    if B < 2:
        raise TooFewReplicates(f"bootstrap needs B >= 2, got {B}")
    config = config.replace(bootstrap=None)
    if encoder is None:
        X, _, encoder = build_design(formula, table, config.standardize)
    else:
        from .tabular import apply_encoder

        X = apply_encoder(encoder, table)
    y, output_dim = prepare_targets(config.loss, encoder, table)
    reps = _map(lambda b: _fit_replicate(config, X, y, output_dim, master_seed, b),
                range(B), threads)
    return _collect(reps, B)


def continue_ensemble(ensemble: BootstrapEnsemble, config: TrainConfig, X, y,
                      threads: int = 1) -> BootstrapEnsemble:
    config = config.replace(bootstrap=None)

    def resume(rep: Replicate) -> Replicate:
        run = rep.run.copy()
        rng = np.random.default_rng([rep.seed, run.history.last_epoch, 0xC0])
        Xb, yb = X[rep.resample], y[rep.resample]
        run.stop_reason = run_epochs(run.network, Xb, yb, run.val_idx, config, config.loss,
                                     run.history, rng, config.epochs)
        return Replicate(rep.index, rep.seed, rep.resample, run)

    reps = _map(resume, ensemble.replicates, threads)
    out = _collect(reps, ensemble.requested)
    out.failures = sorted(set(ensemble.failures) | set(out.failures))
    return out


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class StatRow:
    name: str
    estimate: float
    std_err: float = None
    z: float = None  # None marks "undefined" (zero spread) or "no bootstrap"
    p: float = None


SE_EPS = 1e-12


def stat_row(name: str, estimate: float, std_err: float) -> StatRow:
    if std_err < SE_EPS:
        return StatRow(name, estimate, std_err, None, None)
    z = estimate / std_err
    return StatRow(name, estimate, std_err, z, 2.0 * (1.0 - normal_cdf(abs(z))))


def aggregate(name: str, full_data_value: float, replicate_values) -> StatRow:
    """Point estimate from the full-data fit, spread from the replicates."""
    vals = np.asarray(replicate_values, dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size < 2:
        raise TooFewReplicates(f"{name}: need >= 2 finite replicate values, got {vals.size}")
    return stat_row(name, float(full_data_value), float(vals.std(ddof=1)))


def signif_code(p) -> str:
    if p is None:
        return ""
    for cut, code in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return code
    return ""


def format_pvalue(p) -> str:
    if p is None:
        return "NA"
    if p < 2.2e-16:
        return "<2e-16"
    if p < 1e-4:
        return f"{p:.1e}"
    return f"{p:.4f}"


def _decimals(values, digits=3, cap=8) -> int:
    need = 0
    for v in values:
        if v is None or not math.isfinite(v) or v == 0:
            continue
        need = max(need, digits - 1 - math.floor(math.log10(abs(v))))
    return int(min(max(need, 0), cap))


def format_table(title: str, rows: list, value_label: str) -> str:
    """Render rows as an aligned coefficient table.

    With standard errors present the columns are
    ``<value_label>  Std.Err  Z value  Pr(>|z|)`` plus significance stars and
    a legend line; otherwise only the value column is printed.
    """
    with_se = any(r.std_err is not None for r in rows)
    dec = _decimals([r.estimate for r in rows] + [r.std_err for r in rows if with_se])
    names = [r.name for r in rows]
    name_w = max([len(n) for n in names] + [1])
    header_cells = [value_label]
    if with_se:
        header_cells += ["Std.Err", "Z value", "Pr(>|z|)"]
    body = []
    for r in rows:
        cells = [f"{r.estimate:.{dec}f}"]
        if with_se:
            cells.append(f"{r.std_err:.{dec}f}")
            cells.append("NA" if r.z is None else f"{r.z:.2f}")
            cells.append(format_pvalue(r.p))
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header_cells)]
    lines = [f"── {title}", ""]
    lines.append(" " * name_w + "".join(" " + h.rjust(w) for h, w in zip(header_cells, widths)))
    for name, r, cells in zip(names, rows, body):
        line = name.ljust(name_w) + "".join(" " + c.rjust(w) for c, w in zip(cells, widths))
        if with_se:
            line += " " + signif_code(r.p)
        lines.append(line.rstrip())
    if with_se:
        lines += ["---", SIGNIF_LEGEND]
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "estimate", "std_err", "z", "p"])
    for r in rows:
        writer.writerow([r.name, repr(r.estimate)]
                        + ["NA" if v is None else repr(float(v)) for v in (r.std_err, r.z, r.p)])
    return buf.getvalue()
