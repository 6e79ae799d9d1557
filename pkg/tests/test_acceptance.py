"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL line per criterion
in the terminal summary.
"""

import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from formulanet import objective
from formulanet.errors import ChecksumMismatch
from formulanet.interpret import (
    accumulated_local_effects,
    avg_conditional_effects,
    partial_dependence,
    permutation_importance,
    summarize,
)
from formulanet.network import NetworkConfig, backward, flatten_grads, forward, init_network
from formulanet.optimize import SchedulerState, scheduler_step
from formulanet.persist import load_model, save_model
from formulanet.tabular import DataTable
from formulanet.training import TrainConfig, fit, model_from_network, predict, residuals
from formulanet.uncertainty import SIGNIF_LEGEND, aggregate

from case_study_rows import CONDITIONAL_EFFECTS, IMPORTANCE
from conftest import additive_network, linear_network, linear_table
from oracles import network_loss_fd, pinned_relative_error, random_case

ACTIVATIONS = ("selu", "relu", "tanh", "sigmoid")
LOSSES = ("gaussian", "binomial", "poisson", "softmax")
SEEDS = range(20)


@pytest.fixture(scope="module")
def default_fits():
    """Default-config fits on y = 2*x1 - x2 + N(0, 0.1^2), n = 1000, 20 seeds."""
    t0 = time.perf_counter()
    fits = [fit(TrainConfig(seed=s), linear_table(s), "y ~ .") for s in SEEDS]
    return fits, time.perf_counter() - t0


@pytest.mark.criterion(1, "gradient oracle (200 random triples, h=1e-5, rel < 1e-6)")
def test_gradient_oracle(detail):
    rng = np.random.default_rng(20240501)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        activation = ACTIVATIONS[i % 4]
        kind = LOSSES[(i // 4) % 4]
        net, X, y, masks = random_case(rng, activation, kind, dropout=bool(i % 3 == 0))
        spec = objective.LossSpec(kind)
        out, cache = forward(net, X, "train" if masks is not None else "eval", masks=masks)
        _, g = objective.loss_and_grad(spec, out, y)
        analytic = flatten_grads(net, backward(net, cache, g))
        numeric = network_loss_fd(net, X, y, spec, masks, h=1e-5)
        for a, n in zip(analytic, numeric):
            worst = max(worst, pinned_relative_error(a, n))
    elapsed = time.perf_counter() - t0
    detail.update(max_rel=f"{worst:.2e}", seconds=f"{elapsed:.1f}")
    assert worst < 1e-6
    assert elapsed < 60


@pytest.mark.criterion(2, "baseline-loss diagnostic (>= 19/20 seeds beat baseline)")
def test_baseline_diagnostic(default_fits, detail):
    fits, elapsed = default_fits
    wins = sum(m.history.train_losses()[-1] < m.history.baseline for m in fits)
    detail.update(wins=f"{wins}/20", seconds=f"{elapsed:.1f}")
    assert wins >= 19
    assert elapsed < 120


@pytest.mark.criterion(3, "XOR capacity (accuracy >= 0.95 in >= 18/20 seeds)")
def test_xor(detail):
    ok = 0
    for s in SEEDS:
        rng = np.random.default_rng(1000 + s)
        x = rng.uniform(-1, 1, size=(400, 2))
        label = (x[:, 0] * x[:, 1] > 0).astype(float)
        t = DataTable.from_dict({"label": label, "x1": x[:, 0], "x2": x[:, 1]})
        cfg = TrainConfig(hidden=(20, 20), loss="binomial", lr=0.05, epochs=300, seed=s)
        model = fit(cfg, t, "label ~ .")
        acc = float(np.mean((predict(model)[0] > 0.5) == label))
        ok += acc >= 0.95
    detail.update(passing=f"{ok}/20")
    assert ok >= 18


@pytest.mark.criterion(4, "ACE linearity (exact 1e-9; trained within 0.3 in >= 19/20)")
def test_ace_linearity(default_fits, detail):
    t = linear_table(0, n=500)
    exact = avg_conditional_effects(
        model_from_network(linear_network([2.0, -1.0], 0.3), t, "y ~ x1 + x2")).ace[:, 0]
    err = float(np.max(np.abs(exact - [2.0, -1.0])))
    fits, _ = default_fits
    close = sum(np.all(np.abs(avg_conditional_effects(m).ace[:, 0] - [2.0, -1.0]) <= 0.3)
                for m in fits)
    detail.update(exact_err=f"{err:.1e}", trained=f"{close}/20")
    assert err < 1e-9
    assert close >= 19


@pytest.mark.criterion(5, "importance discrimination (>= 19/20; inert feature exactly 0)")
def test_importance_discrimination(detail):
    wins = 0
    for s in SEEDS:
        model = fit(TrainConfig(seed=s), linear_table(s, n_noise=3), "y ~ .")
        imp = dict(permutation_importance(model, seed=s))
        wins += all(imp["x1"] > imp[f"z{j}"] for j in (1, 2, 3))
    t = linear_table(0, n=300)
    inert = dict(permutation_importance(
        model_from_network(linear_network([2.0, 0.0]), t, "y ~ x1 + x2")))["x2"]
    detail.update(wins=f"{wins}/20", inert=repr(inert))
    assert wins >= 19
    assert inert == 0.0


@pytest.mark.criterion(6, "ALE correctness (centering 1e-8, slope 1e-9, invariance 1e-9)")
def test_ale(detail):
    worst_center = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        n = int(rng.integers(30, 300))
        x = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10, 3)
        t = DataTable.from_dict({"y": rng.normal(size=n), "a": x[:, 0], "b": x[:, 1],
                                 "c": np.round(3 * rng.normal(size=n))})
        hidden = tuple(int(w) for w in rng.integers(1, 9, size=rng.integers(0, 4)))
        net = init_network(NetworkConfig(3, 1, hidden, ACTIVATIONS[i % 4]), rng)
        model = model_from_network(net, t, "y ~ .", standardize=bool(i % 2))
        for feature in ("a", "c"):
            m = accumulated_local_effects(model, feature, n_bins=int(rng.integers(2, 15))).meta
            worst_center = max(worst_center, abs(float((m["bin_counts"] * m["bin_values"]).sum())))

    t = linear_table(1, n=500)
    ale = accumulated_local_effects(
        model_from_network(linear_network([2.0, -1.0]), t, "y ~ x1 + x2"), "x1")
    slope_err = float(np.max(np.abs(np.diff(ale.values) / np.diff(ale.grid) - 2.0)))

    curves = []
    for rho in (0.0, 0.9):
        rng = np.random.default_rng(7)
        x1 = rng.normal(size=800)
        x2 = rho * x1 + np.sqrt(1 - rho ** 2) * rng.normal(size=800)
        tt = DataTable.from_dict({"y": x1 + x2, "x1": x1, "x2": x2})
        curves.append(accumulated_local_effects(
            model_from_network(additive_network(), tt, "y ~ x1 + x2"), "x1").values)
    inv_err = float(np.max(np.abs(curves[0] - curves[1])))
    detail.update(center=f"{worst_center:.1e}", slope=f"{slope_err:.1e}",
                  invariance=f"{inv_err:.1e}")
    assert worst_center < 1e-8
    assert slope_err < 1e-9
    assert inv_err < 1e-9


@pytest.mark.criterion(7, "scheduler exact powers and early-stopping snapshot")
def test_state_machines(detail):
    for n in range(0, 101):
        s = SchedulerState("reduce_on_plateau", patience=8, factor=0.8, min_lr=0.0)
        lr = scheduler_step(s, 1.0, 0.05)
        for _ in range(n):
            lr = scheduler_step(s, 1.0, lr)
        assert lr == 0.05 * 0.8 ** (n // 8)

    table = linear_table(0, n=200, noise=2.0, n_noise=5)
    cfg = TrainConfig(hidden=(30, 30), epochs=300, validation=0.3, early_stopping=5)
    model = fit(cfg, table, "y ~ .")
    vals = model.history.val_losses()
    best_epoch = int(np.argmin(vals)) + 1
    X, y = model.design()
    out, _ = forward(model.network, X[model.val_idx])
    returned = objective.loss_value(model.loss, out, y[model.val_idx])
    detail.update(stopped=len(model.history), best=best_epoch)
    assert model.stop_reason == "early_stopped"
    assert len(model.history) == best_epoch + 5
    assert returned == min(vals)


@pytest.mark.criterion(8, "reference summary rows: z within 0.01, p within one leading digit")
def test_reference_rows(detail):
    worst_z = 0.0
    for _, est, se, z, p in IMPORTANCE + CONDITIONAL_EFFECTS:
        d = se / np.sqrt(2)
        row = aggregate("x", est, [est - d, est + d])
        worst_z = max(worst_z, abs(row.z - z))
        # 1e-9 absorbs binary rounding of values that differ by exactly 0.01
        assert abs(row.z - z) <= 0.01 + 1e-9
        assert abs(row.p - p) <= 10.0 ** np.floor(np.log10(p))
    detail.update(rows=len(IMPORTANCE) + len(CONDITIONAL_EFFECTS), max_dz=f"{worst_z:.4f}")


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "formulanet.cli", *args],
                          capture_output=True, text=True)


@pytest.mark.criterion(9, "bootstrap B=30 determinism across runs and --threads 1/4")
def test_bootstrap_determinism(tmp_path, detail):
    data = tmp_path / "d.csv"
    data.write_text(linear_table(3, n=200).to_csv())
    blobs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        out = tmp_path / f"{name}.fnm"
        proc = _cli("train", "--data", str(data), "--formula", "y ~ .", "--out", str(out),
                    "--hidden", "10", "--epochs", "5", "--bootstrap", "30", "--seed", "11",
                    "--threads", threads, "--quiet")
        assert proc.returncode == 0, proc.stderr
        blobs.append(out.read_bytes())
    model = load_model(tmp_path / "a.fnm")
    detail.update(B=model.ensemble.B, distinct_seeds=len(set(model.ensemble.seeds)))
    assert model.ensemble.B == 30 and len(set(model.ensemble.seeds)) == 30
    assert blobs[0] == blobs[1] == blobs[2]


@pytest.mark.criterion(10, "persistence bit-identical round trip; corruption rejected")
def test_persistence(tmp_path, detail):
    cfg = TrainConfig(hidden=(8, 8), epochs=5, validation=0.2, bootstrap=3, seed=2)
    model = fit(cfg, linear_table(5, n=300), "y ~ .")
    path = tmp_path / "m.fnm"
    save_model(model, path)
    back = load_model(path)

    def outputs(m):
        yield from predict(m)
        yield from predict(m, scale="link")
        yield residuals(m)
        yield np.array([v for _, v in permutation_importance(m)])
        yield avg_conditional_effects(m).ace
        for fn in (partial_dependence, accumulated_local_effects):
            c = fn(m, "x2")
            yield c.values
            yield c.se

    same = all(a.tobytes() == b.tobytes() for a, b in zip(outputs(model), outputs(back)))
    same &= summarize(model).text == summarize(back).text

    blob = bytearray(path.read_bytes())
    i = blob.index(b"\n", blob.index(b"PAYLOAD 1 ")) + 7
    blob[i] = ord("A") if blob[i] != ord("A") else ord("B")
    path.write_bytes(bytes(blob))
    rejected = False
    try:
        load_model(path)
    except ChecksumMismatch:
        rejected = True
    detail.update(identical=same, corrupted_rejected=rejected)
    assert same and rejected


def presence_absence(seed=0, n=2000, p=19):
    """Imbalanced presence/absence data over p correlated covariates."""
    rng = np.random.default_rng(seed)
    idx = np.arange(p)
    cov = 0.6 ** np.abs(idx[:, None] - idx[None, :])
    x = rng.multivariate_normal(np.zeros(p), cov, size=n)
    eta = -1.5 + 1.2 * x[:, 0] - 0.8 * x[:, 3] + 0.6 * x[:, 11] ** 2 - 0.9 * x[:, 15]
    label = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    cols = {"label": label}
    cols.update({f"bio{j + 1}": x[:, j] for j in range(p)})
    return DataTable.from_dict(cols)


@pytest.mark.criterion(11, "end-to-end balance/train/continue/explain/predict < 10 min")
def test_end_to_end(tmp_path, detail):
    t0 = time.perf_counter()
    raw = tmp_path / "pa.csv"
    raw.write_text(presence_absence().to_csv())
    bal, m1, m2 = tmp_path / "bal.csv", tmp_path / "m1.fnm", tmp_path / "m2.fnm"

    steps = [
        ("balance", "--data", str(raw), "--response", "label", "--seed", "1", "--out", str(bal)),
        ("train", "--data", str(bal), "--formula", "label ~ .", "--loss", "binomial",
         "--hidden", "50,50,50", "--epochs", "50", "--lr", "0.1", "--batchsize", "300",
         "--validation", "0.1", "--alpha", "0.5", "--lambda", "0.005",
         "--early-stopping", "10", "--bootstrap", "10", "--out", str(m1)),
        ("continue", "--model", str(m1), "--epochs", "150", "--lr", "0.05",
         "--lr-scheduler", "reduce_on_plateau", "--patience", "8", "--factor", "0.8",
         "--out", str(m2)),
        ("explain", "--model", str(m2), "--what", "summary"),
        ("predict", "--model", str(m2), "--data", str(raw), "--out", str(tmp_path / "p.csv")),
    ]
    procs = []
    for step in steps:
        proc = _cli(*step)
        assert proc.returncode == 0, f"{step[0]}: {proc.stderr}"
        procs.append(proc)
    elapsed = time.perf_counter() - t0

    with open(bal, newline="") as fh:
        labels = [r[0] for r in list(csv.reader(fh))[1:]]
    assert labels.count("1.0") == labels.count("0.0")

    lines = procs[3].stdout.splitlines()
    tables = [i for i, line in enumerate(lines) if line.startswith("── ")]
    assert [lines[i] for i in tables] == ["── Feature Importance",
                                          "── Average Conditional Effects"]
    for i, label in zip(tables, ("Importance", "ACE")):
        assert lines[i + 1] == ""
        assert lines[i + 2].split() == [label, "Std.Err", "Z", "value", "Pr(>|z|)"]
        rows = lines[i + 3:i + 22]
        assert [r.split(" → ")[0] for r in rows] == [f"bio{j}" for j in range(1, 20)]
        assert all(r.split()[2] == "label" and len(r.split()) in (7, 8) for r in rows)
        assert lines[i + 22:i + 24] == ["---", SIGNIF_LEGEND]

    with open(tmp_path / "p.csv", newline="") as fh:
        pred = list(csv.reader(fh))
    assert pred[0] == ["pred", "se"] and len(pred) == 2001
    m = load_model(m2)
    detail.update(seconds=f"{elapsed:.0f}", epochs=len(m.history), B=m.ensemble.B)
    assert elapsed < 600


@pytest.mark.criterion(12, "5 x 100 network, 1000 x 10 data, 100 epochs < 60 s")
def test_performance(detail):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 10))
    cols = {"y": X @ rng.normal(size=10) + rng.normal(size=1000)}
    cols.update({f"x{j}": X[:, j] for j in range(10)})
    t0 = time.perf_counter()
    model = fit(TrainConfig(hidden=(100,) * 5, epochs=100, batchsize=32),
                DataTable.from_dict(cols), "y ~ .")
    elapsed = time.perf_counter() - t0
    detail.update(seconds=f"{elapsed:.1f}", final=f"{model.history.train_losses()[-1]:.3g}")
    assert len(model.history) == 100
    assert elapsed < 60
