import csv
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from formulanet.cli import main
from formulanet.network import Network, NetworkConfig
from formulanet.persist import load_model, save_model
from formulanet.tabular import DataTable, read_csv
from formulanet.training import model_from_network, predict
from formulanet.uncertainty import SIGNIF_LEGEND

from conftest import linear_network, linear_table

SVG = "{http://www.w3.org/2000/svg}"


def _write(table, path):
    path.write_text(table.to_csv())
    return str(path)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def small_csv(tmp_path):
    return _write(linear_table(0, n=100), tmp_path / "d.csv")


@pytest.fixture
def binary_csv(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=400)
    label = np.where(np.arange(400) < 100, 1.0, 0.0)
    t = DataTable.from_dict({"label": label, "x": x + label, "z": rng.normal(size=400)})
    return _write(t, tmp_path / "b.csv")


def _train(data, out, *extra):
    return main(["train", "--data", data, "--formula", "y ~ .", "--out", str(out),
                 "--hidden", "5", "--epochs", "3", "--quiet", *extra])


class TestTrain:
    def test_writes_model_and_plot(self, small_csv, tmp_path, capsys):
        out = tmp_path / "m.fnm"
        assert main(["train", "--data", small_csv, "--formula", "y ~ .", "--out", str(out),
                     "--hidden", "5", "--epochs", "4"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("epoch=1 train=") and len(lines) == 5
        assert load_model(out).history.last_epoch == 4
        root = ET.parse(f"{out}.loss.svg").getroot()
        assert len(root.findall(f".//{SVG}polyline")) == 3

    def test_case_study_flags(self, binary_csv, tmp_path):
        rc = main(["train", "--data", binary_csv, "--formula", "label ~ .", "--loss", "binomial",
                   "--hidden", "50,50,50", "--epochs", "2", "--lr", "0.1", "--batchsize", "300",
                   "--validation", "0.1", "--alpha", "0.5", "--lambda", "0.005",
                   "--early-stopping", "10", "--bootstrap", "2", "--quiet",
                   "--out", str(tmp_path / "m.fnm")])
        assert rc == 0
        m = load_model(tmp_path / "m.fnm")
        assert m.config.hidden == (50, 50, 50) and m.ensemble.B == 2

    def test_missing_formula(self, small_csv, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["train", "--data", small_csv, "--out", str(tmp_path / "m.fnm")])
        assert e.value.code == 2

    @pytest.mark.parametrize("extra", [["--epochs", "0"], ["--validation", "1.5"],
                                       ["--early-stopping", "3"]])
    def test_config_errors(self, small_csv, tmp_path, extra):
        assert _train(small_csv, tmp_path / "m.fnm", *extra) == 2

    def test_formula_error(self, small_csv, tmp_path):
        rc = main(["train", "--data", small_csv, "--formula", "y x1", "--out",
                   str(tmp_path / "m.fnm")])
        assert rc == 2

    def test_unknown_column(self, small_csv, tmp_path):
        rc = main(["train", "--data", small_csv, "--formula", "y ~ nope", "--out",
                   str(tmp_path / "m.fnm")])
        assert rc == 3

    def test_missing_file(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "none.csv"), "--formula", "y ~ .",
                   "--out", str(tmp_path / "m.fnm")])
        assert rc == 3

    def test_divergence(self, small_csv, tmp_path):
        with np.errstate(all="ignore"):
            assert _train(small_csv, tmp_path / "m.fnm", "--lr", "1e4", "--epochs", "40") == 4

    def test_deterministic(self, small_csv, tmp_path):
        _train(small_csv, tmp_path / "a.fnm", "--seed", "3")
        _train(small_csv, tmp_path / "b.fnm", "--seed", "3")
        assert (tmp_path / "a.fnm").read_bytes() == (tmp_path / "b.fnm").read_bytes()
        assert ((tmp_path / "a.fnm.loss.svg").read_bytes()
                == (tmp_path / "b.fnm.loss.svg").read_bytes())

    def test_seed_from_environment(self, small_csv, tmp_path, monkeypatch):
        _train(small_csv, tmp_path / "a.fnm", "--seed", "5")
        monkeypatch.setenv("FORMULANET_SEED", "5")
        _train(small_csv, tmp_path / "b.fnm")
        assert (tmp_path / "a.fnm").read_bytes() == (tmp_path / "b.fnm").read_bytes()


class TestContinue:
    def test_resume(self, small_csv, tmp_path):
        _train(small_csv, tmp_path / "m.fnm")
        rc = main(["continue", "--model", str(tmp_path / "m.fnm"), "--epochs", "5",
                   "--lr", "0.05", "--lr-scheduler", "reduce_on_plateau", "--patience", "8",
                   "--factor", "0.8", "--quiet", "--out", str(tmp_path / "m2.fnm")])
        assert rc == 0
        m = load_model(tmp_path / "m2.fnm")
        assert len(m.history) == 8 and m.config.lr == 0.05 and m.config.factor == 0.8

    @pytest.mark.parametrize("flag", [["--hidden", "10"], ["--activation", "relu"],
                                      ["--loss", "poisson"], ["--no-bias"]])
    def test_architecture_rejected(self, small_csv, tmp_path, flag):
        _train(small_csv, tmp_path / "m.fnm")
        rc = main(["continue", "--model", str(tmp_path / "m.fnm"), "--epochs", "2",
                   "--out", str(tmp_path / "m2.fnm"), *flag])
        assert rc == 2

    def test_zero_epochs(self, small_csv, tmp_path):
        _train(small_csv, tmp_path / "m.fnm")
        rc = main(["continue", "--model", str(tmp_path / "m.fnm"), "--epochs", "0",
                   "--out", str(tmp_path / "m2.fnm")])
        assert rc == 2

    def test_corrupt_model(self, tmp_path):
        (tmp_path / "bad.fnm").write_text("FNM1\nHEADER 2\n{}\n")
        rc = main(["continue", "--model", str(tmp_path / "bad.fnm"), "--epochs", "1",
                   "--out", str(tmp_path / "m2.fnm")])
        assert rc == 3


class TestPredict:
    def test_zero_weight_binomial(self, tmp_path):
        t = DataTable.from_dict({"y": [0.0, 1.0, 0.0], "x": [1.0, 2.0, 3.0]})
        net = Network(NetworkConfig(1, 1, (2,)), [np.zeros((2, 1)), np.zeros((1, 2))],
                      [np.zeros(2), np.zeros(1)])
        save_model(model_from_network(net, t, "y ~ x", loss="binomial"), tmp_path / "m.fnm")
        _write(DataTable.from_dict({"x": [5.0, -1.0]}), tmp_path / "new.csv")
        assert main(["predict", "--model", str(tmp_path / "m.fnm"), "--data",
                     str(tmp_path / "new.csv"), "--out", str(tmp_path / "p.csv")]) == 0
        assert _read_rows(tmp_path / "p.csv") == [["pred"], ["0.5"], ["0.5"]]

    def test_matches_library_and_has_se(self, small_csv, tmp_path):
        _train(small_csv, tmp_path / "m.fnm", "--bootstrap", "3")
        main(["predict", "--model", str(tmp_path / "m.fnm"), "--data", small_csv,
              "--out", str(tmp_path / "p.csv")])
        rows = _read_rows(tmp_path / "p.csv")
        assert rows[0] == ["pred", "se"]
        pred, se = predict(load_model(tmp_path / "m.fnm"), read_csv(small_csv))
        np.testing.assert_array_equal([float(r[0]) for r in rows[1:]], pred)
        np.testing.assert_array_equal([float(r[1]) for r in rows[1:]], se)

    def test_unseen_level(self, tmp_path):
        t = DataTable.from_dict({"y": [0.0, 1.0], "c": ["a", "b"]})
        net = Network(NetworkConfig(2, 1, ()), [np.ones((1, 2))], [np.zeros(1)])
        save_model(model_from_network(net, t, "y ~ c"), tmp_path / "m.fnm")
        _write(DataTable.from_dict({"c": ["a", "zzz"]}), tmp_path / "new.csv")
        assert main(["predict", "--model", str(tmp_path / "m.fnm"), "--data",
                     str(tmp_path / "new.csv"), "--out", str(tmp_path / "p.csv")]) == 3


class TestExplain:
    @pytest.fixture
    def linear_model(self, tmp_path):
        x = np.linspace(-2, 2, 101)
        t = DataTable.from_dict({"y": 2 * x, "x": x})
        save_model(model_from_network(linear_network([2.0]), t, "y ~ x"), tmp_path / "lin.fnm")
        return tmp_path / "lin.fnm"

    def test_summary_with_bootstrap(self, small_csv, tmp_path, capsys):
        _train(small_csv, tmp_path / "m.fnm", "--bootstrap", "3")
        capsys.readouterr()
        assert main(["explain", "--model", str(tmp_path / "m.fnm"), "--what", "summary",
                     "--out", str(tmp_path / "s")]) == 0
        out = capsys.readouterr().out
        assert out.count(SIGNIF_LEGEND) == 2 and "x1 → y" in out
        assert _read_rows(tmp_path / "s.importance.csv")[0] == ["name", "estimate", "std_err",
                                                               "z", "p"]

    def test_ale_needs_feature(self, linear_model):
        assert main(["explain", "--model", str(linear_model), "--what", "ale"]) == 2

    def test_unknown_feature(self, linear_model):
        assert main(["explain", "--model", str(linear_model), "--what", "pdp",
                     "--feature", "nope"]) == 3

    def test_ale_slope(self, linear_model, tmp_path):
        assert main(["explain", "--model", str(linear_model), "--what", "ale",
                     "--feature", "x"]) == 0
        rows = _read_rows(tmp_path / "lin.x.ale.csv")
        assert rows[0] == ["grid", "value"]
        g = np.array([[float(v) for v in r] for r in rows[1:]])
        np.testing.assert_allclose(np.diff(g[:, 1]) / np.diff(g[:, 0]), 2.0, atol=1e-9)
        root = ET.parse(tmp_path / "lin.x.ale.svg").getroot()
        assert len(root.findall(f".//{SVG}polyline")) == 1

    def test_importance_and_ace(self, linear_model, capsys):
        assert main(["explain", "--model", str(linear_model), "--what", "importance"]) == 0
        assert "── Feature Importance" in capsys.readouterr().out
        assert main(["explain", "--model", str(linear_model), "--what", "ace"]) == 0
        out = capsys.readouterr().out
        assert "── Average Conditional Effects" in out and "2.00" in out


class TestBalance:
    def test_undersamples_majority(self, binary_csv, tmp_path):
        out = tmp_path / "bal.csv"
        assert main(["balance", "--data", binary_csv, "--response", "label",
                     "--out", str(out)]) == 0
        rows = _read_rows(out)
        labels = [r[0] for r in rows[1:]]
        assert labels.count("1.0") == 100 and labels.count("0.0") == 100
        original = {tuple(r) for r in _read_rows(binary_csv)[1:]}
        assert {tuple(r) for r in rows[1:]} <= original

    def test_seeded(self, binary_csv, tmp_path):
        for name in ("a", "b"):
            main(["balance", "--data", binary_csv, "--response", "label", "--seed", "4",
                  "--out", str(tmp_path / f"{name}.csv")])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_already_balanced_is_permutation(self, tmp_path):
        t = DataTable.from_dict({"y": [0.0, 1.0] * 10, "x": np.arange(20.0)})
        src = _write(t, tmp_path / "t.csv")
        main(["balance", "--data", src, "--response", "y", "--out", str(tmp_path / "o.csv")])
        assert sorted(_read_rows(tmp_path / "o.csv")[1:]) == sorted(_read_rows(src)[1:])

    def test_non_binary(self, small_csv, tmp_path):
        assert main(["balance", "--data", small_csv, "--response", "y",
                     "--out", str(tmp_path / "o.csv")]) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "formulanet.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("formulanet ")
