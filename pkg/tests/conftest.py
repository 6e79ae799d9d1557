import numpy as np
import pytest

from formulanet.network import Network, NetworkConfig
from formulanet.tabular import DataTable


def linear_table(seed, n=1000, noise=0.1, n_noise=0):
    """y = 2*x1 - x2 + N(0, noise^2), plus optional pure-noise columns."""
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    cols = {"y": 2 * x1 - x2 + rng.normal(0, noise, n), "x1": x1, "x2": x2}
    for j in range(n_noise):
        cols[f"z{j + 1}"] = rng.normal(size=n)
    return DataTable.from_dict(cols)


def linear_network(slopes, intercept=0.0):
    """Hand-built network with no hidden layers computing intercept + slopes . x."""
    slopes = np.asarray(slopes, dtype=float)
    cfg = NetworkConfig(len(slopes), 1, hidden=())
    return Network(cfg, [slopes.reshape(1, -1)], [np.array([intercept])])


def additive_network(g_scale=1.5):
    """f(x1, x2) = g_scale * relu(x1) + x2 built from three relu units."""
    cfg = NetworkConfig(2, 1, hidden=(3,), activation="relu")
    W1 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    W2 = np.array([[g_scale, 1.0, -1.0]])
    return Network(cfg, [W1, W2], [np.zeros(3), np.zeros(1)])


@pytest.fixture
def lin_table():
    return linear_table(0, n=300)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_CRITERIA = {}


@pytest.fixture
def detail():
    """Free-form notes a criterion test attaches to its report line."""
    return {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    notes = item.funcargs.get("detail") or {}
    text = ", ".join(f"{k}={v}" for k, v in notes.items())
    _CRITERIA[number] = (title, rep.passed, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, text = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
