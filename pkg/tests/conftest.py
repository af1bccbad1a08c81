import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def wishart(rng, d, k=None, ridge=1e-3):
    k = k or 2 * d
    G = rng.standard_normal((d, k)) * np.exp(rng.standard_normal(d))[:, None]
    return G @ G.T + ridge * np.eye(d)


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by the test")
    config.stash[_CRITERIA] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, text = mark.args
    results = item.config.stash[_CRITERIA]
    ok = call.excinfo is None
    results[n] = (text, results.get(n, (text, True))[1] and ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        text, ok = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
