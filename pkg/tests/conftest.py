import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def naive_dft2(x):
    """Direct double sum over every (m, n) for each (u, v); x is M x N."""
    M, N = x.shape
    out = np.zeros((M, N), dtype=complex)
    m = np.arange(M)[:, None]
    n = np.arange(N)[None, :]
    for u in range(M):
        for v in range(N):
            out[u, v] = np.sum(x * np.exp(-2j * np.pi * (u * m / M + v * n / N)))
    return out


def naive_idft2(f):
    M, N = f.shape
    out = np.zeros((M, N), dtype=complex)
    u = np.arange(M)[:, None]
    v = np.arange(N)[None, :]
    for m in range(M):
        for n in range(N):
            out[m, n] = np.sum(f * np.exp(2j * np.pi * (u * m / M + v * n / N))) / (M * N)
    return out


CRITERIA = {
    1: "FFT oracle",
    2: "DWT reconstruction and energy",
    3: "channel-balance arithmetic",
    4: "top-K filter",
    5: "gradient checks",
    6: "mask AP oracle",
    7: "end-to-end desk training",
    8: "ablation harness trend",
    9: "statistics sanity",
}
_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or rep.failed:
        ok = rep.passed if rep.when == "call" else False
        _outcomes.setdefault(n, []).append(ok)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {status}")
