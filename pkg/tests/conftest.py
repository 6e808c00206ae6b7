import numpy as np
import pytest

from shufflenas.tensor import default_dtype


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
            print(f"\n{line}")
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
