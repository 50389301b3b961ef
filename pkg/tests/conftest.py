import numpy as np
import pytest

from covquant.modes import ModeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid4():
    return ModeGrid(d=1, n_per_axis=4, box_length=2 * np.pi, mass=1.0)


@pytest.fixture
def grid8():
    return ModeGrid(d=1, n_per_axis=8, box_length=2 * np.pi * 2, mass=1.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
