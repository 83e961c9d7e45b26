import numpy as np
import pytest

from shufflepoint.tensor import Tensor

# one (name, passed, seconds) row per acceptance criterion, filled by test_acceptance
ACCEPTANCE_ROWS = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, secs in sorted(ACCEPTANCE_ROWS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  AC{name}  ({secs:.2f}s)")
