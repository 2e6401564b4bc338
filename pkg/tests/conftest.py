import numpy as np
import pytest

from uwmmse import _backend

BACKENDS = ["numba", "numpy"] if _backend.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    with _backend.backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_hpd(rng, n, batch=(), shift=0.5):
    X = crandn(rng, *batch, n, n)
    return X @ np.conj(np.swapaxes(X, -1, -2)) + shift * np.eye(n)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
