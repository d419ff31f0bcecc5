import numpy as np
import pytest

from flame_iv.data import CovariateSchema, make_dataset


def binary_dataset(x, z, t=None, y=None, ids=None):
    x = np.asarray(x)
    n, p = x.shape
    t = np.zeros(n) if t is None else t
    y = np.zeros(n) if y is None else y
    schema = CovariateSchema(tuple(f"x{j}" for j in range(p)), (2,) * p)
    return make_dataset(x, z, t, y, schema=schema, ids=ids)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one acceptance verdict; printed in the terminal summary."""

    def _record(criterion, passed, detail):
        ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
