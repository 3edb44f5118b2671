import numpy as np
import pytest
from hypothesis import settings

from vqplan.trajgen import SetpointQP, build_basis

settings.register_profile("default", max_examples=50, deadline=None, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def basis():
    return build_basis()


@pytest.fixture(scope="session")
def qp(basis):
    return SetpointQP(basis)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
