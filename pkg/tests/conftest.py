import numpy as np
import pytest

from cadmm.qp import QpProblem


def random_qp(rng, n=None, m_eq=None, m_in=None):
    """Random strictly convex QP whose feasible set is nonempty."""
    n = n or int(rng.integers(1, 13))
    m_eq = int(rng.integers(0, min(n, 4))) if m_eq is None else m_eq
    m_in = int(rng.integers(0, 9)) if m_in is None else m_in
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    z0 = rng.normal(size=n)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ z0
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ z0 + rng.uniform(0, 1, m_in)
    return QpProblem(P, q, A_eq, b_eq, A_in, b_in)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def add(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
