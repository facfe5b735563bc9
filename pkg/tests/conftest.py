import numpy as np
import pytest

from ipeps_ntu.lattice import IpepsState

ACCEPTANCE_LINES = []


def random_state(rng, p=2, dims=(2, 2, 2, 2), complex_=False):
    """Random checkerboard state; ``dims`` are the bond dimensions of A (t, l, b, r)."""
    t, l, b, r = dims

    def draw(shape):
        x = rng.standard_normal(shape)
        if complex_:
            x = x + 1j * rng.standard_normal(shape)
        return x

    a = draw((p, t, l, b, r))
    bb = draw((p, b, r, t, l))
    return IpepsState(a, bb)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
