import numpy as np
import pytest

from akglab.pekar import pekar_minimize
from akglab.spectral import GridSpec


@pytest.fixture(scope="session")
def grid32():
    return GridSpec(3.0, 32)


@pytest.fixture(scope="session")
def pekar32(grid32):
    return pekar_minimize(grid32)


@pytest.fixture(scope="session")
def grid16():
    return GridSpec(3.0, 16)


@pytest.fixture(scope="session")
def pekar16(grid16):
    return pekar_minimize(grid16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturbed(p, amplitude, seed, smooth=6.0):
    from akglab.pekar import random_field
    from akglab.spectral import weighted_norm
    g = p.grid
    d = random_field(g, np.random.default_rng(seed), smooth)
    d *= amplitude * weighted_norm(g, p.phi_star, 0.5) / weighted_norm(g, d, 0.5)
    return p.phi_star + d


ACCEPTANCE_LINES = []


def record_criterion(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
