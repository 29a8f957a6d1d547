import numpy as np
import pytest

from douba.measures import BoxDomain, DiscreteMeasure, Grid


def random_measure(rng, n, d=1, lo=0.0, hi=1.0, domain=None):
    pts = rng.uniform(lo, hi, size=(n, d))
    w = rng.uniform(0.1, 1.0, size=n)
    return DiscreteMeasure(pts, w / w.sum(), domain=domain)


def random_grid_measure(rng, grid, floor=0.05):
    w = rng.uniform(floor, 1.0, size=grid.n_cells)
    return grid.measure(w / w.sum())


@pytest.fixture
def unit_grid():
    return Grid.regular([0.0], [1.0], 16)


@pytest.fixture
def unit_box():
    return BoxDomain([0.0], [1.0])


def seeds(count, base=0):
    return [base + i for i in range(count)]


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
