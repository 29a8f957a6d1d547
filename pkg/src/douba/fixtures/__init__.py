"""Bundled input files.

``fig2/`` holds three 1D densities on [0, 1] (bimodal, skewed, plateau)
discretized on a 200-cell grid. They are stand-ins chosen to have distinct
shapes; the comparison figure they feed only asserts orderings between
barycenters. ``configs/`` holds ready-to-run command configs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..measures import Grid

ROOT = Path(__file__).resolve().parent
FIG2_NAMES = ("bimodal", "skewed", "plateau")


def path(*parts) -> Path:
    return ROOT.joinpath(*parts)


def fig2_grid(cells: int = 200) -> Grid:
    return Grid.regular([0.0], [1.0], cells)


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def fig2_densities():
    """Unnormalized densities on [0, 1], keyed by name."""
    return {
        "bimodal": lambda x: np.exp(-0.5 * ((x - 0.25) / 0.06) ** 2) + 0.8 * np.exp(-0.5 * ((x - 0.6) / 0.05) ** 2),
        "skewed": lambda x: x**2 * (1 - x) ** 8,
        "plateau": lambda x: _sigmoid((x - 0.45) / 0.015) * _sigmoid(-(x - 0.85) / 0.015),
    }


def fig2_marginals(cells: int = 200):
    grid = fig2_grid(cells)
    dens = fig2_densities()
    return [grid.from_density(lambda X, f=dens[name]: f(X[:, 0])) for name in FIG2_NAMES]


def write_fig2(directory=None) -> list:
    from ..io import write_measure

    directory = Path(directory) if directory is not None else path("fig2")
    return [write_measure(directory / f"{name}.csv", m) for name, m in zip(FIG2_NAMES, fig2_marginals())]
