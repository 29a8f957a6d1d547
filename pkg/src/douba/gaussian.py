"""Closed forms for barycenters of isotropic Gaussians with a common variance.

For marginals ``N(x_k, a I_d)`` the (lam, tau)-barycenter is
``N(sum_k w_k x_k, b I_d)`` with ``b`` given by :func:`barycenter_variance`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .measures import Grid

TABLE2_ROWS = ("unregularized", "inner_only", "outer_only", "schrodinger", "debiased_half")


@dataclass(frozen=True)
class GaussianIso:
    """``N(mean, variance * I_d)``; zero variance is a point mass."""

    mean: tuple
    variance: float

    def __post_init__(self):
        mean = tuple(float(v) for v in np.atleast_1d(self.mean))
        if not self.variance >= 0:
            raise InvalidInputError("variance must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def w2(self, other: "GaussianIso") -> float:
        """Exact W2 between two isotropic Gaussians."""
        shift = np.subtract(self.mean, other.mean)
        spread = math.sqrt(self.variance) - math.sqrt(other.variance)
        return math.sqrt(float(shift @ shift) + self.dim * spread**2)

    def on_grid(self, grid: Grid):
        """Midpoint discretization on ``grid`` (requires positive variance)."""
        if self.variance <= 0:
            raise InvalidInputError("a point mass has no density")
        mean = np.asarray(self.mean)
        return grid.from_log_density(
            -0.5 * np.sum((grid.cell_centers - mean) ** 2, axis=1) / self.variance
        )


def _check_nonneg(**values):
    for name, v in values.items():
        if not v >= 0:
            raise InvalidInputError(f"{name} must be nonnegative, got {v!r}")


def barycenter_variance(a: float, lam: float, tau: float) -> float:
    """Variance ``b`` of the (lam, tau)-barycenter of ``N(x_k, a I)`` marginals."""
    _check_nonneg(a=a, lam=lam, tau=tau)
    if a == 0:
        return float(tau)
    root = math.sqrt((a - lam) ** 2 + 4 * a * tau)
    return ((a + root) ** 2 - lam**2) / (4 * a)


def tau_star(a: float, lam: float) -> float:
    """Outer strength for which the barycenter variance equals ``a`` exactly."""
    if not a > 0:
        raise InvalidInputError("a must be positive")
    _check_nonneg(lam=lam)
    u = lam**2 / (4 * a**2)
    # 1 - sqrt(1 + u) without cancellation
    return lam / 2 - a * u / (1 + math.sqrt(1 + u))


def gaussian_eot_quantities(a: float, b: float, lam: float):
    """``(xi, u, v)`` of the quadratic Schrodinger potentials between N(0, a) and N(0, b).

    The potentials are ``u |x|^2 / 2`` and ``v |y|^2 / 2``.
    """
    if not (a > 0 and b > 0 and lam > 0):
        raise InvalidInputError("a, b and lam must be positive")
    xi = math.sqrt(4 * a * b + lam**2)
    return xi, 1 - 2 * b / (xi + lam), 1 - 2 * a / (xi + lam)


def optimality_residual(a: float, lam: float, tau: float) -> float:
    """``v - tau / b`` at the closed-form ``b``; zero at the barycenter."""
    b = barycenter_variance(a, lam, tau)
    _, _, v = gaussian_eot_quantities(a, b, lam)
    return v - tau / b


def table2_row(name: str, a: float, lam: float = 0.0, tau: float = 0.0) -> float:
    """Exact value or small-parameter expansion of the barycenter variance in special regimes."""
    if name == "unregularized":
        return a
    if name == "inner_only":
        return max(a - lam, 0.0)
    if name == "outer_only":
        return a + 2 * tau - tau**2 / a
    if name == "schrodinger":
        return a + lam
    if name == "debiased_half":
        return a + lam**2 / (4 * a)
    raise InvalidInputError(f"unknown row {name!r}; expected one of {TABLE2_ROWS}")


def gaussian_barycenter(means, weights, a: float, lam: float, tau: float) -> GaussianIso:
    means = np.atleast_2d(np.asarray(means, dtype=float))
    weights = np.asarray(weights, dtype=float)
    return GaussianIso(weights @ means, barycenter_variance(a, lam, tau))


def w2_per_dim(a: float, lam: float, tau: float) -> float:
    """``d^{-1/2} W2`` between the (lam, tau)-barycenter and the unregularized one."""
    return abs(math.sqrt(barycenter_variance(a, lam, tau)) - math.sqrt(a))


def debiasing_map(lambdas, taus, a: float = 1.0) -> np.ndarray:
    """Rows ``(lam, tau, w2_distance)`` over the lattice ``lambdas x taus``."""
    return np.array([(lam, tau, w2_per_dim(a, lam, tau)) for lam in lambdas for tau in taus])


def tau_star_curve(lambdas, a: float = 1.0) -> np.ndarray:
    return np.array([(lam, tau_star(a, lam)) for lam in lambdas])
