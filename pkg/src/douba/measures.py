"""Measures, grids, costs, entropies and exact one-dimensional transport.

Every probability measure in the package is a :class:`DiscreteMeasure`:
marginals, grid discretizations of densities and particle clouds alike.
A measure that lives on a :class:`Grid` carries a reference to it, which
gives meaning to its (differential) entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainMismatchError, InvalidInputError, UnsupportedDimensionError

WEIGHT_SUM_TOL = 1e-12
_ALIGN_TOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BoxDomain:
    """Axis-aligned box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lo))
        hi = _frozen(np.atleast_1d(self.hi))
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise InvalidInputError("lo and hi must be vectors of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise InvalidInputError("box bounds must be finite")
        if not np.all(lo < hi):
            raise InvalidInputError(f"empty box: lo={lo.tolist()} hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, points, atol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo - atol) & (points <= self.hi + atol), axis=1)

    def project(self, points) -> np.ndarray:
        """Euclidean projection onto the box (componentwise clamp)."""
        return np.clip(points, self.lo, self.hi)

    def shifted(self, offset) -> "BoxDomain":
        return BoxDomain(self.lo + offset, self.hi + offset)

    def __eq__(self, other):
        return (
            isinstance(other, BoxDomain)
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def __hash__(self):
        return hash((tuple(self.lo), tuple(self.hi)))


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular midpoint grid on a box, used as quadrature for ``dx``.

    Cells are enumerated in C order over the axes.
    """

    domain: BoxDomain
    cells_per_axis: tuple
    cell_centers: np.ndarray = field(init=False, repr=False)
    cell_volume: float = field(init=False)

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells_per_axis))
        if len(cells) != self.domain.dim:
            raise InvalidInputError(
                f"grid has {len(cells)} axes but the domain has dimension {self.domain.dim}"
            )
        if any(c < 1 for c in cells):
            raise InvalidInputError("cells_per_axis must be positive")
        object.__setattr__(self, "cells_per_axis", cells)
        widths = (self.domain.hi - self.domain.lo) / np.array(cells)
        axes = [
            self.domain.lo[i] + (np.arange(cells[i]) + 0.5) * widths[i] for i in range(len(cells))
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([m.ravel() for m in mesh], axis=1)
        object.__setattr__(self, "cell_centers", _frozen(centers))
        object.__setattr__(self, "cell_volume", float(np.prod(widths)))
        object.__setattr__(self, "_widths", widths)

    @classmethod
    def regular(cls, lo, hi, cells) -> "Grid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        cells = np.atleast_1d(cells)
        if cells.size == 1 and lo.size > 1:
            cells = np.repeat(cells, lo.size)
        return cls(BoxDomain(lo, hi), tuple(int(c) for c in cells))

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_cells(self) -> int:
        return self.cell_centers.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self._widths

    def cell_index(self, points) -> np.ndarray:
        """Index of the cell containing each point (points on faces go to the lower cell)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (points - self.domain.lo) / self._widths
        idx = np.clip(np.floor(rel).astype(int), 0, np.array(self.cells_per_axis) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.cells_per_axis)

    def aligned_index(self, points) -> np.ndarray:
        """Cell indices of points that sit on cell centers; raises otherwise."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise DomainMismatchError("point dimension differs from grid dimension")
        idx = self.cell_index(points)
        off = np.abs(self.cell_centers[idx] - points) / self._widths
        if not np.all(off <= _ALIGN_TOL):
            raise DomainMismatchError("atoms are not aligned with grid cell centers")
        return idx

    def uniform(self) -> "DiscreteMeasure":
        """The normalized Lebesgue measure of the box, discretized."""
        return self.measure(np.full(self.n_cells, 1.0 / self.n_cells))

    def measure(self, weights, normalize: bool = False) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != self.n_cells:
            raise DomainMismatchError(f"expected {self.n_cells} cell weights, got {w.shape[0]}")
        if normalize:
            w = w / w.sum()
        return DiscreteMeasure(self.cell_centers, w, grid=self)

    def from_density(self, density: Callable[[np.ndarray], np.ndarray]) -> "DiscreteMeasure":
        """Midpoint discretization of an (unnormalized) density."""
        values = np.asarray(density(self.cell_centers), dtype=float).ravel()
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise InvalidInputError("density must be finite and nonnegative")
        return self.measure(values, normalize=True)

    def from_log_density(self, log_density) -> "DiscreteMeasure":
        log_density = np.asarray(log_density, dtype=float).ravel()
        w = np.exp(log_density - log_density.max())
        return self.measure(w, normalize=True)

    def project(self, m: "DiscreteMeasure") -> "DiscreteMeasure":
        """Move every atom of ``m`` to the center of the cell containing it."""
        w = np.bincount(self.cell_index(m.points), weights=m.weights, minlength=self.n_cells)
        return self.measure(w, normalize=True)

    def embed(self, m: "DiscreteMeasure") -> "DiscreteMeasure":
        """Full-grid representation of a measure whose atoms sit on cell centers."""
        idx = self.aligned_index(m.points)
        w = np.bincount(idx, weights=m.weights, minlength=self.n_cells)
        return self.measure(w)

    def shifted(self, offset) -> "Grid":
        return Grid(self.domain.shifted(offset), self.cells_per_axis)

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.domain == other.domain
            and self.cells_per_axis == other.cells_per_axis
        )

    def __hash__(self):
        return hash((self.domain, self.cells_per_axis))


class DiscreteMeasure:
    """Probability measure ``sum_i w_i delta_{x_i}`` on R^d.

    Parameters
    ----------
    points : array-like, shape (n, d) or (n,)
        Atom locations. A 1D array is read as n atoms in dimension 1.
    weights : array-like, shape (n,)
        Nonnegative weights summing to one (within 1e-12).
    grid : Grid, optional
        Set when the atoms are exactly the cell centers of ``grid``.
    domain : BoxDomain, optional
        Box that must contain every atom. Defaults to the grid's domain.
    """

    __slots__ = ("points", "weights", "grid", "domain")

    def __init__(self, points, weights, grid: Grid | None = None, domain: BoxDomain | None = None):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(weights, dtype=float).ravel()
        if points.ndim != 2 or points.shape[0] != weights.shape[0] or weights.shape[0] < 1:
            raise InvalidInputError("points and weights must have equal nonzero length")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidInputError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL * max(1, weights.shape[0] ** 0.5):
            raise InvalidInputError(f"weights sum to {weights.sum()!r}, not 1")
        if not np.all(np.isfinite(points)):
            raise InvalidInputError("points must be finite")
        if grid is not None:
            if points.shape != grid.cell_centers.shape or not np.allclose(
                points, grid.cell_centers, rtol=0, atol=1e-12
            ):
                raise DomainMismatchError("grid measure atoms must be the grid cell centers")
            domain = domain or grid.domain
        if domain is not None:
            if domain.dim != points.shape[1]:
                raise DomainMismatchError("measure and domain dimensions differ")
            if not np.all(domain.contains(points)):
                raise DomainMismatchError("some atoms lie outside the domain")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "domain", domain)

    def __setattr__(self, name, value):
        raise AttributeError("DiscreteMeasure is immutable")

    @classmethod
    def dirac(cls, x, domain: BoxDomain | None = None) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [1.0], domain=domain)

    @classmethod
    def uniform(cls, points, domain: BoxDomain | None = None) -> "DiscreteMeasure":
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n), domain=domain)

    @classmethod
    def from_unnormalized(cls, points, weights, **kwargs) -> "DiscreteMeasure":
        weights = np.asarray(weights, dtype=float)
        return cls(points, weights / weights.sum(), **kwargs)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    def __repr__(self):
        tag = f", grid={self.grid.cells_per_axis}" if self.grid is not None else ""
        return f"DiscreteMeasure(n={self.size}, d={self.dim}{tag})"

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        centered = self.points - self.mean()
        return (centered * self.weights[:, None]).T @ centered

    def variance(self) -> float:
        """Trace of the covariance divided by d (the isotropic variance)."""
        return float(np.trace(self.covariance()) / self.dim)

    def support(self, threshold: float = 0.0) -> "DiscreteMeasure":
        """Drop atoms with weight <= threshold (grid tag is lost)."""
        keep = self.weights > threshold
        w = self.weights[keep]
        return DiscreteMeasure(self.points[keep], w / w.sum(), domain=self.domain)

    def merge_duplicates(self) -> "DiscreteMeasure":
        """Collapse atoms at identical locations, summing their weights."""
        if self.grid is not None:
            return self
        uniq, inverse = np.unique(self.points, axis=0, return_inverse=True)
        w = np.bincount(inverse.ravel(), weights=self.weights, minlength=uniq.shape[0])
        return DiscreteMeasure(uniq, w / w.sum(), domain=self.domain)

    def with_weights(self, weights) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, weights, grid=self.grid, domain=self.domain)

    def translated(self, offset) -> "DiscreteMeasure":
        grid = self.grid.shifted(offset) if self.grid is not None else None
        domain = self.domain.shifted(offset) if self.domain is not None else None
        return DiscreteMeasure(self.points + offset, self.weights, grid=grid, domain=domain)

    def same_support(self, other: "DiscreteMeasure") -> bool:
        return self.points.shape == other.points.shape and np.allclose(
            self.points, other.points, rtol=0, atol=1e-12
        )


@dataclass(frozen=True)
class CostFunction:
    """Ground cost with its x-gradient, both vectorized over atom sets.

    ``evaluator(X, Y)`` maps arrays of shape (n, d) and (m, d) to the (n, m)
    cost matrix; ``gradient_x(X, Y)`` returns the (n, m, d) array of
    ``grad_x c(x_i, y_j)``.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gradient_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "custom"

    @classmethod
    def squared_half(cls) -> "CostFunction":
        return cls(_sq_half, _sq_half_grad, "squared_half")

    @classmethod
    def constant(cls, value: float) -> "CostFunction":
        def evaluator(X, Y):
            return np.full((X.shape[0], Y.shape[0]), float(value))

        def gradient(X, Y):
            return np.zeros((X.shape[0], Y.shape[0], X.shape[1]))

        return cls(evaluator, gradient, "custom")

    def matrix(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return self.evaluator(X, Y)

    def grad_matrix(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return self.gradient_x(X, Y)

    def __call__(self, x, y) -> float:
        return float(self.matrix(x, y)[0, 0])

    def grad(self, x, y) -> np.ndarray:
        return self.grad_matrix(x, y)[0, 0]


def _sq_half(X, Y):
    # expanded form loses accuracy for nearby points
    diff = X[:, None, :] - Y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _sq_half_grad(X, Y):
    return X[:, None, :] - Y[None, :, :]


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------


def _xlogy(w, r):
    out = np.zeros_like(w)
    pos = w > 0
    out[pos] = w[pos] * np.log(w[pos] / r[pos])
    return out


def entropy(m: DiscreteMeasure, grid: Grid | None = None) -> float:
    """Negative differential entropy ``sum_i w_i log(w_i / vol)`` of a grid measure.

    A measure without a grid has no density and gets ``+inf``.
    """
    if grid is None:
        grid = m.grid
        if grid is None:
            return float("inf")
        w = m.weights
    elif m.grid is not None and m.grid == grid:
        w = m.weights
    else:
        idx = grid.aligned_index(m.points)
        w = np.bincount(idx, weights=m.weights, minlength=grid.n_cells)
    return float(_xlogy(w, np.full_like(w, grid.cell_volume)).sum())


def relative_entropy(m: DiscreteMeasure, ref: DiscreteMeasure) -> float:
    """KL divergence ``H(m | ref)`` for measures on the same atoms."""
    if not m.same_support(ref):
        raise DomainMismatchError("relative entropy needs identical atom locations")
    w, r = m.weights, ref.weights
    if np.any((w > 0) & (r <= 0)):
        return float("inf")
    return float(max(_xlogy(w, r).sum(), 0.0))


def total_variation(m: DiscreteMeasure, n: DiscreteMeasure) -> float:
    """L1 distance ``sum_i |m_i - n_i|`` between measures on shared atoms."""
    if not m.same_support(n):
        raise DomainMismatchError("total variation needs identical atom locations")
    return float(np.abs(m.weights - n.weights).sum())


# ---------------------------------------------------------------------------
# exact 1D transport through quantile functions
# ---------------------------------------------------------------------------


def _require_1d(*measures):
    for m in measures:
        if m.dim != 1:
            raise UnsupportedDimensionError(f"expected a 1D measure, got dimension {m.dim}")


def _sorted_atoms(m: DiscreteMeasure):
    x = m.points[:, 0]
    keep = m.weights > 0
    x, w = x[keep], m.weights[keep]
    uniq, inverse = np.unique(x, return_inverse=True)
    w = np.bincount(inverse, weights=w, minlength=uniq.size)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return uniq, cdf


def quantile_segments(measures: Sequence[DiscreteMeasure]):
    """Common refinement of the quantile functions of several 1D measures.

    Returns ``(mass, values)`` where ``mass[s]`` is the length of the s-th
    quantile interval and ``values[k, s]`` the quantile of measure k on it.
    """
    _require_1d(*measures)
    atoms = [_sorted_atoms(m) for m in measures]
    breaks = np.unique(np.concatenate([[0.0]] + [cdf for _, cdf in atoms]))
    breaks = breaks[(breaks >= 0) & (breaks <= 1)]
    if breaks[-1] < 1.0:
        breaks = np.append(breaks, 1.0)
    mass = np.diff(breaks)
    mid = 0.5 * (breaks[:-1] + breaks[1:])
    keep = mass > 0
    mass, mid = mass[keep], mid[keep]
    values = np.empty((len(measures), mid.size))
    for k, (x, cdf) in enumerate(atoms):
        idx = np.minimum(np.searchsorted(cdf, mid, side="left"), x.size - 1)
        values[k] = x[idx]
    return mass, values


def wasserstein2_1d(m: DiscreteMeasure, n: DiscreteMeasure) -> float:
    """Exact W2 between 1D measures (L2 distance of quantile functions)."""
    mass, q = quantile_segments([m, n])
    return float(np.sqrt(max(np.sum(mass * (q[0] - q[1]) ** 2), 0.0)))


def wasserstein1_1d(m: DiscreteMeasure, n: DiscreteMeasure) -> float:
    """Exact W1 between 1D measures (L1 distance of quantile functions)."""
    mass, q = quantile_segments([m, n])
    return float(np.sum(mass * np.abs(q[0] - q[1])))


def quantile_barycenter_1d(marginals: Sequence[DiscreteMeasure], weights) -> DiscreteMeasure:
    """Unregularized W2 barycenter of 1D measures by averaging quantile functions."""
    if len(marginals) == 0:
        raise InvalidInputError("at least one marginal is required")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(marginals),) or np.any(weights < 0):
        raise InvalidInputError("need one nonnegative weight per marginal")
    if abs(weights.sum() - 1) > WEIGHT_SUM_TOL:
        raise InvalidInputError("weights must sum to 1")
    mass, q = quantile_segments(marginals)
    atoms = weights @ q
    bary = DiscreteMeasure(atoms, mass / mass.sum())
    return bary.merge_duplicates()


def sample(m: DiscreteMeasure, count: int, seed: int) -> DiscreteMeasure:
    """Empirical measure of ``count`` i.i.d. draws from ``m``."""
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(m.size, size=count, p=m.weights / m.weights.sum())
    return DiscreteMeasure(m.points[idx], np.full(count, 1.0 / count), domain=m.domain)
