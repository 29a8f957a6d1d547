"""Noisy particle gradient descent (NPGD), a grid-free barycenter solver.

Each step solves the K EOT problems between the particle cloud and the
marginals, moves every particle along ``-grad V[cloud]`` and adds Gaussian
noise of variance ``2 eta tau`` before projecting back onto the box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .eot import FirstVariation, first_variation, lse, solve_eot
from .errors import InvalidInputError, SolverError
from .measures import BoxDomain, DiscreteMeasure, Grid
from .problem import BarycenterProblem


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    positions: np.ndarray
    domain: BoxDomain
    step_count: int = 0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.shape[1] != self.domain.dim:
            raise InvalidInputError("particle dimension differs from the domain")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions, np.full(self.m, 1.0 / self.m), domain=self.domain)


@dataclass(frozen=True)
class NPGDConfig:
    """Run parameters; ``lam`` and ``tau`` override those of the problem."""

    m: int
    eta: float
    lam: float
    tau: float
    iterations: int
    seed: int
    init: DiscreteMeasure
    eot_tol: float = 1e-9
    eot_max_iter: int = 10_000
    warm_check_every: int = 50

    def __post_init__(self):
        if self.m < 1:
            raise InvalidInputError("m must be at least 1")
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise InvalidInputError("eta must be finite and nonnegative")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise InvalidInputError("lam must be positive")
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise InvalidInputError("tau must be finite and nonnegative")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be nonnegative")
        if not self.eot_tol > 0:
            raise InvalidInputError("eot_tol must be positive")


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    g_lambda: float
    drift_sup: float
    mean_disp: float


@dataclass
class NPGDResult:
    cloud: ParticleCloud
    trace: list
    snapshots: list = field(default_factory=list)
    warm_start_gap: float = 0.0

    def __iter__(self):
        yield self.cloud
        yield self.trace


def _solve_all(measure, problem, config, warm):
    sols = []
    for k, nu in enumerate(problem.marginals):
        try:
            init = warm[k] if warm is not None else None
            sols.append(
                solve_eot(measure, nu, problem.lam, problem.cost, config.eot_tol, config.eot_max_iter, init, warn=False)
            )
        except Exception as exc:  # noqa: BLE001
            raise SolverError(k, exc) from exc
    return sols


def _advance(cloud, problem, config, rng, warm=None):
    measure = cloud.measure()
    sols = _solve_all(measure, problem, config, warm)
    fv = FirstVariation(measure, problem.marginals, problem.weights, problem.lam, problem.cost, sols)
    drift = fv.gradient(cloud.positions)
    # the noise block is drawn even when tau == 0 so runs share random numbers
    noise = rng.standard_normal(cloud.positions.shape)
    moved = cloud.positions - config.eta * drift + np.sqrt(2 * config.eta * config.tau) * noise
    new = ParticleCloud(cloud.domain.project(moved), cloud.domain, cloud.step_count + 1)
    g_lambda = float(sum(w * s.cost for w, s in zip(problem.weights, sols)))
    return new, sols, drift, g_lambda


def npgd_step(cloud: ParticleCloud, problem: BarycenterProblem, config: NPGDConfig, rng, warm=None) -> ParticleCloud:
    """One NPGD update ``X <- P(X - eta grad V[cloud](X) + sqrt(2 eta tau) Z)``."""
    problem = problem.with_params(lam=config.lam, tau=config.tau)
    return _advance(cloud, problem, config, rng, warm)[0]


def initial_cloud(problem: BarycenterProblem, config: NPGDConfig, rng) -> ParticleCloud:
    init = config.init
    idx = rng.choice(init.size, size=config.m, p=init.weights / init.weights.sum())
    return ParticleCloud(problem.domain.project(init.points[idx]), problem.domain, 0)


def npgd_run(
    problem: BarycenterProblem,
    config: NPGDConfig,
    snapshot_every: int = 0,
    callback=None,
) -> NPGDResult:
    """Sample ``m`` particles from ``config.init`` and run ``config.iterations`` steps.

    EOT potentials are warm-started from the previous step. Every
    ``config.warm_check_every`` steps the warm solve is compared with a
    cold one; the largest potential gap seen is returned with the result.
    """
    problem = problem.with_params(lam=config.lam, tau=config.tau)
    rng = np.random.default_rng(config.seed)
    cloud = initial_cloud(problem, config, rng)
    trace, snapshots = [], []
    if snapshot_every:
        snapshots.append(cloud)
    warm = None
    gap = 0.0
    for it in range(config.iterations):
        check = config.warm_check_every and warm is not None and it % config.warm_check_every == 0
        new, sols, drift, g_lambda = _advance(cloud, problem, config, rng, warm)
        if check:
            cold = _solve_all(cloud.measure(), problem, config, None)
            gap = max(gap, *(float(np.max(np.abs(c.psi - s.psi))) for c, s in zip(cold, sols)))
        disp = float(np.mean(np.linalg.norm(new.positions - cloud.positions, axis=1)))
        drift_sup = float(np.max(np.abs(drift))) if drift.size else 0.0
        trace.append(StepRecord(it, g_lambda, drift_sup, disp))
        warm = [s.potentials for s in sols]
        cloud = new
        if snapshot_every and cloud.step_count % snapshot_every == 0:
            snapshots.append(cloud)
        if callback is not None:
            callback(it, cloud)
    return NPGDResult(cloud, trace, snapshots, gap)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def smoothed_cloud(cloud: ParticleCloud, grid: Grid, bandwidth: float, floor: float = 1e-12) -> DiscreteMeasure:
    """Gaussian KDE of the cloud on ``grid``, mixed with ``floor`` of the uniform law.

    The floor keeps every cell positive so entropy certificates are defined.
    """
    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    X = cloud.positions
    log_k = np.empty(grid.n_cells)
    chunk = 4096
    for s in range(0, grid.n_cells, chunk):
        Z = grid.cell_centers[s : s + chunk]
        d2 = np.sum((Z[:, None, :] - X[None, :, :]) ** 2, axis=2)
        log_k[s : s + chunk] = lse(-0.5 * d2 / bandwidth**2, axis=1)
    w = np.exp(log_k - lse(log_k, axis=0))
    w = (1 - floor) * w + floor / grid.n_cells
    return grid.measure(w / w.sum())


def cloud_certificate(cloud: ParticleCloud, problem: BarycenterProblem, grid: Grid, bandwidth: float, tol: float = 1e-10) -> float:
    """Entropy-sandwich upper bound of the smoothed cloud on a diagnostic grid."""
    from .barycenter import suboptimality_certificate

    return suboptimality_certificate(smoothed_cloud(cloud, grid, bandwidth), problem, tol=tol)[1]


def energy_distance(x: DiscreteMeasure, y: DiscreteMeasure) -> float:
    """Weighted energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (square-rooted)."""

    def cross(a, b):
        d = np.linalg.norm(a.points[:, None, :] - b.points[None, :, :], axis=2)
        return float(a.weights @ d @ b.weights)

    val = 2 * cross(x, y) - cross(x, x) - cross(y, y)
    return float(np.sqrt(max(val, 0.0)))


def cloud_kde_compare(cloud: ParticleCloud, reference: DiscreteMeasure, bandwidth: float) -> float:
    """Distance between the Gaussian-smoothed cloud and a grid reference measure.

    In 1D this is the exact W2 between the smoothed cloud (evaluated on the
    reference grid) and the reference; in higher dimension the energy
    distance on the same grid.
    """
    from .measures import wasserstein2_1d

    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    grid = reference.grid
    if grid is None:
        raise InvalidInputError("reference must be a grid measure")
    smooth = smoothed_cloud(cloud, grid, bandwidth, floor=0.0)
    if grid.dim == 1:
        return wasserstein2_1d(smooth, reference)
    return energy_distance(smooth, reference)


def cloud_tv_to_grid(cloud: ParticleCloud, grid: Grid, reference: DiscreteMeasure) -> float:
    counts = np.bincount(grid.cell_index(cloud.positions), minlength=grid.n_cells) / cloud.m
    return float(np.abs(counts - reference.weights).sum())


def with_seed(config: NPGDConfig, seed: int) -> NPGDConfig:
    return replace(config, seed=seed)
