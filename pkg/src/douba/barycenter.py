"""Grid solvers for the doubly regularized barycenter.

The Lebesgue integral of the dual objective is a midpoint sum over a
:class:`~douba.measures.Grid`; marginals can have arbitrary atoms.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .eot import DEFAULT_MAX_ITER, first_variation, lse, solve_eot
from .errors import (
    CertificateUndefinedError,
    ConsistencyError,
    DomainMismatchError,
    InvalidInputError,
    NumericalFailureError,
    StepSizeError,
)
from .measures import DiscreteMeasure, Grid, entropy, relative_entropy
from .problem import BarycenterProblem

__all__ = [
    "BarycenterProblem",
    "BarycenterResult",
    "DualState",
    "GridDual",
    "dual_gradient",
    "dual_objective",
    "primal_objective",
    "recover_barycenter",
    "solve_alternating_tau_eq_lambda",
    "solve_dual_ascent",
    "suboptimality_certificate",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DualState:
    """K dual potentials (one per marginal atom) and the quadrature grid.

    Each ``psis[k]`` is stored with zero mean under ``nu_k``; the dual
    objective does not see constant shifts.
    """

    psis: tuple
    grid: Grid
    objective: float = float("nan")

    @classmethod
    def zeros(cls, problem: BarycenterProblem, grid: Grid) -> "DualState":
        return cls(tuple(np.zeros(nu.size) for nu in problem.marginals), grid)

    def normalized(self, problem: BarycenterProblem) -> "DualState":
        psis = tuple(np.asarray(p, float) - nu.weights @ p for p, nu in zip(self.psis, problem.marginals))
        return DualState(psis, self.grid, self.objective)


class GridDual:
    """Dual objective machinery for one (problem, grid) pair.

    Caches the K cell-to-atom cost matrices so repeated evaluations during
    an ascent only pay for the log-sum-exps.
    """

    def __init__(self, problem: BarycenterProblem, grid: Grid):
        if not problem.tau > 0:
            raise InvalidInputError("grid solvers need tau > 0")
        if grid.dim != problem.domain.dim:
            raise DomainMismatchError("grid and problem dimensions differ")
        self.problem = problem
        self.grid = grid
        self.lam = problem.lam
        self.tau = problem.tau
        self.log_vol = np.log(grid.cell_volume)
        self.costs = [problem.cost.matrix(grid.cell_centers, nu.points) for nu in problem.marginals]
        with np.errstate(divide="ignore"):
            self.log_nus = [np.log(nu.weights) for nu in problem.marginals]
        self.nus = [nu.weights for nu in problem.marginals]

    def transforms(self, psis):
        """Soft c-transforms ``phi_k`` on the cells and the log-kernels behind them."""
        phis, logits = [], []
        for psi, C, lnu in zip(psis, self.costs, self.log_nus):
            A = (psi[None, :] - C) / self.lam + lnu[None, :]
            phis.append(-self.lam * lse(A, axis=1))
            logits.append(A)
        return phis, logits

    def potential(self, psis) -> np.ndarray:
        phis, _ = self.transforms(psis)
        return sum(w * p for w, p in zip(self.problem.weights, phis))

    def log_gibbs(self, V) -> tuple:
        """Log weights of the grid Gibbs measure ``vol exp(-V / tau)`` and ``chi``."""
        z = self.log_vol - V / self.tau
        log_norm = lse(z, axis=0)
        return z - log_norm, -self.tau * log_norm

    def objective(self, psis) -> float:
        V = self.potential(psis)
        _, chi = self.log_gibbs(V)
        value = sum(w * (nu @ p) for w, nu, p in zip(self.problem.weights, self.nus, psis)) + chi
        if not np.isfinite(value):
            raise NumericalFailureError("non-finite dual objective")
        return float(value)

    def evaluate(self, psis):
        """Return ``(E, gradients, barycenter weights)`` in one pass."""
        phis, logits = self.transforms(psis)
        V = sum(w * p for w, p in zip(self.problem.weights, phis))
        log_mu, chi = self.log_gibbs(V)
        mu = np.exp(log_mu)
        value = sum(w * (nu @ p) for w, nu, p in zip(self.problem.weights, self.nus, psis)) + chi
        grads = []
        for w, nu, phi, A in zip(self.problem.weights, self.nus, phis, logits):
            # conditional law of y given x is exp(A + phi / lam)
            cond = np.exp(A + phi[:, None] / self.lam)
            grads.append(w * (nu - mu @ cond))
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalFailureError("non-finite dual objective or gradient")
        return float(value), grads, mu


def dual_objective(state: DualState, problem: BarycenterProblem) -> float:
    """``E(psi) = sum_k w_k <nu_k, psi_k> - tau log sum_cells vol exp(-V_psi / tau)``."""
    return GridDual(problem, state.grid).objective(state.psis)


def dual_gradient(state: DualState, problem: BarycenterProblem) -> list:
    """Per-atom gradient ``w_k (nu_k - second marginal of the implied plan)``."""
    return GridDual(problem, state.grid).evaluate(state.psis)[1]


def recover_barycenter(state: DualState, problem: BarycenterProblem) -> DiscreteMeasure:
    """Grid Gibbs measure ``exp((chi - V_psi) / tau)`` attached to a dual state."""
    ops = GridDual(problem, state.grid)
    log_mu, _ = ops.log_gibbs(ops.potential(state.psis))
    w = np.exp(log_mu)
    return state.grid.measure(w / w.sum())


@dataclass
class BarycenterResult:
    """Output of the grid solvers.

    Unpacks as ``(state, barycenter)``.
    """

    state: DualState
    barycenter: DiscreteMeasure
    converged: bool
    iterations: int
    grad_norm: float
    certificate_upper: float
    objective: float
    solver: str
    trace: list = field(default_factory=list)

    def __iter__(self):
        yield self.state
        yield self.barycenter


def _sup(grads) -> float:
    return float(max(np.max(np.abs(g)) for g in grads))


def solve_dual_ascent(
    problem: BarycenterProblem,
    grid: Grid,
    step: float | None = None,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    init: DualState | None = None,
    precondition: bool = True,
    certify: bool = True,
    eot_tol: float | None = None,
    trace: bool = False,
) -> BarycenterResult:
    """Gradient ascent on the smooth dual, then Gibbs recovery of the barycenter.

    The ascent direction divides each atom's gradient by ``w_k nu_kj``
    (ascent in the weighted L2 geometry of the marginals) unless
    ``precondition`` is False. The step defaults to ``min(lam, tau)`` and is
    halved whenever a step fails a sufficient-increase test, then allowed
    to grow back towards its nominal value.

    Convergence requires the gradient sup-norm to fall below ``tol`` and,
    when ``certify`` is set, the entropy-sandwich upper bound of the
    recovered measure to fall below ``10 tau tol``.
    """
    ops = GridDual(problem, grid)
    lam, tau = problem.lam, problem.tau
    step = float(min(lam, tau) if step is None else step)
    nominal = step
    if not step > 0:
        raise InvalidInputError("step must be positive")
    eot_tol = eot_tol if eot_tol is not None else min(1e-12, tol)
    psis = [p.copy() for p in (init or DualState.zeros(problem, grid)).psis]
    scale = [w * nu if precondition else np.ones_like(nu) for w, nu in zip(problem.weights, ops.nus)]
    # atoms with no mass carry no information: freeze them
    active = [s > 0 for s in scale]

    def direction(grads):
        out = []
        for g, s, a in zip(grads, scale, active):
            d = np.zeros_like(g)
            d[a] = g[a] / s[a]
            out.append(d)
        return out

    value, grads, mu = ops.evaluate(psis)
    records = []
    cert = float("nan")
    converged = False
    next_cert_check = 0
    halvings = 0
    min_step = step * 2.0**-60
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = _sup(grads)
        if trace:
            records.append((it - 1, value, gnorm, cert))
        if gnorm <= tol and it >= next_cert_check:
            if not certify:
                converged = True
                break
            cert = _certificate_from_weights(mu, problem, grid, eot_tol)
            if trace:
                records[-1] = (it - 1, value, gnorm, cert)
            if cert <= 10 * tau * tol:
                converged = True
                break
            next_cert_check = it + max(10, it // 10)

        d = direction(grads)
        cand = [p + step * dk for p, dk in zip(psis, d)]
        c_value, c_grads, c_mu = ops.evaluate(cand)
        # sufficient-increase test for the quadratic model of the step
        expected = sum(float(g @ dk) for g, dk in zip(grads, d))
        if c_value < value + 0.5 * step * expected - 1e-13 * max(1.0, abs(value)):
            step *= 0.5
            halvings += 1
            if step < min_step:
                raise StepSizeError(
                    "dual objective keeps decreasing; retry with a smaller step "
                    f"(current step {step:.3g})"
                )
            continue
        psis, value, grads, mu = cand, c_value, c_grads, c_mu
        # far from the optimum the step may have been cut; let it recover
        step = min(nominal, 2 * step)
    else:
        gnorm = _sup(grads)

    if halvings:
        logger.info("dual ascent halved the step %d times (final step %.3g)", halvings, step)
    state = DualState(tuple(psis), grid, value).normalized(problem)
    bary = grid.measure(mu / mu.sum())
    if not converged:
        warnings.warn(
            f"dual ascent stopped after {max_iter} iterations (grad sup-norm {gnorm:.3g})",
            RuntimeWarning,
        )
    return BarycenterResult(
        state, bary, converged, it, gnorm, cert, value, "dual_ascent", records
    )


def _certificate_from_weights(mu_weights, problem, grid, eot_tol) -> float:
    mu = grid.measure(mu_weights / mu_weights.sum())
    return suboptimality_certificate(mu, problem, tol=eot_tol)[1]


def solve_alternating_tau_eq_lambda(
    problem: BarycenterProblem,
    grid: Grid,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    certify: bool = True,
    trace: bool = False,
) -> BarycenterResult:
    """Sinkhorn-like block ascent for ``tau == lam`` (Lebesgue reference on the grid).

    Alternates closed-form updates of the cell potentials ``phi_k`` (under
    the constraint ``sum_k w_k phi_k = 0``) and of the atom potentials
    ``psi_k`` until ``psi`` moves by less than ``tol`` in sup norm.
    """
    if abs(problem.tau - problem.lam) >= 1e-12:
        raise InvalidInputError("the alternating scheme needs tau == lam")
    ops = GridDual(problem, grid)
    lam = problem.lam
    w = problem.weights
    log_vol = ops.log_vol
    psis = [np.zeros(nu.size) for nu in problem.marginals]
    costT = [np.ascontiguousarray(C.T) for C in ops.costs]
    records = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        phis, _ = ops.transforms(psis)
        avg = sum(wk * p for wk, p in zip(w, phis))
        phis = [p - avg for p in phis]
        delta = 0.0
        new = []
        for phi, CT, psi in zip(phis, costT, psis):
            p = -lam * lse((phi[None, :] - CT) / lam + log_vol, axis=1)
            delta = max(delta, float(np.max(np.abs(p - psi))))
            new.append(p)
        psis = new
        if not np.isfinite(delta):
            raise NumericalFailureError("non-finite potentials in alternating scheme")
        if trace:
            records.append((it, float("nan"), delta, float("nan")))
        if delta <= tol:
            converged = True
            break

    # one measure per marginal; they coincide at the fixed point
    measures = []
    for phi, C, lnu, psi in zip(phis, ops.costs, ops.log_nus, psis):
        logm = log_vol + phi / lam + lse((psi[None, :] - C) / lam + lnu[None, :], axis=1)
        measures.append(np.exp(logm))
    disagreement = max(float(np.abs(m - measures[0]).sum()) for m in measures)
    if converged and disagreement > 100 * tol:
        raise ConsistencyError(
            f"per-marginal barycenters disagree by {disagreement:.3g} in total variation"
        )
    mu = sum(wk * m for wk, m in zip(w, measures))
    mu = mu / mu.sum()
    value, grads, _ = ops.evaluate(psis)
    cert = float("nan")
    if certify:
        cert = _certificate_from_weights(mu, problem, grid, min(1e-12, tol))
    if not converged:
        warnings.warn(f"alternating scheme stopped after {max_iter} iterations", RuntimeWarning)
    state = DualState(tuple(psis), grid, value).normalized(problem)
    return BarycenterResult(
        state, grid.measure(mu), converged, it, _sup(grads), cert, value, "alternating", records
    )


def primal_objective(mu: DiscreteMeasure, problem: BarycenterProblem, tol=1e-9, max_iter=DEFAULT_MAX_ITER) -> float:
    """``F(mu) = sum_k w_k T_lam(mu, nu_k) + tau H(mu)`` for a grid measure."""
    if mu.grid is None:
        raise DomainMismatchError("primal objective needs a grid measure")
    g = sum(
        wk * solve_eot(mu, nu, problem.lam, problem.cost, tol, max_iter).cost
        for wk, nu in zip(problem.weights, problem.marginals)
        if wk > 0
    )
    return float(g + problem.tau * entropy(mu))


def tangent_gibbs(mu: DiscreteMeasure, problem: BarycenterProblem, tol=1e-12, max_iter=DEFAULT_MAX_ITER) -> DiscreteMeasure:
    """Grid measure proportional to ``exp(-V[mu] / tau)``."""
    if mu.grid is None:
        raise DomainMismatchError("tangent Gibbs measure needs a grid measure")
    V = first_variation(mu, problem, tol, max_iter).values
    z = -V / problem.tau
    w = np.exp(z - lse(z, axis=0))
    return mu.grid.measure(w / w.sum())


def suboptimality_certificate(mu: DiscreteMeasure, problem: BarycenterProblem, tol=1e-12, max_iter=DEFAULT_MAX_ITER):
    """Entropy-sandwich bounds ``(lower, upper)`` on ``F(mu) - min F``.

    ``upper = tau H(mu | nu)`` with ``nu`` the tangent Gibbs measure of
    ``mu``. The matching lower bound involves the unknown minimizer, so the
    lower slot is always 0.
    """
    if mu.grid is None:
        raise DomainMismatchError("certificate needs a grid measure")
    if not problem.tau > 0:
        raise InvalidInputError("certificate needs tau > 0")
    if np.any(mu.weights <= 0):
        raise CertificateUndefinedError("mu has zero-mass cells")
    gibbs = tangent_gibbs(mu, problem, tol, max_iter)
    return 0.0, problem.tau * relative_entropy(mu, gibbs)
