"""Entropic optimal transport with the product reference measure.

Potentials are kept in the log domain throughout: the solver alternates the
two soft c-transforms of the Schrodinger system until the column potential
stops moving.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainMismatchError, InvalidInputError, NumericalFailureError, SolverError
from .measures import CostFunction, DiscreteMeasure

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100_000
# Newton polishing on the column semi-dual: always for few-atom columns,
# otherwise only when Sinkhorn stalls on a moderately sized column side
NEWTON_ALWAYS_COLS = 16
NEWTON_MAX_COLS = 512
NEWTON_MAX_STEPS = 50
SINKHORN_BUDGET = 200


def lse(A, axis):
    """Stabilized ``log(sum(exp(A), axis))``."""
    m = np.max(A, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(A - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def soft_c_transform(C, psi, log_nu, lam):
    """``x_i -> -lam log sum_j nu_j exp((psi_j - C_ij) / lam)``."""
    return -lam * lse((psi[None, :] - C) / lam + log_nu[None, :], axis=1)


@dataclass(frozen=True)
class PotentialPair:
    """Schrodinger potentials on the atoms of (mu, nu)."""

    phi: np.ndarray
    psi: np.ndarray
    lam: float
    normalization: str = "mean_zero_phi"


@dataclass(frozen=True)
class EOTSolution:
    potentials: PotentialPair
    cost: float
    marginal_error: float
    iterations: int
    converged: bool
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost_matrix: np.ndarray

    @property
    def phi(self):
        return self.potentials.phi

    @property
    def psi(self):
        return self.potentials.psi

    def plan(self) -> np.ndarray:
        """``gamma_ij = mu_i nu_j exp((phi_i + psi_j - c_ij) / lam)``."""
        lam = self.potentials.lam
        with np.errstate(divide="ignore"):
            logp = (
                (self.phi[:, None] + self.psi[None, :] - self.cost_matrix) / lam
                + np.log(self.mu.weights)[:, None]
                + np.log(self.nu.weights)[None, :]
            )
        return np.exp(logp)

    def schrodinger_residual(self) -> float:
        """Sup-norm change of (phi, psi) after one more sweep of the system."""
        lam = self.potentials.lam
        with np.errstate(divide="ignore"):
            la, lb = np.log(self.mu.weights), np.log(self.nu.weights)
        phi_new = soft_c_transform(self.cost_matrix, self.psi, lb, lam)
        psi_new = soft_c_transform(self.cost_matrix.T, self.phi, la, lam)
        return float(max(np.max(np.abs(phi_new - self.phi)), np.max(np.abs(psi_new - self.psi))))


# scalings are folded back into the log-domain potentials past this size
ABSORB_LOG = 30.0


def _sinkhorn_log(C, a, b, log_ra, log_rb, lam, tol, max_iter, g):
    shift_a = lam * (np.log(a) - log_ra)
    shift_b = lam * (np.log(b) - log_rb)
    CT = np.ascontiguousarray(C.T)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = shift_a - lam * lse((g[None, :] - C) / lam + log_rb[None, :], axis=1)
        g_new = shift_b - lam * lse((f[None, :] - CT) / lam + log_ra[None, :], axis=1)
        delta = np.max(np.abs(g_new - g))
        g = g_new
        if not np.isfinite(delta):
            raise NumericalFailureError("non-finite potentials in Sinkhorn iteration")
        if delta <= tol:
            converged = True
            break
    return g, it, converged


def _sinkhorn_core(C, a, b, log_ra, log_rb, lam, tol, max_iter, g0=None):
    """Sinkhorn for ``min <C, g> + lam KL(g | ra x rb)`` with marginals (a, b).

    The plan is ``exp((f_i + g_j - C_ij) / lam) ra_i rb_j``. Sweeps run on
    scalings of a kernel built around the current potentials and are
    absorbed back into them once they grow, which gives the log-domain
    iterates at the cost of two matrix-vector products per sweep. On
    underflow the plain log-domain sweep takes over. Returns the
    potentials, the sweep count and a convergence flag.
    """
    shift_a = lam * (np.log(a) - log_ra)
    g = np.zeros(C.shape[1]) if g0 is None else np.array(g0, dtype=float)
    converged = False
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while it < max_iter and not converged:
            f = shift_a - lam * lse((g[None, :] - C) / lam + log_rb[None, :], axis=1)
            K = np.exp((f[:, None] + g[None, :] - C) / lam + log_ra[:, None] + log_rb[None, :])
            log_v = np.zeros_like(g)
            v = np.ones_like(g)
            while it < max_iter:
                it += 1
                u = a / (K @ v)
                v_new = b / (K.T @ u)
                log_v_new = np.log(v_new)
                if not (np.all(np.isfinite(log_v_new)) and np.all(np.isfinite(u)) and np.all(u > 0)):
                    it -= 1
                    g, extra, converged = _sinkhorn_log(C, a, b, log_ra, log_rb, lam, tol, max_iter - it, g + lam * log_v)
                    it += extra
                    return shift_a - lam * lse((g[None, :] - C) / lam + log_rb[None, :], axis=1), g, it, converged
                delta = lam * np.max(np.abs(log_v_new - log_v))
                v, log_v = v_new, log_v_new
                if delta <= tol:
                    converged = True
                    break
                if np.max(np.abs(log_v)) > ABSORB_LOG or np.max(np.abs(np.log(u))) > ABSORB_LOG:
                    break
            g = g + lam * log_v
    f = shift_a - lam * lse((g[None, :] - C) / lam + log_rb[None, :], axis=1)
    if not np.all(np.isfinite(g)):
        raise NumericalFailureError("non-finite potentials in Sinkhorn iteration")
    return f, g, it, converged


def _newton_polish(C, a, b, log_ra, log_rb, lam, tol, max_iter, g):
    """Damped Newton ascent on the semi-dual in ``g``.

    Sinkhorn contracts slowly when the plan is close to block diagonal;
    the semi-dual is smooth and concave, so Newton converges in a few steps.
    Stops once the Newton step, an estimate of the distance to the
    optimum, is at most ``tol`` in sup-norm.
    """
    shift_a = lam * (np.log(a) - log_ra)
    shift_b = lam * (np.log(b) - log_rb)
    n = C.shape[1]

    def parts(g):
        Z = (g[None, :] - C) / lam + log_rb[None, :]
        L = lse(Z, axis=1)
        f = shift_a - lam * L
        P = np.exp(Z - L[:, None])
        return f, P, float(b @ (g - shift_b) + a @ f)

    f, P, val = parts(g)
    for it in range(1, max_iter + 1):
        grad = b - a @ P
        H = (np.diag(a @ P) - (P * a[:, None]).T @ P) / lam + np.full((n, n), 1.0 / n)
        try:
            d = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(H, grad, rcond=None)[0]
        if np.max(np.abs(d)) <= tol:
            g = g + d
            f = shift_a - lam * lse((g[None, :] - C) / lam + log_rb[None, :], axis=1)
            return f, g, it, True
        t = 1.0
        while True:
            f_new, P_new, val_new = parts(g + t * d)
            if val_new >= val - 1e-14 * max(1.0, abs(val)) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            return f, g, it, False
        g, f, P, val = g + t * d, f_new, P_new, val_new
    return f, g, max_iter, False


def _col_marginal_error(C, f, g, log_ra, log_rb, b, lam):
    logp = (f[:, None] + g[None, :] - C) / lam + log_ra[:, None] + log_rb[None, :]
    return float(np.abs(np.exp(lse(logp, axis=0)) - b).sum())


def solve_eot(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    lam: float,
    cost: CostFunction | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init: PotentialPair | None = None,
    warn: bool = True,
) -> EOTSolution:
    """Solve entropic OT between ``mu`` and ``nu`` with reference ``mu x nu``.

    Parameters
    ----------
    mu, nu : DiscreteMeasure
    lam : float
        Regularization strength, > 0.
    cost : CostFunction, optional
        Defaults to ``0.5 |x - y|^2``.
    tol : float
        Stop once the sup-norm change of ``psi`` over one sweep is <= tol.
    max_iter : int
    init : PotentialPair, optional
        Warm start; only ``psi`` is used, so supports of ``mu`` may move.

    Returns
    -------
    EOTSolution
        ``cost`` is the dual value ``<phi, mu> + <psi, nu>``. If the
        iteration budget runs out the solution is returned with
        ``converged=False``.
    """
    if not lam > 0:
        raise InvalidInputError("lam must be positive")
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if mu.dim != nu.dim:
        raise DomainMismatchError("mu and nu live in different dimensions")
    cost = cost or CostFunction.squared_half()
    C_full = cost.matrix(mu.points, nu.points)
    ia = mu.weights > 0
    ib = nu.weights > 0
    C = C_full[np.ix_(ia, ib)]
    a, b = mu.weights[ia], nu.weights[ib]
    la, lb = np.log(a), np.log(b)
    g0 = None
    if init is not None and init.psi.shape[0] == nu.size:
        g0 = init.psi[ib]
    n_cols = C.shape[1]
    if n_cols <= NEWTON_MAX_COLS and max_iter > SINKHORN_BUDGET:
        f, g, it, converged = _sinkhorn_core(C, a, b, la, lb, lam, tol, SINKHORN_BUDGET, g0)
        # a small sweep change does not certify accuracy when contraction is slow
        if not converged or n_cols <= NEWTON_ALWAYS_COLS:
            steps = min(NEWTON_MAX_STEPS, max_iter - it)
            f_n, g_n, extra, converged = _newton_polish(C, a, b, la, lb, lam, tol, steps, g)
            it += extra
            if np.all(np.isfinite(g_n)):
                f, g = f_n, g_n
        if not converged and it < max_iter:
            f, g, extra, converged = _sinkhorn_core(C, a, b, la, lb, lam, tol, max_iter - it, g)
            it += extra
    else:
        f, g, it, converged = _sinkhorn_core(C, a, b, la, lb, lam, tol, max_iter, g0)

    shift = float(a @ f)
    f, g = f - shift, g + shift
    phi = np.empty(mu.size)
    psi = np.empty(nu.size)
    phi[ia], psi[ib] = f, g
    # zero-weight atoms get the natural soft c-transform extension
    if not ia.all():
        phi[~ia] = soft_c_transform(C_full[np.ix_(~ia, ib)], g, lb, lam)
    if not ib.all():
        psi[~ib] = soft_c_transform(C_full[np.ix_(ia, ~ib)].T, f, la, lam)
    value = float(a @ f + b @ g)
    if not (np.isfinite(value) and np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
        raise NumericalFailureError("EOT solve produced non-finite values")
    err = _col_marginal_error(C, f, g, la, lb, b, lam)
    if not converged and warn:
        warnings.warn(f"EOT did not converge in {max_iter} iterations", RuntimeWarning)
    return EOTSolution(
        potentials=PotentialPair(phi, psi, float(lam)),
        cost=value,
        marginal_error=err,
        iterations=it,
        converged=converged,
        mu=mu,
        nu=nu,
        cost_matrix=C_full,
    )


def eot_cost(mu, nu, lam, cost=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
    return solve_eot(mu, nu, lam, cost, tol, max_iter).cost


def eot_cost_with_reference(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    lam: float,
    alpha: float,
    grid=None,
    cost: CostFunction | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> float:
    """EOT cost with reference ``mu^alpha x nu`` for a grid measure ``mu``.

    ``mu^alpha`` is the measure with density ``(dmu/dx)^alpha``; alpha = 1
    gives back ``mu`` and alpha = 0 the Lebesgue measure of the grid.
    """
    if alpha > 1:
        raise InvalidInputError("alpha must be <= 1")
    grid = grid if grid is not None else mu.grid
    if grid is None or mu.grid is None or mu.grid != grid:
        raise DomainMismatchError("mu must be a measure on the given grid")
    if alpha == 1:
        return solve_eot(mu, nu, lam, cost, tol, max_iter).cost
    cost = cost or CostFunction.squared_half()
    ia = mu.weights > 0
    ib = nu.weights > 0
    C = cost.matrix(mu.points[ia], nu.points[ib])
    a, b = mu.weights[ia], nu.weights[ib]
    log_vol = np.log(grid.cell_volume)
    log_ra = log_vol + alpha * (np.log(a) - log_vol)
    lb = np.log(b)
    f, g, _, converged = _sinkhorn_core(C, a, b, log_ra, lb, lam, tol, max_iter)
    if not converged:
        warnings.warn("EOT with modified reference did not converge", RuntimeWarning)
    value = float(a @ f + b @ g)
    if not np.isfinite(value):
        raise NumericalFailureError("non-finite EOT cost")
    return value


def sinkhorn_divergence(mu, nu, lam, cost=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
    """``T(mu, nu) - T(mu, mu) / 2 - T(nu, nu) / 2``."""
    t_mn = solve_eot(mu, nu, lam, cost, tol, max_iter).cost
    t_mm = solve_eot(mu, mu, lam, cost, tol, max_iter).cost
    t_nn = solve_eot(nu, nu, lam, cost, tol, max_iter).cost
    return t_mn - 0.5 * t_mm - 0.5 * t_nn


class FirstVariation:
    """``V[mu] = sum_k w_k phi_k[mu]`` as a function on the whole space.

    Each ``phi_k`` is the soft c-transform of the converged ``psi_k``, so
    the function can be evaluated (and differentiated) anywhere.
    """

    def __init__(self, mu, marginals, weights, lam, cost, solutions):
        self.mu = mu
        self.marginals = list(marginals)
        self.weights = np.asarray(weights, dtype=float)
        self.lam = float(lam)
        self.cost = cost
        self.solutions = list(solutions)
        self._log_nu = []
        for nu in self.marginals:
            with np.errstate(divide="ignore"):
                self._log_nu.append(np.log(nu.weights))
        self.values = self(mu.points)

    @property
    def psis(self):
        return [s.psi for s in self.solutions]

    @property
    def potentials(self):
        return [s.potentials for s in self.solutions]

    def component(self, k, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        C = self.cost.matrix(X, self.marginals[k].points)
        return soft_c_transform(C, self.solutions[k].psi, self._log_nu[k], self.lam)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        for k, w in enumerate(self.weights):
            if w > 0:
                out += w * self.component(k, X)
        return out

    def gradient(self, X) -> np.ndarray:
        """``grad V(x) = sum_k w_k E_{p_k(.|x)}[grad_x c(x, Y)]`` row-wise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros_like(X)
        for k, w in enumerate(self.weights):
            if w == 0:
                continue
            nu = self.marginals[k]
            C = self.cost.matrix(X, nu.points)
            logits = (self.solutions[k].psi[None, :] - C) / self.lam + self._log_nu[k][None, :]
            p = np.exp(logits - lse(logits, axis=1)[:, None])
            if self.cost.kind == "squared_half":
                out += w * (X - p @ nu.points)
            else:
                out += w * np.einsum("ij,ijd->id", p, self.cost.grad_matrix(X, nu.points))
        return out


def first_variation(
    mu: DiscreteMeasure,
    problem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init=None,
) -> FirstVariation:
    """Solve the K problems ``(mu, nu_k)`` and assemble ``V[mu]``.

    ``init`` optionally holds one PotentialPair per marginal for warm starts.
    """
    solutions = []
    for k, nu in enumerate(problem.marginals):
        try:
            warm = init[k] if init is not None else None
            solutions.append(solve_eot(mu, nu, problem.lam, problem.cost, tol, max_iter, warm))
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise SolverError(k, exc) from exc
    return FirstVariation(mu, problem.marginals, problem.weights, problem.lam, problem.cost, solutions)


def grad_first_variation(mu, problem, x, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> np.ndarray:
    """Gradient of the first variation at one point ``x``."""
    return first_variation(mu, problem, tol, max_iter).gradient(np.atleast_2d(x))[0]


def barycenter_functional(mu, problem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
    """``G_lam(mu) = sum_k w_k T_lam(mu, nu_k)``."""
    return float(
        sum(
            w * solve_eot(mu, nu, problem.lam, problem.cost, tol, max_iter).cost
            for w, nu in zip(problem.weights, problem.marginals)
            if w > 0
        )
    )


def potentials_to_csv(path, potentials: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("atom_index,potential\n")
        for i, v in enumerate(potentials):
            fh.write(f"{i},{float(v)!r}\n")
