import math
import warnings

import numpy as np
import pytest

from douba import eot
from douba.eot import (
    PotentialPair,
    barycenter_functional,
    eot_cost,
    eot_cost_with_reference,
    first_variation,
    potentials_to_csv,
    sinkhorn_divergence,
    soft_c_transform,
    solve_eot,
)
from douba.errors import DomainMismatchError, InvalidInputError
from douba.measures import BoxDomain, CostFunction, DiscreteMeasure, Grid, entropy
from douba.problem import BarycenterProblem

from conftest import random_grid_measure, random_measure

# frozen from 50-digit evaluations of the primal problem
T_SYM_TWO_POINT = 0.21907019637983862854
T_ASYM_TWO_POINT = 0.68788091884140030357
S_TWO_POINT = 0.10965318375568826559

N_INSTANCES = 100


def instances(count=N_INSTANCES, base=0):
    for seed in range(base, base + count):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(2, 12, size=2)
        d = int(rng.integers(1, 3))
        mu = random_measure(rng, n, d, -1, 1)
        nu = random_measure(rng, m, d, -1, 1)
        lam = float(10 ** rng.uniform(-1, 0.5))
        yield seed, mu, nu, lam


class TestOracles:
    def test_symmetric_two_point(self):
        m = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
        sol = solve_eot(m, m, 1.0, tol=1e-13)
        assert sol.converged
        assert sol.cost == pytest.approx(T_SYM_TWO_POINT, abs=1e-10)

    def test_asymmetric_two_point(self):
        mu = DiscreteMeasure([0.0, 2.0], [0.3, 0.7])
        nu = DiscreteMeasure([1.0, 3.0], [0.6, 0.4])
        assert eot_cost(mu, nu, 1.0, tol=1e-13) == pytest.approx(T_ASYM_TWO_POINT, abs=1e-10)

    def test_dual_value_equals_primal(self):
        mu = DiscreteMeasure([0.0, 2.0], [0.3, 0.7])
        nu = DiscreteMeasure([1.0, 3.0], [0.6, 0.4])
        sol = solve_eot(mu, nu, 1.0, tol=1e-13)
        P = sol.plan()
        R = np.outer(mu.weights, nu.weights)
        primal = float(np.sum(P * sol.cost_matrix) + np.sum(P * np.log(P / R)))
        assert primal == pytest.approx(sol.cost, abs=1e-10)

    def test_sinkhorn_divergence(self):
        mu = DiscreteMeasure([0.0, 1.0], [0.3, 0.7])
        nu = DiscreteMeasure([0.5, 2.0], [0.6, 0.4])
        assert sinkhorn_divergence(mu, nu, 1.0, tol=1e-13) == pytest.approx(S_TWO_POINT, abs=1e-10)

    def test_divergence_vanishes_on_diagonal(self):
        mu = random_measure(np.random.default_rng(0), 6)
        assert abs(sinkhorn_divergence(mu, mu, 0.5, tol=1e-12)) < 1e-10

    def test_diracs_have_no_entropy(self):
        # the only coupling of two Diracs is the product, KL = 0
        sol = solve_eot(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([2.0]), 0.3)
        assert sol.cost == pytest.approx(2.0)
        assert sol.phi[0] == 0.0


class TestProperties:
    def test_marginal_feasibility(self):
        for seed, mu, nu, lam in instances():
            sol = solve_eot(mu, nu, lam, tol=1e-11)
            P = sol.plan()
            assert sol.converged, seed
            assert np.abs(P.sum(axis=1) - mu.weights).sum() <= 1e-8, seed
            assert np.abs(P.sum(axis=0) - nu.weights).sum() <= 1e-8, seed
            assert sol.marginal_error <= 1e-8, seed

    def test_normalization(self):
        for seed, mu, nu, lam in instances():
            sol = solve_eot(mu, nu, lam)
            assert abs(mu.weights @ sol.phi) <= 1e-12, seed

    def test_cost_bounds(self):
        # 0 <= min <c, pi> <= T_lam <= <c, mu x nu>
        for seed, mu, nu, lam in instances():
            sol = solve_eot(mu, nu, lam, tol=1e-11)
            indep = float(mu.weights @ sol.cost_matrix @ nu.weights)
            assert -1e-9 <= sol.cost <= indep + 1e-9, seed

    def test_monotone_in_lambda(self):
        for seed, mu, nu, _ in instances():
            costs = [eot_cost(mu, nu, lam, tol=1e-11) for lam in (0.05, 0.2, 1.0, 5.0)]
            assert all(x <= y + 1e-9 for x, y in zip(costs, costs[1:])), seed

    def test_large_lambda_tends_to_independent(self):
        mu = random_measure(np.random.default_rng(1), 5)
        nu = random_measure(np.random.default_rng(2), 4)
        sol = solve_eot(mu, nu, 1e4, tol=1e-12)
        indep = float(mu.weights @ sol.cost_matrix @ nu.weights)
        assert sol.cost == pytest.approx(indep, abs=1e-4)

    def test_symmetry(self):
        for seed, mu, nu, lam in instances():
            assert eot_cost(mu, nu, lam, tol=1e-11) == pytest.approx(eot_cost(nu, mu, lam, tol=1e-11), abs=1e-9), seed

    def test_schrodinger_residual(self):
        for seed, mu, nu, lam in instances():
            sol = solve_eot(mu, nu, lam, tol=1e-11)
            assert sol.schrodinger_residual() <= 1e-8, seed

    def test_oscillation_bounded_by_cost(self):
        for seed, mu, nu, lam in instances():
            sol = solve_eot(mu, nu, lam)
            span = np.ptp(sol.cost_matrix)
            assert np.ptp(sol.phi) <= span + 1e-9, seed
            assert np.ptp(sol.psi) <= span + 1e-9, seed

    def test_translation_invariance(self):
        for seed, mu, nu, lam in instances():
            shift = np.full(mu.dim, 0.37)
            a = eot_cost(mu, nu, lam, tol=1e-11)
            b = eot_cost(DiscreteMeasure(mu.points + shift, mu.weights), DiscreteMeasure(nu.points + shift, nu.weights), lam, tol=1e-11)
            assert a == pytest.approx(b, abs=1e-9), seed


class TestSolver:
    def test_zero_weight_atoms_extended(self):
        mu = DiscreteMeasure([0.0, 0.5, 1.0], [0.5, 0.0, 0.5])
        nu = DiscreteMeasure([0.2, 0.8], [0.4, 0.6])
        sol = solve_eot(mu, nu, 0.3, tol=1e-12)
        lb = np.log(nu.weights)
        expected = soft_c_transform(sol.cost_matrix[1:2], sol.psi, lb, 0.3)
        assert sol.phi[1] == pytest.approx(expected[0], abs=1e-12)
        reduced = solve_eot(DiscreteMeasure([0.0, 1.0], [0.5, 0.5]), nu, 0.3, tol=1e-12)
        assert sol.cost == pytest.approx(reduced.cost, abs=1e-11)

    def test_warm_start_reaches_same_potentials(self):
        rng = np.random.default_rng(11)
        mu, nu = random_measure(rng, 30), random_measure(rng, 20)
        cold = solve_eot(mu, nu, 0.05, tol=1e-11)
        mu2 = DiscreteMeasure(mu.points + 0.01, mu.weights)
        warm = solve_eot(mu2, nu, 0.05, tol=1e-11, init=cold.potentials)
        fresh = solve_eot(mu2, nu, 0.05, tol=1e-11)
        assert np.max(np.abs(warm.psi - fresh.psi)) <= 1e-8

    def test_block_diagonal_plan(self):
        # nearly separated clusters make plain Sinkhorn stall
        mu = DiscreteMeasure([[-1.0, 0.5], [1.0, 0.5], [-1.0, 0.4], [1.1, 0.5]], [0.25, 0.25, 0.25, 0.25])
        nu = DiscreteMeasure([[-1.0, 0.0], [1.0, 0.0]], [0.5, 0.5])
        sol = solve_eot(mu, nu, 0.01, tol=1e-10)
        assert sol.converged
        assert sol.marginal_error <= 1e-8

    def test_log_fallback_small_lambda(self):
        rng = np.random.default_rng(5)
        mu, nu = random_measure(rng, 40, lo=0, hi=10), random_measure(rng, 600, lo=0, hi=10)
        sol = solve_eot(mu, nu, 1e-3, tol=1e-8)
        assert sol.converged and np.isfinite(sol.cost)
        # a psi change of tol moves the marginals by about tol / lam
        assert sol.marginal_error <= 100 * 1e-8 / 1e-3

    def test_scaling_and_log_sweeps_agree(self):
        rng = np.random.default_rng(6)
        C = rng.uniform(size=(7, 5))
        a, b = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(5))
        _, g1, _, ok = eot._sinkhorn_core(C, a, b, np.log(a), np.log(b), 0.2, 1e-13, 100_000)
        g2, _, ok2 = eot._sinkhorn_log(C, a, b, np.log(a), np.log(b), 0.2, 1e-13, 100_000, np.zeros(5))
        assert ok and ok2
        np.testing.assert_allclose(g1 - g1.mean(), g2 - g2.mean(), atol=1e-10)

    def test_nonconvergence_warns(self):
        rng = np.random.default_rng(7)
        mu, nu = random_measure(rng, 20), random_measure(rng, 600)
        with pytest.warns(RuntimeWarning):
            sol = solve_eot(mu, nu, 1e-3, max_iter=3)
        assert not sol.converged and sol.iterations == 3

    @pytest.mark.parametrize("lam,tol", [(0.0, 1e-9), (-1.0, 1e-9), (1.0, 0.0)])
    def test_invalid_parameters(self, lam, tol):
        m = DiscreteMeasure.dirac([0.0])
        with pytest.raises(InvalidInputError):
            solve_eot(m, m, lam, tol=tol)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainMismatchError):
            solve_eot(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([0.0, 1.0]), 1.0)

    def test_potentials_csv(self, tmp_path):
        potentials_to_csv(tmp_path / "p.csv", np.array([0.5, -0.25]))
        assert (tmp_path / "p.csv").read_text() == "atom_index,potential\n0,0.5\n1,-0.25\n"


class TestReference:
    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_entropy_identity(self, alpha):
        # changing the reference to mu^alpha x nu adds lam (1 - alpha) H(mu)
        grid = Grid.regular([0.0], [2.0], 12)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            mu = random_grid_measure(rng, grid)
            nu = random_measure(rng, 5, lo=0, hi=2)
            lam = float(rng.uniform(0.1, 1.0))
            lhs = eot_cost_with_reference(mu, nu, lam, alpha, tol=1e-13)
            rhs = eot_cost(mu, nu, lam, tol=1e-13) + lam * (1 - alpha) * entropy(mu)
            assert lhs == pytest.approx(rhs, abs=1e-7), seed

    def test_requires_grid_measure(self):
        with pytest.raises(DomainMismatchError):
            eot_cost_with_reference(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([0.0]), 1.0, 0.5)

    def test_alpha_above_one(self):
        grid = Grid.regular([0.0], [1.0], 4)
        with pytest.raises(InvalidInputError):
            eot_cost_with_reference(grid.uniform(), grid.uniform(), 1.0, 1.5)


def _problem(rng, K=2, d=1):
    dom = BoxDomain([-1.0] * d, [1.0] * d)
    marg = [random_measure(rng, int(rng.integers(2, 6)), d, -1, 1) for _ in range(K)]
    return BarycenterProblem(marg, rng.dirichlet(np.ones(K)), float(rng.uniform(0.2, 1.0)), 0.1, dom)


class TestFirstVariation:
    def test_directional_derivative(self):
        # d/de G(mu + e (rho - mu)) at 0 equals <V[mu], rho - mu>
        for seed in range(100):
            rng = np.random.default_rng(seed)
            problem = _problem(rng)
            pts = rng.uniform(-1, 1, size=(6, 1))
            mu = DiscreteMeasure(pts, rng.dirichlet(np.ones(6)))
            rho = rng.dirichlet(np.ones(6))
            V = first_variation(mu, problem, tol=1e-13).values
            h = 1e-5
            def G(e):
                return barycenter_functional(DiscreteMeasure(pts, (1 - e) * mu.weights + e * rho), problem, tol=1e-13)
            fd = (G(h) - G(-h)) / (2 * h)
            exact = float(V @ (rho - mu.weights))
            assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact)), seed

    def test_gradient_matches_finite_differences(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            d = 1 + seed % 2
            problem = _problem(rng, K=3, d=d)
            mu = random_measure(rng, 5, d, -1, 1)
            fv = first_variation(mu, problem, tol=1e-12)
            x = rng.uniform(-1, 1, size=d)
            h = 1e-6
            fd = np.array([(fv(x + h * e)[0] - fv(x - h * e)[0]) / (2 * h) for e in np.eye(d)])
            g = fv.gradient(x)[0]
            assert np.linalg.norm(fd - g) <= 1e-6 * max(1.0, np.linalg.norm(g)), seed

    def test_custom_cost_gradient(self):
        rng = np.random.default_rng(3)
        cost = CostFunction(
            lambda X, Y: np.sum((X[:, None, :] - Y[None, :, :]) ** 4, axis=2) / 4,
            lambda X, Y: (X[:, None, :] - Y[None, :, :]) ** 3,
        )
        dom = BoxDomain([-1.0], [1.0])
        problem = BarycenterProblem([random_measure(rng, 4, 1, -1, 1)], [1.0], 0.3, 0.1, dom, cost)
        fv = first_variation(random_measure(rng, 5, 1, -1, 1), problem, tol=1e-12)
        x, h = np.array([0.2]), 1e-6
        fd = (fv(x + h)[0] - fv(x - h)[0]) / (2 * h)
        assert fv.gradient(x)[0, 0] == pytest.approx(fd, abs=1e-6)

    def test_values_on_support_match_potentials(self):
        rng = np.random.default_rng(4)
        problem = _problem(rng)
        mu = random_measure(rng, 7, 1, -1, 1)
        fv = first_variation(mu, problem, tol=1e-12)
        expected = sum(w * s.phi for w, s in zip(problem.weights, fv.solutions))
        np.testing.assert_allclose(fv.values, expected, atol=1e-9)

    def test_functional_is_weighted_sum(self):
        rng = np.random.default_rng(8)
        problem = _problem(rng, K=3)
        mu = random_measure(rng, 4, 1, -1, 1)
        direct = sum(w * eot_cost(mu, nu, problem.lam) for w, nu in zip(problem.weights, problem.marginals))
        assert barycenter_functional(mu, problem) == pytest.approx(direct, abs=1e-12)
