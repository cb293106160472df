import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from shel.data import stack_design
from shel.solver import (
    SolverConfig,
    SolverError,
    fit_binomial,
    fit_gaussian,
    kkt_max_violation,
    lambda_max,
    lambda_path,
    path_coefficients,
    soft_threshold,
)


def lbfgs_gaussian_oracle(W, y, pen):
    """Positive-split QP solved by a quasi-Newton method; independent of CD."""
    n, k = W.shape
    yc = y - y.mean()

    def fg(x):
        u, v = x[:k], x[k:]
        th = u - v
        r = yc - W @ th
        g = -W.T @ r / n
        return 0.5 * np.mean(r ** 2) + pen @ (u + v), np.concatenate([g + pen, -g + pen])

    res = minimize(fg, np.zeros(2 * k), jac=True, method="L-BFGS-B",
                   bounds=[(0, None)] * (2 * k),
                   options=dict(maxiter=20000, ftol=1e-18, gtol=1e-12))
    return res.x[:k] - res.x[k:]


def lbfgs_binomial_oracle(W, y, pen):
    n, k = W.shape

    def fg(x):
        u, v, c = x[:k], x[k:2 * k], x[2 * k]
        th = u - v
        eta = W @ th + c
        mu = expit(eta)
        g = W.T @ (mu - y) / n
        nll = np.mean(np.logaddexp(0, eta) - y * eta)
        return nll + pen @ (u + v), np.concatenate([g + pen, -g + pen, [np.mean(mu - y)]])

    res = minimize(fg, np.zeros(2 * k + 1), jac=True, method="L-BFGS-B",
                   bounds=[(0, None)] * (2 * k) + [(None, None)],
                   options=dict(maxiter=50000, ftol=1e-18, gtol=1e-14))
    return res.x[:k] - res.x[k:2 * k], res.x[2 * k]


class TestSoftThreshold:
    @pytest.mark.parametrize("z,t,want", [(3.0, 1.0, 2.0), (-0.5, 1.0, 0.0),
                                          (-2.5, 0.5, -2.0), (1.0, 1.0, 0.0)])
    def test_values(self, z, t, want):
        assert soft_threshold(z, t) == want

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(1.0, -0.1)

    @given(st.floats(-50, 50), st.floats(0, 50))
    def test_matches_piecewise_definition(self, z, t):
        got = soft_threshold(z, t)
        want = np.sign(z) * max(abs(z) - t, 0.0)
        assert got == pytest.approx(want, abs=1e-15)
        assert abs(got) <= max(abs(z) - t, 0.0) + 1e-15


def random_problem(seed, n_max=30, p_max=5, p0_max=3, family="gaussian"):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, n_max + 1))
    p = int(rng.integers(1, p_max + 1))
    p0 = int(rng.integers(0, p0_max + 1))
    X = rng.normal(size=(n, p))
    B = rng.normal(size=(n, p0))
    design = stack_design(X, B, float(rng.uniform(0.3, 1.5)))
    if family == "gaussian":
        y = design.W @ rng.normal(size=design.n_cols) + rng.normal(size=n)
    else:
        eta = design.W @ rng.normal(size=design.n_cols)
        y = (rng.uniform(size=n) < expit(eta)).astype(float)
        if y.min() == y.max():
            y[0] = 1 - y[0]
    lam = float(rng.uniform(0.02, 0.5))
    return design, y, lam


class TestGaussianSolver:
    def test_single_column_closed_form(self):
        # orthonormal-design OLS coefficient 2.0 soft-thresholded by lam/w
        W_raw = np.array([1.0, 1.0, -1.0, -1.0])
        y = np.array([2.0, 2.0, -2.0, -2.0])
        design = stack_design(W_raw[:, None], np.zeros((4, 0)), 1.0)
        fit = fit_gaussian(design, y, 0.5)
        assert fit.theta_scaled[0] == pytest.approx(1.5, abs=1e-12)

    def test_lambda_max_gives_zero(self):
        design, y, _ = random_problem(0)
        lam = lambda_max(design, y)
        fit = fit_gaussian(design, y, lam * (1 + 1e-10))
        assert np.all(fit.theta_scaled == 0.0)
        assert fit.active_set.size == 0

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_qp_oracle(self, seed):
        design, y, lam = random_problem(seed)
        fit = fit_gaussian(design, y, lam)
        oracle = lbfgs_gaussian_oracle(design.W, y, lam * design.weights)
        np.testing.assert_allclose(fit.theta_scaled, oracle, atol=1e-6)

    def test_objective_monotone_every_sweep(self):
        design, y, lam = random_problem(3)
        fit = fit_gaussian(design, y, lam)
        diffs = np.diff(fit.objective_trace)
        assert (diffs <= 1e-12 * (1 + np.abs(fit.objective_trace[:-1]))).all()

    def test_kkt_at_solution(self):
        for seed in range(8):
            design, y, lam = random_problem(seed + 100)
            cfg = SolverConfig()
            fit = fit_gaussian(design, y, lam, cfg)
            assert kkt_max_violation(design, y, fit) <= cfg.tol * 10

    def test_row_permutation_invariance(self):
        design, y, lam = random_problem(7)
        rng = np.random.default_rng(1)
        perm = rng.permutation(design.n_obs)
        from dataclasses import replace
        design_p = replace(design, W=design.W[perm])
        f1 = fit_gaussian(design, y, lam)
        f2 = fit_gaussian(design_p, y[perm], lam)
        np.testing.assert_allclose(f1.theta_scaled, f2.theta_scaled, atol=1e-8)

    def test_nonconvergence_flagged_not_fatal(self):
        design, y, lam = random_problem(9)
        fit = fit_gaussian(design, y, 0.001, SolverConfig(max_iters=2))
        assert not fit.converged

    def test_negative_lambda_rejected(self):
        design, y, _ = random_problem(4)
        with pytest.raises(ValueError):
            fit_gaussian(design, y, -0.1)


class TestBinomialSolver:
    def test_large_lambda_intercept_only(self):
        design, y, _ = random_problem(21, family="binomial")
        lam = lambda_max(design, y, "binomial")
        fit = fit_binomial(design, y, lam * (1 + 1e-9))
        assert np.all(fit.theta_scaled == 0.0)
        assert fit.intercept_scaled == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-6)

    def test_label_flip_antisymmetry(self):
        design, y, lam = random_problem(22, family="binomial")
        f1 = fit_binomial(design, y, lam)
        f2 = fit_binomial(design, 1 - y, lam)
        np.testing.assert_allclose(f1.theta_scaled, -f2.theta_scaled, atol=1e-7)
        assert f1.intercept_scaled == pytest.approx(-f2.intercept_scaled, abs=1e-6)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_newton_oracle(self, seed):
        design, y, lam = random_problem(seed + 50, family="binomial")
        fit = fit_binomial(design, y, lam)
        theta_o, icpt_o = lbfgs_binomial_oracle(design.W, y, lam * design.weights)
        np.testing.assert_allclose(fit.theta_scaled, theta_o, atol=1e-5)
        assert fit.intercept_scaled == pytest.approx(icpt_o, abs=1e-5)

    def test_gradient_matches_finite_differences(self):
        design, y, lam = random_problem(33, family="binomial")
        fit = fit_binomial(design, y, lam)

        def nll(theta):
            eta = design.W @ theta + fit.intercept_scaled
            return np.mean(np.logaddexp(0.0, eta) - y * eta)

        theta = fit.theta_scaled
        eps = 1e-6
        for k in range(design.n_cols):
            e = np.zeros(design.n_cols)
            e[k] = eps
            fd = (nll(theta + e) - nll(theta - e)) / (2 * eps)
            analytic = design.W[:, k] @ (expit(design.W @ theta + fit.intercept_scaled) - y) / design.n_obs
            assert fd == pytest.approx(analytic, rel=1e-6, abs=1e-8)

    def test_single_class_rejected(self):
        rng = np.random.default_rng(0)
        design = stack_design(rng.normal(size=(20, 2)), np.zeros((20, 0)), 1.0)
        with pytest.raises(SolverError, match="both response classes"):
            fit_binomial(design, np.ones(20), 0.1)

    def test_separation_detected(self):
        x = np.concatenate([np.linspace(-3, -1, 10), np.linspace(1, 3, 10)])
        y = (x > 0).astype(float)
        design = stack_design(x[:, None], np.zeros((20, 0)), 1.0)
        with pytest.raises(SolverError, match="separation"):
            fit_binomial(design, y, 0.0)

    def test_deviance_monotone(self):
        design, y, lam = random_problem(44, family="binomial")
        fit = fit_binomial(design, y, lam)
        diffs = np.diff(fit.objective_trace)
        assert (diffs <= 1e-10).all()


class TestLambdaPath:
    def test_two_point_grid(self):
        design, y, _ = random_problem(5)
        grid = lambda_path(design, y, n_lambda=2, ratio_min=0.1)
        lmax = lambda_max(design, y)
        np.testing.assert_allclose(grid, [lmax, 0.1 * lmax])

    def test_needs_two_points(self):
        design, y, _ = random_problem(5)
        with pytest.raises(ValueError):
            lambda_path(design, y, n_lambda=1)

    def test_first_fit_is_zero(self):
        design, y, _ = random_problem(6)
        grid = lambda_path(design, y, n_lambda=10)
        thetas, _, _ = path_coefficients(design, y, grid, "gaussian")
        assert np.all(thetas[0] == 0.0)

    def test_path_continuity_under_refinement(self):
        # successive solutions get closer as the grid refines
        design, y, _ = random_problem(8)
        gaps = []
        for n_lambda in (5, 10, 20, 40):
            grid = lambda_path(design, y, n_lambda=n_lambda, ratio_min=0.05)
            thetas, _, _ = path_coefficients(design, y, grid, "gaussian")
            gaps.append(np.max(np.linalg.norm(np.diff(thetas, axis=0), axis=1)))
        assert gaps[-1] < gaps[0]
        assert all(np.diff(gaps) <= 1e-12)

    def test_warm_start_matches_cold(self):
        design, y, _ = random_problem(10)
        grid = lambda_path(design, y, n_lambda=8, ratio_min=0.05)
        thetas, _, _ = path_coefficients(design, y, grid, "gaussian")
        for j in (3, 7):
            cold = fit_gaussian(design, y, float(grid[j]))
            np.testing.assert_allclose(thetas[j], cold.theta_scaled, atol=1e-7)


class TestSolverConfig:
    def test_tol_positive(self):
        with pytest.raises(ValueError):
            SolverConfig(tol=0.0)

    def test_grid_descending(self):
        with pytest.raises(ValueError):
            SolverConfig(lambda_path=np.array([0.1, 0.2]))
