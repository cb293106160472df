"""Weighted-l1 penalized solvers.

Gaussian squared-error loss is handled by cyclic coordinate descent with
active-set iterations; binomial negative log-likelihood by proximal Newton
(IRLS) with a penalized weighted-least-squares inner coordinate descent.
Both operate on the scaled stacked design, where every retained column
satisfies ``||W_l||^2/N = 1``; per-coordinate penalties are
``lambda1 * weights`` with weight 0 marking an unpenalized column.

The hot loops are numba-compiled; pass the design matrix in Fortran order
so column access is unit-stride.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit

from .data import BINOMIAL, GAUSSIAN, StackedDesign


class SolverError(RuntimeError):
    """Raised for structurally unsolvable problems (e.g. separation)."""


@dataclass
class SolverConfig:
    """Convergence knobs shared by every penalized fit.

    ``tol`` bounds the max absolute coefficient change, in scaled space,
    of the last sweep; ``max_iters`` caps coordinate sweeps per fit and
    ``max_irls`` the proximal-Newton steps of a binomial fit.
    """

    tol: float = 1e-8
    max_iters: int = 10000
    max_irls: int = 50
    lambda_path: np.ndarray | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.lambda_path is not None:
            grid = np.asarray(self.lambda_path, dtype=float)
            if grid.ndim != 1 or len(grid) < 1 or (np.diff(grid) >= 0).any():
                raise ValueError("lambda_path must be strictly descending")
            self.lambda_path = grid


@dataclass(frozen=True)
class PenalizedFit:
    """Solution of one penalized problem, reported on the original scale.

    ``active_set`` indexes the stacked coefficient vector (beta, gamma) of
    length p + p0; ``signs`` are the corresponding coefficient signs.  The
    scaled-space solution is retained for KKT checks and selective
    inference, which operate on the solver's design.
    """

    beta: np.ndarray
    gamma: np.ndarray
    intercept: float
    lambda1: float
    lambda2: float
    active_set: np.ndarray
    signs: np.ndarray
    n_iters: int
    converged: bool
    family: str
    theta_scaled: np.ndarray
    intercept_scaled: float
    objective: float
    objective_trace: np.ndarray

    def theta_stacked(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])


def soft_threshold(z: float, t: float) -> float:
    """sign(z) * max(|z| - t, 0); ties |z| == t map to 0."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    mag = abs(z) - t
    if mag <= 0:
        return 0.0
    return mag if z > 0 else -mag


@njit(cache=True)
def _sweep(W, r, theta, pen, d, idx):
    """One pass of coordinate minimization over ``idx``; r updated in place."""
    n = W.shape[0]
    max_delta = 0.0
    for t in range(idx.shape[0]):
        k = idx[t]
        dk = d[k]
        if dk <= 0.0:
            continue
        s = 0.0
        for i in range(n):
            s += W[i, k] * r[i]
        z = s / n + dk * theta[k]
        mag = abs(z) - pen[k]
        if mag > 0.0:
            new = (mag if z > 0.0 else -mag) / dk
        else:
            new = 0.0
        delta = new - theta[k]
        if delta != 0.0:
            for i in range(n):
                r[i] -= W[i, k] * delta
            theta[k] = new
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


@njit(cache=True)
def _objective_gaussian(r, theta, pen):
    n = r.shape[0]
    s = 0.0
    for i in range(n):
        s += r[i] * r[i]
    obj = 0.5 * s / n
    for k in range(theta.shape[0]):
        obj += pen[k] * abs(theta[k])
    return obj


@njit(cache=True)
def _solve_gaussian(W, y, theta, pen, d, tol, max_sweeps):
    """Active-set coordinate descent; theta updated in place.

    Returns (sweeps, converged, objective_trace, n_recorded); the
    objective is recorded after every sweep.
    """
    n, k_tot = W.shape
    r = y - W @ theta
    obj = np.empty(max_sweeps + 2)
    nobj = 0
    sweeps = 0
    converged = False
    all_idx = np.arange(k_tot)
    while sweeps < max_sweeps:
        max_delta = _sweep(W, r, theta, pen, d, all_idx)
        sweeps += 1
        obj[nobj] = _objective_gaussian(r, theta, pen)
        nobj += 1
        if max_delta < tol:
            converged = True
            break
        n_active = 0
        for k in range(k_tot):
            if theta[k] != 0.0 or pen[k] == 0.0:
                n_active += 1
        active = np.empty(n_active, np.int64)
        j = 0
        for k in range(k_tot):
            if theta[k] != 0.0 or pen[k] == 0.0:
                active[j] = k
                j += 1
        while sweeps < max_sweeps:
            max_delta = _sweep(W, r, theta, pen, d, active)
            sweeps += 1
            obj[nobj] = _objective_gaussian(r, theta, pen)
            nobj += 1
            if max_delta < tol:
                break
    return sweeps, converged, obj, nobj


@njit(cache=True)
def _sweep_wls(W, r, v, theta, pen, d, idx):
    """Weighted-least-squares coordinate pass; d_k = (1/N) sum v_i W_ik^2."""
    n = W.shape[0]
    max_delta = 0.0
    for t in range(idx.shape[0]):
        k = idx[t]
        dk = d[k]
        if dk <= 0.0:
            continue
        s = 0.0
        for i in range(n):
            s += W[i, k] * v[i] * r[i]
        z = s / n + dk * theta[k]
        mag = abs(z) - pen[k]
        if mag > 0.0:
            new = (mag if z > 0.0 else -mag) / dk
        else:
            new = 0.0
        delta = new - theta[k]
        if delta != 0.0:
            for i in range(n):
                r[i] -= W[i, k] * delta
            theta[k] = new
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


@njit(cache=True)
def _solve_wls(W, z, v, theta, icpt, pen, tol, max_sweeps):
    """Penalized WLS with an unpenalized intercept; returns updated icpt."""
    n, k_tot = W.shape
    d = np.empty(k_tot)
    for k in range(k_tot):
        s = 0.0
        for i in range(n):
            s += v[i] * W[i, k] * W[i, k]
        d[k] = s / n
    v_sum = 0.0
    for i in range(n):
        v_sum += v[i]
    r = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(k_tot):
            s += W[i, k] * theta[k]
        r[i] = z[i] - icpt - s
    sweeps = 0
    all_idx = np.arange(k_tot)
    while sweeps < max_sweeps:
        s = 0.0
        for i in range(n):
            s += v[i] * r[i]
        di = s / v_sum
        icpt += di
        for i in range(n):
            r[i] -= di
        max_delta = _sweep_wls(W, r, v, theta, pen, d, all_idx)
        sweeps += 1
        if max(max_delta, abs(di)) < tol:
            break
    return icpt, sweeps


def _as_fortran(W: np.ndarray) -> np.ndarray:
    return W if W.flags.f_contiguous else np.asfortranarray(W)


def _penalties(design: StackedDesign, lambda1: float) -> np.ndarray:
    return lambda1 * design.weights


def _make_fit(design, theta, icpt_scaled, lambda1, n_iters, converged, family,
              objective, trace) -> PenalizedFit:
    beta, gamma, intercept = design.to_original(theta, icpt_scaled)
    stacked = np.concatenate([beta, gamma])
    active = np.flatnonzero(stacked != 0.0)
    return PenalizedFit(
        beta=beta,
        gamma=gamma,
        intercept=intercept,
        lambda1=float(lambda1),
        lambda2=float(lambda1 * design.ratio),
        active_set=active,
        signs=np.sign(stacked[active]).astype(np.int8),
        n_iters=int(n_iters),
        converged=bool(converged),
        family=family,
        theta_scaled=theta,
        intercept_scaled=float(icpt_scaled),
        objective=float(objective),
        objective_trace=trace,
    )


def fit_gaussian(design: StackedDesign, y: np.ndarray, lambda1: float,
                 config: SolverConfig | None = None,
                 warm: np.ndarray | None = None) -> PenalizedFit:
    """Minimize (2N)^-1 ||y - W theta||^2 + lambda1 sum_k w_k |theta_k|.

    The unpenalized intercept is absorbed by centering y.  Non-convergence
    within ``max_iters`` sweeps is flagged on the fit, not fatal.
    """
    config = config or SolverConfig()
    if lambda1 < 0:
        raise ValueError("lambda1 must be nonnegative")
    W = _as_fortran(design.W)
    y = np.asarray(y, dtype=float)
    ybar = y.mean()
    yc = y - ybar
    theta = np.zeros(design.n_cols) if warm is None else warm.astype(float).copy()
    pen = _penalties(design, lambda1)
    d = (design.W ** 2).sum(axis=0) / design.n_obs
    sweeps, converged, obj, nobj = _solve_gaussian(
        W, yc, theta, pen, d, config.tol, config.max_iters)
    trace = obj[:nobj].copy()
    return _make_fit(design, theta, ybar, lambda1, sweeps, converged,
                     GAUSSIAN, trace[-1], trace)


def _nll_binomial(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def fit_binomial(design: StackedDesign, y: np.ndarray, lambda1: float,
                 config: SolverConfig | None = None,
                 warm: np.ndarray | None = None,
                 warm_intercept: float | None = None) -> PenalizedFit:
    """Penalized logistic deviance via IRLS with inner coordinate descent.

    The intercept is an unpenalized coordinate of the working problem.
    Raises :class:`SolverError` when lambda1 = 0 and the classes are
    separable (the unpenalized MLE diverges).
    """
    config = config or SolverConfig()
    if lambda1 < 0:
        raise ValueError("lambda1 must be nonnegative")
    y = np.asarray(y, dtype=float)
    if not ((y == 0).any() and (y == 1).any()):
        raise SolverError("binomial fit requires both response classes")
    W = _as_fortran(design.W)
    ybar = y.mean()
    theta = np.zeros(design.n_cols) if warm is None else warm.astype(float).copy()
    icpt = float(np.log(ybar / (1 - ybar))) if warm_intercept is None else float(warm_intercept)
    pen = _penalties(design, lambda1)

    def penalized_nll(th, ic):
        return _nll_binomial(design.W @ th + ic, y) + float(pen @ np.abs(th))

    def check_separation(eta):
        # at lambda1 = 0 a diverging linear predictor means the MLE does not
        # exist; expit saturates well before |eta| = 30
        if lambda1 == 0 and np.max(np.abs(eta)) > 30:
            raise SolverError("separation detected: unpenalized logistic fit is unbounded")

    obj_trace = [penalized_nll(theta, icpt)]
    converged = False
    it = 0
    for it in range(1, config.max_irls + 1):
        eta = design.W @ theta + icpt
        check_separation(eta)
        mu = expit(eta)
        v = np.clip(mu * (1.0 - mu), 1e-5, None)
        z = eta + (y - mu) / v
        theta_prop = theta.copy()
        icpt_prop, _ = _solve_wls(W, z, v, theta_prop, icpt, pen,
                                  config.tol, config.max_iters)
        # proximal-Newton safeguard: halve the step until the objective drops
        step = 1.0
        cur = obj_trace[-1]
        cand_theta, cand_icpt = theta_prop, icpt_prop
        while penalized_nll(cand_theta, cand_icpt) > cur + 1e-12 and step > 1e-4:
            step *= 0.5
            cand_theta = theta + step * (theta_prop - theta)
            cand_icpt = icpt + step * (icpt_prop - icpt)
        delta = max(np.max(np.abs(cand_theta - theta), initial=0.0),
                    abs(cand_icpt - icpt))
        theta, icpt = cand_theta, cand_icpt
        obj_trace.append(penalized_nll(theta, icpt))
        if delta < max(config.tol, 1e-10):
            converged = True
            break
    check_separation(design.W @ theta + icpt)
    trace = np.asarray(obj_trace)
    return _make_fit(design, theta, icpt, lambda1, it, converged,
                     BINOMIAL, trace[-1], trace)


def fit_family(design: StackedDesign, y: np.ndarray, lambda1: float, family: str,
               config: SolverConfig | None = None,
               warm: np.ndarray | None = None) -> PenalizedFit:
    if family == GAUSSIAN:
        return fit_gaussian(design, y, lambda1, config, warm)
    return fit_binomial(design, y, lambda1, config, warm)


def lambda_max(design: StackedDesign, y: np.ndarray, family: str = GAUSSIAN) -> float:
    """Smallest lambda1 at which every penalized coordinate is zero.

    Computed from the null-model working residual: centered y for the
    gaussian family, y - mean(y) for binomial (intercept-only model).
    Unpenalized columns, when present, are projected out first.
    """
    y = np.asarray(y, dtype=float)
    penalized = design.weights > 0
    # same expression for both families: the binomial null model has
    # mu = mean(y) at intercept logit(mean(y)), so the score is W'(y - ybar)/N
    resid = y - y.mean()
    if (~penalized).any():
        unpen = design.W[:, ~penalized]
        basis = np.hstack([np.ones((design.n_obs, 1)), unpen])
        coef, *_ = np.linalg.lstsq(basis, resid, rcond=None)
        resid = resid - basis @ coef
    grads = np.abs(design.W[:, penalized].T @ resid) / design.n_obs
    if grads.size == 0:
        return 0.0
    return float(np.max(grads / design.weights[penalized]))


def lambda_path(design: StackedDesign, y: np.ndarray, n_lambda: int = 60,
                ratio_min: float = 0.01, family: str = GAUSSIAN) -> np.ndarray:
    """Descending log-spaced grid from lambda_max to ratio_min * lambda_max."""
    if n_lambda < 2:
        raise ValueError("n_lambda must be at least 2")
    lmax = lambda_max(design, y, family)
    if lmax <= 0:
        lmax = 1e-3
    return np.geomspace(lmax, ratio_min * lmax, n_lambda)


def path_coefficients(design: StackedDesign, y: np.ndarray, lambdas: np.ndarray,
                      family: str, config: SolverConfig | None = None):
    """Warm-started solutions along a descending lambda grid.

    Returns (thetas, intercepts, converged) in scaled space with shapes
    (L, K), (L,), (L,).
    """
    config = config or SolverConfig()
    lambdas = np.asarray(lambdas, dtype=float)
    thetas = np.zeros((len(lambdas), design.n_cols))
    icpts = np.zeros(len(lambdas))
    flags = np.zeros(len(lambdas), dtype=bool)
    warm = None
    warm_icpt = None
    for j, lam in enumerate(lambdas):
        if family == GAUSSIAN:
            fit = fit_gaussian(design, y, lam, config, warm)
        else:
            fit = fit_binomial(design, y, lam, config, warm, warm_icpt)
        thetas[j] = fit.theta_scaled
        icpts[j] = fit.intercept_scaled
        flags[j] = fit.converged
        warm = fit.theta_scaled
        warm_icpt = fit.intercept_scaled
    return thetas, icpts, flags


def kkt_max_violation(design: StackedDesign, y: np.ndarray, fit: PenalizedFit) -> float:
    """Max stationarity violation of the fit, in gradient units.

    For active coordinates the gradient must equal -lambda1*w_k*sign(theta_k)
    (gaussian sign convention: (1/N) W_k'(y - W theta) = lambda1 w_k s_k);
    for inactive ones it must lie inside the dead zone.
    """
    y = np.asarray(y, dtype=float)
    theta = fit.theta_scaled
    if fit.family == GAUSSIAN:
        r = y - fit.intercept_scaled - design.W @ theta
        grad = design.W.T @ r / design.n_obs
    else:
        mu = expit(design.W @ theta + fit.intercept_scaled)
        grad = design.W.T @ (y - mu) / design.n_obs
    pen = _penalties(design, fit.lambda1)
    active = theta != 0
    viol = 0.0
    if active.any():
        viol = float(np.max(np.abs(grad[active] - pen[active] * np.sign(theta[active]))))
    if (~active).any():
        viol = max(viol, float(np.max(np.abs(grad[~active]) - pen[~active], initial=0.0)))
    return viol
