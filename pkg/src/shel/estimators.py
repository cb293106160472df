"""SHEL/GSHEL estimators, cluster-level cross-validation, iterative refits.

The synthetic-effects fit stacks [X B] with penalty weights (1, ratio) where
``ratio = sqrt(log(p0)/log(p))`` couples the two penalty levels; with an
empty B it reduces bit-for-bit to the marginal lasso.  Cross-validation
always partitions clusters, never raw rows.  The iterative variants carry
the fitted cluster-effect approximation B @ gamma forward as an unpenalized
offset column and accumulate its coefficient into gamma.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import (
    BINOMIAL,
    GAUSSIAN,
    ClusteredDataset,
    DataError,
    StackedDesign,
    SyntheticDesign,
    append_unpenalized,
    stack_design,
)
from .solver import (
    PenalizedFit,
    SolverConfig,
    fit_binomial,
    fit_gaussian,
    lambda_max,
    path_coefficients,
)

MAX_EXHAUSTIVE_P0 = 12


def coupling_ratio(p: int, p0: int) -> float:
    """lambda2/lambda1 = sqrt(log(p0)/log(p)); 1 in the degenerate cases."""
    if p0 <= 1 or p <= 1:
        return 1.0
    return math.sqrt(math.log(p0) / math.log(p))


def build_design(dataset: ClusteredDataset, B: SyntheticDesign,
                 offset_column: np.ndarray | None = None) -> StackedDesign:
    design = stack_design(dataset.X, B.B, coupling_ratio(dataset.n_covariates, B.n_synthetic))
    if offset_column is not None:
        design = append_unpenalized(design, offset_column)
    return design


def fit_shel(dataset: ClusteredDataset, B: SyntheticDesign, lambda1: float,
             config: SolverConfig | None = None) -> PenalizedFit:
    """Joint weighted-l1 fit of (beta, gamma) on [X B], gaussian loss."""
    if dataset.family != GAUSSIAN:
        raise DataError("fit_shel requires the gaussian family; use fit_gshel")
    return fit_gaussian(build_design(dataset, B), dataset.y, lambda1, config)


def fit_gshel(dataset: ClusteredDataset, B: SyntheticDesign, lambda1: float,
              config: SolverConfig | None = None) -> PenalizedFit:
    """Joint weighted-l1 fit of (beta, gamma) on [X B], logistic loss."""
    if dataset.family != BINOMIAL:
        raise DataError("fit_gshel requires the binomial family; use fit_shel")
    return fit_binomial(build_design(dataset, B), dataset.y, lambda1, config)


@dataclass(frozen=True)
class CvResult:
    """Cluster-fold cross-validation curve and the two standard lambda rules."""

    lambda_min: float
    lambda_1se: float
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    fold_assignment: np.ndarray  # fold index per cluster, 0..K-1

    def pick(self, rule: str) -> float:
        if rule == "min":
            return self.lambda_min
        if rule == "1se":
            return self.lambda_1se
        raise ValueError(f"unknown lambda rule {rule!r}")


def _cluster_folds(m: int, K: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    assignment = np.empty(m, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(perm, K)):
        assignment[chunk] = k
    return assignment


def _fold_ok_binomial(y: np.ndarray, row_fold: np.ndarray, K: int) -> bool:
    for k in range(K):
        train = y[row_fold != k]
        if train.min() == train.max():
            return False
    return True


def _deviance(y: np.ndarray, eta: np.ndarray) -> np.ndarray:
    # per-observation binomial deviance contributions 2*(loglik_sat - loglik)
    return 2.0 * (np.logaddexp(0.0, eta) - y * eta)


def cross_validate(dataset: ClusteredDataset, B: SyntheticDesign, K: int,
                   config: SolverConfig | None = None, seed: int = 0,
                   n_lambda: int = 60, ratio_min: float = 1e-2,
                   offset_column: np.ndarray | None = None,
                   cv_tol: float = 1e-5) -> CvResult:
    """K-fold CV over clusters; fold error is MSE (gaussian) or mean deviance.

    The lambda grid is anchored at the largest lambda_max across the full
    data and every training fold, so the first grid point is an exact null
    model in every fold.  A binomial fold layout that strands one response
    class in some training set is redrawn once, then rejected.  Fold fits
    run at the looser ``cv_tol`` (the error curve is flat at that scale);
    refit at the chosen lambda with the tight solver tolerance afterwards.
    """
    config = config or SolverConfig()
    config = SolverConfig(tol=max(config.tol, cv_tol), max_iters=config.max_iters,
                          max_irls=config.max_irls, lambda_path=config.lambda_path)
    m = dataset.n_clusters
    if not 2 <= K <= m:
        raise ValueError("K must satisfy 2 <= K <= m")
    ratio = coupling_ratio(dataset.n_covariates, B.n_synthetic)
    y = dataset.y
    fold_of_cluster = _cluster_folds(m, K, seed)
    row_fold = fold_of_cluster[dataset.cluster_id - 1]
    if dataset.family == BINOMIAL and not _fold_ok_binomial(y, row_fold, K):
        fold_of_cluster = _cluster_folds(m, K, seed + 1)
        row_fold = fold_of_cluster[dataset.cluster_id - 1]
        if not _fold_ok_binomial(y, row_fold, K):
            raise DataError("a training fold lost a response class (after one refold)")

    def make_design(rows):
        X = dataset.X[rows]
        Bm = B.B[rows]
        d = stack_design(X, Bm, ratio)
        if offset_column is not None:
            d = append_unpenalized(d, offset_column[rows])
        return d

    all_rows = np.arange(dataset.n_obs)
    full_design = make_design(all_rows)
    if config.lambda_path is not None:
        lambdas = config.lambda_path
    else:
        anchor = lambda_max(full_design, y, dataset.family)
        fold_designs = []
        fold_rows = []
        for k in range(K):
            tr = all_rows[row_fold != k]
            d_tr = make_design(tr)
            fold_designs.append(d_tr)
            fold_rows.append(tr)
            anchor = max(anchor, lambda_max(d_tr, y[tr], dataset.family))
        if anchor <= 0:
            anchor = 1e-3
        lambdas = np.geomspace(anchor, ratio_min * anchor, n_lambda)
    if config.lambda_path is not None:
        fold_designs = []
        fold_rows = []
        for k in range(K):
            tr = all_rows[row_fold != k]
            fold_designs.append(make_design(tr))
            fold_rows.append(tr)

    errors = np.empty((K, len(lambdas)))
    for k in range(K):
        tr = fold_rows[k]
        te = all_rows[row_fold == k]
        d_tr = fold_designs[k]
        thetas, icpts, _ = path_coefficients(d_tr, y[tr], lambdas, dataset.family, config)
        X_te, B_te = dataset.X[te], B.B[te]
        for j in range(len(lambdas)):
            beta, gamma, intercept = d_tr.to_original(thetas[j], icpts[j])
            eta = X_te @ beta + B_te @ gamma + intercept
            if offset_column is not None:
                k_main = len(d_tr.x_columns) + len(d_tr.b_columns)
                if d_tr.n_cols > k_main:
                    coef_extra = thetas[j][k_main] / d_tr.column_scales[k_main]
                    eta = eta + coef_extra * offset_column[te]
            if dataset.family == GAUSSIAN:
                errors[k, j] = float(np.mean((y[te] - eta) ** 2))
            else:
                errors[k, j] = float(np.mean(_deviance(y[te], eta)))
    cv_mean = errors.mean(axis=0)
    cv_se = errors.std(axis=0, ddof=1) / np.sqrt(K)
    j_min = int(np.argmin(cv_mean))
    threshold = cv_mean[j_min] + cv_se[j_min]
    j_1se = int(np.flatnonzero(cv_mean <= threshold)[0])  # grid is descending
    return CvResult(
        lambda_min=float(lambdas[j_min]),
        lambda_1se=float(lambdas[j_1se]),
        lambdas=np.asarray(lambdas, dtype=float),
        cv_mean=cv_mean,
        cv_se=cv_se,
        fold_assignment=fold_of_cluster,
    )


@dataclass(frozen=True)
class IterativeTrace:
    """Squared-change trace of the carried cluster-effect approximation."""

    trace: np.ndarray
    e_thr: float
    n_iterations: int
    converged: bool

    def __post_init__(self):
        if len(self.trace) != self.n_iterations:
            raise ValueError("trace length must equal n_iterations")


def _fit_at(dataset: ClusteredDataset, B: SyntheticDesign, lambda1: float,
            config: SolverConfig, offset_column: np.ndarray | None = None) -> tuple[PenalizedFit, StackedDesign]:
    design = build_design(dataset, B, offset_column)
    if dataset.family == GAUSSIAN:
        fit = fit_gaussian(design, dataset.y, lambda1, config)
    else:
        fit = fit_binomial(design, dataset.y, lambda1, config)
    return fit, design


def fit_ishel(dataset: ClusteredDataset, B: SyntheticDesign,
              config: SolverConfig | None = None, e_thr: float | None = None,
              rule: str = "1se", K: int = 10, seed: int = 0,
              max_outer: int = 20, n_lambda: int = 60,
              ratio_min: float = 1e-2) -> tuple[PenalizedFit, IterativeTrace]:
    """Iterative refits conditioning on the previous synthetic approximation.

    Each iteration appends the current cluster-effect estimate B @ gamma as
    an unpenalized offset column, refits with a freshly cross-validated
    lambda1 (rule "1se" or "min"), and folds the offset coefficient back
    into the accumulated gamma.  Stops when the squared change of the
    approximation drops below ``e_thr`` (default 1e-6 * N) or after
    ``max_outer`` refits; without convergence the best iterate is returned
    and flagged.
    """
    config = config or SolverConfig()
    if e_thr is None:
        e_thr = 1e-6 * dataset.n_obs
    if not e_thr > 0:
        raise ValueError("e_thr must be positive")
    Bmat = B.B

    def cv_lambda(offset):
        cv = cross_validate(dataset, B, K, config, seed=seed,
                            n_lambda=n_lambda, ratio_min=ratio_min,
                            offset_column=offset)
        return cv.pick(rule), cv

    lam0, cv0 = cv_lambda(None)
    fit, design = _fit_at(dataset, B, lam0, config)
    gamma_total = fit.gamma.copy()
    d_alpha = Bmat @ gamma_total
    trace: list[float] = []
    best = (np.inf, fit, gamma_total, cv0)
    converged = False
    s = 0
    for s in range(1, max_outer + 1):
        offset = d_alpha if np.any(d_alpha != 0) else None
        lam_s, cv_s = cv_lambda(offset)
        fit_s, design_s = _fit_at(dataset, B, lam_s, config, offset)
        k_main = len(design_s.x_columns) + len(design_s.b_columns)
        carried = 0.0
        if offset is not None and design_s.n_cols > k_main:
            carried = fit_s.theta_scaled[k_main] / design_s.column_scales[k_main]
        gamma_total = carried * gamma_total + fit_s.gamma
        d_alpha_new = Bmat @ gamma_total
        e_s = float(np.sum((d_alpha_new - d_alpha) ** 2))
        trace.append(e_s)
        d_alpha = d_alpha_new
        fit = fit_s
        if e_s < best[0]:
            best = (e_s, fit_s, gamma_total.copy(), cv_s)
        if e_s < e_thr:
            converged = True
            break
    if not converged:
        _, fit, gamma_total, _ = best
    stacked = np.concatenate([fit.beta, gamma_total])
    active = np.flatnonzero(stacked != 0.0)
    final = PenalizedFit(
        beta=fit.beta,
        gamma=gamma_total,
        intercept=fit.intercept,
        lambda1=fit.lambda1,
        lambda2=fit.lambda2,
        active_set=active,
        signs=np.sign(stacked[active]).astype(np.int8),
        n_iters=fit.n_iters,
        converged=fit.converged,
        family=fit.family,
        theta_scaled=fit.theta_scaled,
        intercept_scaled=fit.intercept_scaled,
        objective=fit.objective,
        objective_trace=fit.objective_trace,
    )
    return final, IterativeTrace(
        trace=np.asarray(trace), e_thr=float(e_thr),
        n_iterations=len(trace), converged=converged)


def target_shift_oracle(alpha: np.ndarray, B_c: np.ndarray, M2: int,
                        mode: str = "exhaustive") -> tuple[np.ndarray, float]:
    """Best M2-sparse linear predictor of the cluster intercepts from B_c.

    Exhaustive mode enumerates every size-M2 support and solves least
    squares on each; it is a test oracle and refuses p0 > 12 (use
    ``mode="greedy"`` for an orthogonal-matching-pursuit approximation,
    flagged as such).  Returns (gamma_star, delta_m) where delta_m**2 is
    the mean squared approximation error.
    """
    alpha = np.asarray(alpha, dtype=float)
    B_c = np.asarray(B_c, dtype=float)
    m, p0 = B_c.shape
    if alpha.shape != (m,):
        raise ValueError("alpha and B_c row count differ")
    if not 0 <= M2 <= p0:
        raise ValueError("M2 must lie in {0, ..., p0}")
    if M2 == 0 or p0 == 0:
        return np.zeros(p0), float(np.sqrt(np.mean(alpha ** 2)))

    def ls_on(support):
        coef, *_ = np.linalg.lstsq(B_c[:, support], alpha, rcond=None)
        resid = alpha - B_c[:, support] @ coef
        return coef, float(resid @ resid)

    if mode == "exhaustive":
        if p0 > MAX_EXHAUSTIVE_P0:
            raise ValueError(
                f"exhaustive search is limited to p0 <= {MAX_EXHAUSTIVE_P0}; "
                "use mode='greedy' for an approximate (OMP) answer")
        best_rss = np.inf
        best = None
        for support in itertools.combinations(range(p0), M2):
            coef, rss = ls_on(list(support))
            if rss < best_rss:
                best_rss = rss
                best = (list(support), coef)
        support, coef = best
    elif mode == "greedy":
        support: list[int] = []
        resid = alpha.copy()
        for _ in range(M2):
            scores = np.abs(B_c.T @ resid)
            scores[support] = -np.inf
            support.append(int(np.argmax(scores)))
            coef, _ = ls_on(support)
            resid = alpha - B_c[:, support] @ coef
        coef, best_rss = ls_on(support)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gamma_star = np.zeros(p0)
    gamma_star[support] = coef
    delta_m = float(np.sqrt(best_rss / m))
    return gamma_star, delta_m


METHODS = ("lasso", "shel", "gshel", "ishel1", "ishel2", "igshel")


@dataclass(frozen=True)
class MethodResult:
    """End-to-end result of screening + CV + fit for one method."""

    method: str
    fit: PenalizedFit
    design: StackedDesign
    synthetic: SyntheticDesign
    cv: CvResult
    trace: IterativeTrace | None


def fit_method(dataset: ClusteredDataset, method: str, alpha: float = 0.05,
               K: int = 10, seed: int = 0, config: SolverConfig | None = None,
               rule: str = "1se", n_lambda: int = 60, ratio_min: float = 1e-2,
               synthetic: SyntheticDesign | None = None) -> MethodResult:
    """Run screening (unless B is supplied), cross-validate, and fit.

    ``method`` is one of lasso | shel | gshel | ishel1 | ishel2 | igshel;
    the marginal lasso uses an empty B.  ``rule`` picks lambda for the
    non-iterative methods; the iterative ones fix their rule by name.
    """
    from .screening import screen  # local import to avoid a cycle

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    config = config or SolverConfig()
    if method == "lasso":
        B = SyntheticDesign.empty(dataset.n_obs, alpha)
    elif synthetic is not None:
        B = synthetic
    else:
        B, _ = screen(dataset, alpha)
    gaussian_only = {"shel", "ishel1", "ishel2"}
    binomial_only = {"gshel", "igshel"}
    if method in gaussian_only and dataset.family != GAUSSIAN:
        raise DataError(f"method {method} requires the gaussian family")
    if method in binomial_only and dataset.family != BINOMIAL:
        raise DataError(f"method {method} requires the binomial family")

    if method in ("ishel1", "ishel2", "igshel"):
        it_rule = "min" if method == "ishel2" else "1se"
        fit, trace = fit_ishel(dataset, B, config, rule=it_rule, K=K, seed=seed,
                               n_lambda=n_lambda, ratio_min=ratio_min)
        cv = cross_validate(dataset, B, K, config, seed=seed,
                            n_lambda=n_lambda, ratio_min=ratio_min)
        design = build_design(dataset, B)
        return MethodResult(method, fit, design, B, cv, trace)

    cv = cross_validate(dataset, B, K, config, seed=seed,
                        n_lambda=n_lambda, ratio_min=ratio_min)
    lam = cv.pick(rule)
    design = build_design(dataset, B)
    if dataset.family == GAUSSIAN:
        fit = fit_gaussian(design, dataset.y, lam, config)
    else:
        fit = fit_binomial(design, dataset.y, lam, config)
    return MethodResult(method, fit, design, B, cv, None)


def predict(result_or_fit, dataset: ClusteredDataset, B: SyntheticDesign) -> np.ndarray:
    """Linear predictor X beta + B gamma + intercept on the original scale."""
    fit = result_or_fit.fit if isinstance(result_or_fit, MethodResult) else result_or_fit
    return dataset.X @ fit.beta + B.B @ fit.gamma + fit.intercept


def predict_response(fit: PenalizedFit, dataset: ClusteredDataset,
                     B: SyntheticDesign) -> np.ndarray:
    eta = predict(fit, dataset, B)
    return expit(eta) if fit.family == BINOMIAL else eta
