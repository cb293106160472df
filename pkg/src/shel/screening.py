"""Per-covariate between-cluster heterogeneity tests and B construction.

Continuous covariates get a one-way ANOVA F-test of equal cluster means;
binary covariates get a likelihood-ratio test of a logistic random-intercept
model (adaptive Gauss-Hermite, 15 nodes) against the intercept-only model,
referred to the 50:50 chi-square boundary mixture.  Covariates whose p-value
falls below ``alpha`` contribute their within-cluster means, replicated over
cluster rows, as columns of the synthetic design B.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp
from scipy.stats import chi2, f as f_dist, norm

from .data import ClusteredDataset, DataError, SyntheticDesign

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(15)

TEST_ANOVA = "anova"
TEST_LRT = "lrt-agq"
TEST_SCORE = "score-fallback"
TEST_CONSTANT = "constant"


@dataclass(frozen=True)
class ScreeningReport:
    """One row per covariate: which test ran and what it decided."""

    index: np.ndarray
    test: tuple
    pvalue: np.ndarray
    selected: np.ndarray
    alpha: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["covariate", "test", "pvalue", "selected"])
            for i, t, p, s in zip(self.index, self.test, self.pvalue, self.selected):
                writer.writerow([int(i), t, repr(float(p)), int(s)])


def _cluster_layout(cluster_id: np.ndarray):
    """Start offsets and sizes of the contiguous cluster blocks."""
    cid = np.asarray(cluster_id)
    change = np.flatnonzero(np.diff(cid) != 0) + 1
    starts = np.concatenate([[0], change])
    sizes = np.diff(np.concatenate([starts, [len(cid)]]))
    return starts, sizes


def anova_pvalues(X: np.ndarray, cluster_id: np.ndarray) -> np.ndarray:
    """Vectorized one-way ANOVA p-values, one per column of X.

    Degenerate conventions: a column constant everywhere gets p = 1
    (F = 0/0 resolved to 0); zero within-cluster variance with real
    between-cluster spread gets p = 0.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError("anova_pvalues expects an (N, L) matrix")
    starts, sizes = _cluster_layout(cluster_id)
    m = len(sizes)
    n = X.shape[0]
    if m < 2:
        raise DataError("heterogeneity test needs at least two clusters")
    if n - m < 1:
        raise DataError("all clusters are singletons: no within-cluster degrees of freedom")
    group_sums = np.add.reduceat(X, starts, axis=0)
    means = group_sums / sizes[:, None]
    grand = X.mean(axis=0)
    ssb = (sizes[:, None] * (means - grand) ** 2).sum(axis=0)
    total = ((X - grand) ** 2).sum(axis=0)
    ssw = np.maximum(total - ssb, 0.0)
    df_b, df_w = m - 1, n - m
    with np.errstate(divide="ignore", invalid="ignore"):
        f_stat = (ssb / df_b) / (ssw / df_w)
    f_stat = np.where(ssw == 0.0, np.where(ssb == 0.0, 0.0, np.inf), f_stat)
    # a column constant everywhere is F = 0/0, resolved to 0 (p = 1);
    # the range test avoids rounding residue in the sums of squares
    f_stat = np.where(X.max(axis=0) == X.min(axis=0), 0.0, f_stat)
    return f_dist.sf(f_stat, df_b, df_w)


def anova_heterogeneity(x: np.ndarray, cluster_id: np.ndarray) -> float:
    """One-way ANOVA F-test p-value for equality of cluster means."""
    return float(anova_pvalues(np.asarray(x, dtype=float)[:, None], cluster_id)[0])


def _binary_sufficient_stats(x: np.ndarray, cluster_id: np.ndarray):
    """Unique (successes, size) cluster profiles with multiplicities."""
    starts, sizes = _cluster_layout(cluster_id)
    succ = np.add.reduceat(x, starts)
    profiles, counts = np.unique(np.column_stack([succ, sizes]), axis=0, return_counts=True)
    return profiles[:, 0], profiles[:, 1].astype(int), counts


def _ri_logistic_loglik(beta0: float, sigma: float, succ, sizes, counts) -> float:
    """Marginal log-likelihood of the logistic random-intercept model.

    Per-cluster integrals use adaptive Gauss-Hermite quadrature centered at
    the conditional mode; sigma below 1e-8 degenerates to plain logistic.
    """
    if sigma < 1e-8:
        ll = succ * beta0 - sizes * np.logaddexp(0.0, beta0)
        return float(counts @ ll)
    var = sigma * sigma
    b = np.zeros_like(succ, dtype=float)
    for _ in range(80):
        mu = expit(beta0 + b)
        grad = succ - sizes * mu - b / var
        hess = sizes * mu * (1 - mu) + 1.0 / var
        step = grad / hess
        b += np.clip(step, -4.0, 4.0)
        if np.max(np.abs(step)) < 1e-10:
            break
    mu = expit(beta0 + b)
    h = sizes * mu * (1 - mu) + 1.0 / var
    scale = np.sqrt(2.0 / h)
    nodes = b[:, None] + scale[:, None] * _GH_NODES[None, :]
    logf = (succ[:, None] * (beta0 + nodes)
            - sizes[:, None] * np.logaddexp(0.0, beta0 + nodes)
            - 0.5 * nodes ** 2 / var)
    log_integrand = np.log(_GH_WEIGHTS)[None, :] + _GH_NODES[None, :] ** 2 + logf
    ll = np.log(scale) + logsumexp(log_integrand, axis=1) - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    return float(counts @ ll)


def _score_test_pvalue(x, succ, sizes, counts) -> float:
    """One-sided score test of zero between-cluster variance (fallback)."""
    pbar = x.mean()
    v = pbar * (1 - pbar)
    resid_sq = (succ - sizes * pbar) ** 2
    num = counts @ (resid_sq - sizes * v)
    den = np.sqrt(2.0 * (counts @ (sizes * v) ** 2))
    if den == 0:
        return 1.0
    return float(norm.sf(num / den))


def binary_heterogeneity(x: np.ndarray, cluster_id: np.ndarray) -> float:
    p, _ = binary_heterogeneity_detail(x, cluster_id)
    return p


def binary_heterogeneity_detail(x: np.ndarray, cluster_id: np.ndarray) -> tuple[float, str]:
    """Boundary LRT p-value for zero between-cluster variance, plus the test used.

    The statistic is referred to the 0.5*chi2(0) + 0.5*chi2(1) mixture since
    the variance sits on the boundary of the parameter space.  Returns
    ``(p, "lrt-agq")`` normally, ``(p, "score-fallback")`` if the
    likelihood optimization does not converge.
    """
    x = np.asarray(x, dtype=float)
    if not np.isin(x, (0.0, 1.0)).all():
        raise DataError("binary heterogeneity test requires a 0/1 covariate")
    if x.min() == x.max():
        raise DataError("binary covariate must have both levels present")
    succ, sizes, counts = _binary_sufficient_stats(x, cluster_id)
    pbar = x.mean()
    beta0_null = float(np.log(pbar / (1 - pbar)))
    ll_null = float(counts @ (succ * beta0_null - sizes * np.logaddexp(0.0, beta0_null)))

    def negll(params):
        return -_ri_logistic_loglik(params[0], params[1], succ, sizes, counts)

    best = None
    ok = False
    for sigma0 in (0.5, 1.5):
        res = optimize.minimize(
            negll, x0=np.array([beta0_null, sigma0]), method="L-BFGS-B",
            bounds=[(-15.0, 15.0), (0.0, 20.0)],
        )
        if res.success or res.status == 0:
            ok = True
        if best is None or res.fun < best:
            best = res.fun
    if not ok:
        return _score_test_pvalue(x, succ, sizes, counts), TEST_SCORE
    lrt = max(0.0, 2.0 * (-best - ll_null))
    p = 1.0 if lrt <= 0 else 0.5 * float(chi2.sf(lrt, df=1))
    return p, TEST_LRT


def _is_binary(col: np.ndarray) -> bool:
    return bool(np.isin(col, (0.0, 1.0)).all())


def screen(dataset: ClusteredDataset, alpha: float) -> tuple[SyntheticDesign, ScreeningReport]:
    """Test every covariate for between-cluster heterogeneity and build B.

    A covariate with p-value below ``alpha`` contributes the within-cluster
    mean of its values, replicated over the cluster's rows; column order
    follows covariate index.  Constant covariates get p = 1.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    X = dataset.X
    cid = dataset.cluster_id
    starts, sizes = _cluster_layout(cid)
    p = X.shape[1]
    pvalues = np.ones(p)
    tests = [TEST_ANOVA] * p
    continuous = np.ones(p, dtype=bool)
    for l in range(p):
        col = X[:, l]
        if col.min() == col.max():
            tests[l] = TEST_CONSTANT
            continuous[l] = False
        elif _is_binary(col):
            pvalues[l], tests[l] = binary_heterogeneity_detail(col, cid)
            continuous[l] = False
    if continuous.any():
        pvalues[continuous] = anova_pvalues(X[:, continuous], cid)
    selected = pvalues < alpha
    cluster_means = np.add.reduceat(X, starts, axis=0) / sizes[:, None]
    row_cluster = np.repeat(np.arange(len(sizes)), sizes)
    chosen = np.flatnonzero(selected)
    B = cluster_means[row_cluster][:, chosen] if len(chosen) else np.zeros((X.shape[0], 0))
    design = SyntheticDesign(
        B=B, source_column=chosen, pvalues=pvalues[chosen], alpha=float(alpha))
    report = ScreeningReport(
        index=np.arange(p), test=tuple(tests), pvalue=pvalues,
        selected=selected, alpha=float(alpha))
    return design, report


def build_synthetic_design(dataset: ClusteredDataset, alpha: float) -> SyntheticDesign:
    design, _ = screen(dataset, alpha)
    return design
