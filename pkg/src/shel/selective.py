"""Polyhedral selective inference for the gaussian stacked-lasso fit.

The fitted weighted problem is recast as a uniform-penalty lasso on
Z = W diag(1/w); conditioning on (active set, signs) is the polyhedron
{A y <= b} whose blocks come from the KKT conditions.  Inference on a
selected coordinate uses the truncated-normal pivot with covariance
sigma^2 I (iid) or sigma^2 I + tau^2 D D' (clustered).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .data import ClusteredDataset, SyntheticDesign
from .solver import PenalizedFit

IID = "iid"
CLUSTERED = "clustered"


class InferenceError(RuntimeError):
    """Raised when a selection event or pivot is numerically inconsistent."""


@dataclass(frozen=True)
class CovarianceModel:
    """Response covariance: sigma2 * I plus tau2 on within-cluster blocks."""

    kind: str
    sigma2: float
    tau2: float = 0.0

    def __post_init__(self):
        if self.kind not in (IID, CLUSTERED):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.tau2 < 0:
            raise ValueError("tau2 must be nonnegative")

    def matrix(self, cluster_id: np.ndarray | None, n: int) -> np.ndarray:
        sigma = self.sigma2 * np.eye(n)
        if self.kind == IID or self.tau2 == 0:
            return sigma
        if cluster_id is None:
            raise ValueError("clustered covariance needs cluster labels")
        same = cluster_id[:, None] == cluster_id[None, :]
        return sigma + self.tau2 * same


@dataclass(frozen=True)
class SelectionEvent:
    """Polyhedral representation {A y <= b} of one lasso selection."""

    A: np.ndarray
    b: np.ndarray
    active_set: np.ndarray
    signs: np.ndarray


@dataclass(frozen=True)
class SelectiveCI:
    """Conditional test and interval for one selected coordinate."""

    index: int
    estimate: float          # eta' y, the relaxed coefficient estimate
    pivot: float
    p_value: float
    ci_low: float
    ci_high: float
    lower: float             # truncation limit L
    upper: float             # truncation limit U
    sd: float                # sqrt(eta' Sigma eta)
    covariance_kind: str
    flags: str = ""


def _log_phi_interval(za: float, zx: float, zb: float) -> float:
    """(Phi(zx) - Phi(za)) / (Phi(zb) - Phi(za)) via log-space differences.

    Callers orient the problem so za + zb <= 0, keeping all three CDF
    evaluations in the numerically favorable lower tail.
    """
    la = log_ndtr(za) if za > -np.inf else -np.inf
    lx = log_ndtr(zx)
    lb = log_ndtr(zb) if zb < np.inf else 0.0
    if la == -np.inf:
        num, den = lx, lb
    else:
        dx = la - lx
        db = la - lb
        num = lx + math.log1p(-math.exp(dx)) if dx < 0 else -np.inf
        den = lb + math.log1p(-math.exp(db)) if db < 0 else -np.inf
    if den == -np.inf:
        raise InferenceError("degenerate truncation interval (zero mass)")
    return float(np.exp(num - den))


def truncated_normal_cdf(x: float, mu: float, sigma2: float,
                         a: float, b: float) -> float:
    """CDF at x of N(mu, sigma2) truncated to [a, b], stable in far tails.

    When the interval sits in the upper tail (standardized a + b > 0) the
    computation flips to the complementary orientation so that every normal
    CDF is evaluated in its lower tail, where relative accuracy survives
    |a - mu|/sigma of 30 and beyond.  An x outside [a, b] is clamped to
    {0, 1} with a warning.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if not a < b:
        raise ValueError("truncation requires a < b")
    sd = math.sqrt(sigma2)
    za = (a - mu) / sd if a > -np.inf else -np.inf
    zb = (b - mu) / sd if b < np.inf else np.inf
    zx = (x - mu) / sd
    if zx < za or zx > zb:
        warnings.warn("evaluation point outside the truncation interval; clamped",
                      stacklevel=2)
        return 0.0 if zx < za else 1.0
    if za == -np.inf and zb == np.inf:
        return float(ndtr(zx))
    flip = (za + zb > 0) if (za > -np.inf and zb < np.inf) else (za > -np.inf and zb == np.inf)
    if flip:
        return 1.0 - _log_phi_interval(-zb, -zx, -za)
    return _log_phi_interval(za, zx, zb)


def truncated_normal_sf(x: float, mu: float, sigma2: float,
                        a: float, b: float) -> float:
    """1 - cdf, computed to full relative precision via reflection."""
    return truncated_normal_cdf(-x, -mu, sigma2, -b, -a)


def build_polyhedron(Z: np.ndarray, y: np.ndarray, fit: PenalizedFit,
                     lambda1: float, tol: float = 1e-7) -> SelectionEvent:
    """Stack the inactive-subgradient and active-sign blocks of the event.

    ``Z`` is the uniform-penalty design of the fit (``design.reparameterized()``)
    and must be the matrix the gaussian solver saw, up to the penalty-weight
    rescaling; KKT consistency ``A y <= b`` is asserted and a violation
    beyond ``tol`` signals a solver/tolerance mismatch.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n = Z.shape[0]
    theta = fit.theta_scaled
    active = np.flatnonzero(theta != 0.0)
    signs = np.sign(theta[active])
    inactive = np.flatnonzero(theta == 0.0)
    Z_m = Z[:, active]
    Z_mc = Z[:, inactive]
    if active.size:
        gram = Z_m.T @ Z_m
        if np.linalg.matrix_rank(gram) < active.size:
            raise InferenceError("active design block is rank deficient")
        gram_inv = np.linalg.inv(gram)
        proj = Z_m @ gram_inv @ Z_m.T
        sigma_inv = gram_inv * n          # inverse of (1/N) Z_M' Z_M
    else:
        proj = np.zeros((n, n))
        sigma_inv = np.zeros((0, 0))
    rows_a0 = Z_mc.T @ (np.eye(n) - proj) / (lambda1 * n)
    cross = Z_mc.T @ Z_m @ sigma_inv @ signs / n if active.size else np.zeros(Z_mc.shape[1])
    ones = np.ones(Z_mc.shape[1])
    A0 = np.vstack([rows_a0, -rows_a0])
    b0 = np.concatenate([ones - cross, ones + cross])
    if active.size:
        A1 = -(np.diag(signs) @ sigma_inv @ Z_m.T) / n
        b1 = -lambda1 * (np.diag(signs) @ sigma_inv @ signs)
        A = np.vstack([A0, A1])
        b = np.concatenate([b0, b1])
    else:
        A, b = A0, b0
    slack = A @ y - b
    worst = float(slack.max(initial=-np.inf))
    if worst > tol:
        raise InferenceError(
            f"selection event violated by observed response (slack {worst:.2e}); "
            "solver tolerance and polyhedron disagree")
    return SelectionEvent(A=A, b=b, active_set=active, signs=signs.astype(np.int8))


def truncation_limits(A: np.ndarray, b: np.ndarray, eta: np.ndarray,
                      Sigma: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """[L, U] of the selection event along the eta direction.

    Decomposing y = c (eta'y) + f with c = Sigma eta / (eta' Sigma eta),
    each row of A y <= b becomes a one-sided bound on the scalar eta'y.
    """
    eta = np.asarray(eta, dtype=float)
    var = float(eta @ Sigma @ eta)
    if not var > 0:
        raise InferenceError("eta' Sigma eta must be positive")
    c = (Sigma @ eta) / var
    x_obs = float(eta @ y)
    f = y - c * x_obs
    if A.shape[0] == 0:
        return -np.inf, np.inf
    a_c = A @ c
    a_f = A @ f
    scale = np.max(np.abs(a_c), initial=0.0)
    cut = 1e-12 * max(scale, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        bounds = (b - a_f) / a_c
    neg = a_c < -cut
    pos = a_c > cut
    lower = float(bounds[neg].max()) if neg.any() else -np.inf
    upper = float(bounds[pos].min()) if pos.any() else np.inf
    if lower >= upper:
        raise InferenceError("inconsistent selection event: L >= U")
    return lower, upper


def _eta_for(Z: np.ndarray, active: np.ndarray, position: int) -> np.ndarray:
    Z_m = Z[:, active]
    gram_inv = np.linalg.inv(Z_m.T @ Z_m)
    return Z_m @ gram_inv[:, position]


def _invert_pivot(x: float, var: float, lower: float, upper: float,
                  target: float, lo: float, hi: float) -> float | None:
    """mu with T_mu(x) = target; the pivot is decreasing in mu."""

    def pivot(mu):
        return truncated_normal_cdf(x, mu, var, lower, upper)

    p_lo, p_hi = pivot(lo), pivot(hi)
    if not (p_lo >= target >= p_hi):
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p_mid = pivot(mid)
        if abs(p_mid - target) < 1e-6 and hi - lo < 1e-9 * (1 + abs(mid)):
            return mid
        if p_mid >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def selective_test(event: SelectionEvent, Z: np.ndarray, y: np.ndarray,
                   cov: CovarianceModel, l: int,
                   cluster_id: np.ndarray | None = None,
                   alpha: float = 0.05) -> SelectiveCI:
    """Conditional pivot, p-value, and CI for selected coordinate ``l``.

    ``l`` indexes the columns of Z and must be in the event's active set.
    The null pivot tests a zero coefficient; the CI inverts the pivot in
    the mean by bisection over |eta'y| +- 20 sd, flagging a half-infinite
    interval when the bracket fails.
    """
    positions = np.flatnonzero(event.active_set == l)
    if positions.size != 1:
        raise InferenceError(f"coordinate {l} is not in the active set")
    eta = _eta_for(Z, event.active_set, int(positions[0]))
    n = len(y)
    Sigma = cov.matrix(cluster_id, n)
    var = float(eta @ Sigma @ eta)
    lower, upper = truncation_limits(event.A, event.b, eta, Sigma, y)
    x_obs = float(eta @ y)
    flags = []
    if not lower < x_obs < upper:
        flags.append("observation-on-boundary")
        x_obs = min(max(x_obs, lower), upper)
    pivot = truncated_normal_cdf(x_obs, 0.0, var, lower, upper)
    pivot_sf = truncated_normal_sf(x_obs, 0.0, var, lower, upper)
    p_value = min(1.0, 2.0 * min(pivot, pivot_sf))
    sd = math.sqrt(var)
    bracket = abs(x_obs) + 20.0 * sd
    ci_low = _invert_pivot(x_obs, var, lower, upper, 1 - alpha / 2, -bracket, bracket)
    ci_high = _invert_pivot(x_obs, var, lower, upper, alpha / 2, -bracket, bracket)
    if ci_low is None:
        flags.append("ci-low-unbracketed")
        ci_low = -np.inf
    if ci_high is None:
        flags.append("ci-high-unbracketed")
        ci_high = np.inf
    return SelectiveCI(
        index=int(l),
        estimate=x_obs,
        pivot=float(pivot),
        p_value=float(p_value),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        lower=float(lower),
        upper=float(upper),
        sd=sd,
        covariance_kind=cov.kind,
        flags=";".join(flags),
    )


def estimate_covariance(residuals: np.ndarray, cluster_id: np.ndarray,
                        kind: str = CLUSTERED) -> CovarianceModel:
    """One-way ANOVA moment estimator of (sigma2, tau2) from fit residuals.

    sigma2 is the within-cluster mean square; tau2 = max(0, (MSB - MSW)/n~)
    with the standard unbalanced-design constant n~.  All-singleton clusters
    make tau2 inestimable: falls back to an iid model on the total variance
    with a warning.
    """
    r = np.asarray(residuals, dtype=float)
    cid = np.asarray(cluster_id)
    labels, sizes = np.unique(cid, return_counts=True)
    m = len(labels)
    n = len(r)
    if n - m < 1:
        warnings.warn("all clusters are singletons; falling back to iid covariance",
                      stacklevel=2)
        return CovarianceModel(kind=IID, sigma2=max(float(np.var(r, ddof=1)), 1e-12))
    sums = np.zeros(m)
    np.add.at(sums, np.searchsorted(labels, cid), r)
    means = sums / sizes
    grand = r.mean()
    ssb = float(sizes @ (means - grand) ** 2)
    ssw = float(((r - means[np.searchsorted(labels, cid)]) ** 2).sum())
    msw = ssw / (n - m)
    if kind == IID:
        return CovarianceModel(kind=IID, sigma2=max(msw, 1e-12))
    msb = ssb / (m - 1)
    n_tilde = (n - float(sizes @ sizes) / n) / (m - 1)
    tau2 = max(0.0, (msb - msw) / n_tilde)
    return CovarianceModel(kind=CLUSTERED, sigma2=max(msw, 1e-12), tau2=tau2)


def residuals_from_fit(fit: PenalizedFit, dataset: ClusteredDataset,
                       B: SyntheticDesign) -> np.ndarray:
    return dataset.y - (dataset.X @ fit.beta + B.B @ fit.gamma + fit.intercept)
