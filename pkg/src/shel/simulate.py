"""Data-generating processes and the replication harness.

Covariates are multivariate Gaussian with a block-diagonal precision matrix
(blocks of 5, unit diagonal, 0.5 off-diagonal); a random subset of columns
receives cluster-specific means, independent of or endogenous to the latent
intercepts.  Metrics follow the standard selection / estimation / inference
split; every replication derives all of its randomness from ``seed + rep``
so studies are reproducible regardless of scheduling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from .data import BINOMIAL, GAUSSIAN, ClusteredDataset, SyntheticDesign
from .debias import debiased_test_suite, naive_refit_inference
from .estimators import MethodResult, fit_method, predict
from .selective import (
    CovarianceModel,
    build_polyhedron,
    estimate_covariance,
    residuals_from_fit,
    selective_test,
)
from .solver import SolverConfig

log = logging.getLogger(__name__)

INDEPENDENT = "independent"
ENDOGENOUS = "endogenous"

DEFAULT_BETA_SUPPORT = (0, 5, 10, 11, 15, 16)
DEFAULT_BETA_VALUES = (0.5, 0.5, 1.0, 1.0, 1.5, 1.5)

INFERENCE_MODES = ("si1", "si2", "debias", "naive")


@dataclass(frozen=True)
class DgpConfig:
    """One simulation scenario; ``seed`` fixes the entire draw."""

    m: int = 100
    n: int = 4
    p: int = 200
    p0_true: int = 100
    dependence: str = INDEPENDENT
    intercept_dist: str = "gaussian"
    family: str = GAUSSIAN
    beta_support: tuple = DEFAULT_BETA_SUPPORT
    beta_values: tuple = DEFAULT_BETA_VALUES
    seed: int = 0

    def __post_init__(self):
        if self.p0_true > self.p:
            raise ValueError("p0_true must not exceed p")
        if len(self.beta_support) != len(self.beta_values):
            raise ValueError("beta_support and beta_values lengths differ")
        if self.beta_support and (min(self.beta_support) < 0
                                  or max(self.beta_support) >= self.p):
            raise ValueError("beta_support indices must lie in [0, p)")
        if self.dependence not in (INDEPENDENT, ENDOGENOUS):
            raise ValueError(f"unknown dependence {self.dependence!r}")
        if self.intercept_dist not in ("gaussian", "gaussian_mixture"):
            raise ValueError(f"unknown intercept_dist {self.intercept_dist!r}")

    def label(self) -> str:
        return (f"{self.family}-{self.dependence}-{self.intercept_dist}"
                f"-m{self.m}-n{self.n}-p{self.p}-p0{self.p0_true}")


@dataclass(frozen=True)
class GroundTruth:
    beta: np.ndarray
    alpha: np.ndarray
    p0_set: np.ndarray
    mu: np.ndarray           # m x p cluster means
    prevalence: float        # realized mean response (binomial), else nan


def _block_cholesky(size: int) -> np.ndarray:
    # inverse of (0.5 I + 0.5 J): 2 (I - J/(size+1))
    sigma = 2.0 * (np.eye(size) - np.ones((size, size)) / (size + 1))
    return np.linalg.cholesky(sigma)


def _draw_intercept_base(rng: np.random.Generator, m: int, dist: str) -> np.ndarray:
    if dist == "gaussian":
        return rng.standard_normal(m)
    comp = rng.integers(0, 2, size=m) * 2 - 1
    return comp + math.sqrt(0.5) * rng.standard_normal(m)


def generate(config: DgpConfig) -> tuple[ClusteredDataset, GroundTruth]:
    """Draw one clustered dataset; identical seeds give identical bits."""
    rng = np.random.default_rng(config.seed)
    m, n, p = config.m, config.n, config.p
    n_obs = m * n
    p0_set = np.sort(rng.choice(p, size=config.p0_true, replace=False))
    mu = np.zeros((m, p))
    if config.dependence == ENDOGENOUS:
        u = _draw_intercept_base(rng, m, config.intercept_dist)
        z_alpha = rng.standard_normal(m)
        h = rng.uniform(0.0, 1.0, size=config.p0_true)
        z_mu = rng.standard_normal((m, config.p0_true))
        mu[:, p0_set] = h[None, :] * u[:, None] + z_mu / n
        alpha = 0.8 * u + 0.2 * z_alpha
    else:
        mu[:, p0_set] = rng.standard_normal((m, config.p0_true))
        alpha = _draw_intercept_base(rng, m, config.intercept_dist)
    noise = rng.standard_normal((n_obs, p))
    X = np.empty((n_obs, p))
    start = 0
    while start < p:
        size = min(5, p - start)
        chol = _block_cholesky(size)
        X[:, start:start + size] = noise[:, start:start + size] @ chol.T
        start += size
    cluster_rows = np.repeat(np.arange(m), n)
    X += mu[cluster_rows]
    beta = np.zeros(p)
    beta[list(config.beta_support)] = config.beta_values
    eta = X @ beta + alpha[cluster_rows]
    if config.family == GAUSSIAN:
        y = eta + rng.standard_normal(n_obs)
        prevalence = math.nan
    else:
        y = (rng.uniform(size=n_obs) < expit(eta)).astype(float)
        prevalence = float(y.mean())
    dataset = ClusteredDataset(
        y=y, X=X, cluster_id=np.repeat(np.arange(1, m + 1), n), family=config.family)
    return dataset, GroundTruth(beta=beta, alpha=alpha, p0_set=p0_set, mu=mu,
                                prevalence=prevalence)


# ---------------------------------------------------------------------------
# Metrics


def score_selection(fit, truth: GroundTruth, dataset: ClusteredDataset | None = None,
                    B: SyntheticDesign | None = None):
    """(FP, TP) over the covariate block, plus in-sample sensitivity and
    specificity of 1{mu_hat > 1/2} for the binomial family."""
    selected = set(np.flatnonzero(fit.beta).tolist())
    true_support = set(np.flatnonzero(truth.beta).tolist())
    tp = len(selected & true_support)
    fp = len(selected - true_support)
    sens = spec = math.nan
    if dataset is not None and B is not None and dataset.family == BINOMIAL:
        mu_hat = expit(predict(fit, dataset, B))
        pred = mu_hat > 0.5
        pos = dataset.y == 1
        sens = float(np.mean(pred[pos])) if pos.any() else math.nan
        spec = float(np.mean(~pred[~pos])) if (~pos).any() else math.nan
    return fp, tp, sens, spec


def score_estimation(fit, dataset: ClusteredDataset, truth: GroundTruth,
                     B: SyntheticDesign):
    """(RMSE, l1 error, residual ICC) for the gaussian family."""
    y_hat = predict(fit, dataset, B)
    resid = dataset.y - y_hat
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    l1 = float(np.abs(fit.beta - truth.beta).sum())
    if np.allclose(resid, 0.0):
        icc = 0.0
    else:
        cov = estimate_covariance(resid, dataset.cluster_id, kind="clustered")
        denom = cov.tau2 + cov.sigma2
        icc = float(cov.tau2 / denom) if denom > 0 else 0.0
    return rmse, l1, icc


def score_inference(reports, truth: GroundTruth, alpha: float = 0.05):
    """(FPR, power, median CI length) over the tested coefficients.

    FPR is the rejection rate among tested null coefficients, power among
    tested true ones; NaN when a group is empty.
    """
    true_support = set(np.flatnonzero(truth.beta).tolist())
    null_p, true_p, lengths = [], [], []
    for row in reports:
        p_val = row.p_value
        if math.isnan(p_val):
            continue
        (true_p if row.index in true_support else null_p).append(p_val < alpha)
        lengths.append(row.ci_high - row.ci_low)
    fpr = float(np.mean(null_p)) if null_p else math.nan
    power = float(np.mean(true_p)) if true_p else math.nan
    med_len = float(np.median(lengths)) if lengths else math.nan
    return fpr, power, med_len


METRIC_COLUMNS = ["FP", "TP", "RMSE", "l1_error", "residual_ICC",
                  "sensitivity", "specificity", "FPR", "power",
                  "median_CI_length"]


@dataclass
class MetricsRow:
    scenario: str
    method: str
    rep: int
    seed: int
    FP: float = math.nan
    TP: float = math.nan
    RMSE: float = math.nan
    l1_error: float = math.nan
    residual_ICC: float = math.nan
    sensitivity: float = math.nan
    specificity: float = math.nan
    FPR: float = math.nan
    power: float = math.nan
    median_CI_length: float = math.nan


def _selective_rows(result: MethodResult, dataset: ClusteredDataset, mode: str,
                    sigma2: float | None = None):
    fit = result.fit
    targets = [int(l) for l in fit.active_set if l < dataset.n_covariates]
    if not targets:
        return []
    resid = residuals_from_fit(fit, dataset, result.synthetic)
    if mode == "si1":
        est = estimate_covariance(resid, dataset.cluster_id, kind="iid")
        cov = CovarianceModel("iid", sigma2 if sigma2 is not None else est.sigma2)
    else:
        est = estimate_covariance(resid, dataset.cluster_id, kind="clustered")
        cov = est if est.kind == "clustered" else CovarianceModel("iid", est.sigma2)
    Z = result.design.reparameterized()
    event = build_polyhedron(Z, dataset.y, fit, fit.lambda1)
    rows = []
    for l in targets:
        # event coordinates live in the retained-column frame
        pos = np.flatnonzero(result.design.x_columns == l)
        if pos.size != 1 or int(pos[0]) not in event.active_set:
            continue
        try:
            ci = selective_test(event, Z, dataset.y, cov, int(pos[0]),
                                dataset.cluster_id)
        except Exception as exc:  # one bad coordinate should not kill the rep
            log.warning("selective test failed at %d: %s", l, exc)
            continue
        rows.append(replace(ci, index=l))
    return rows


def inference_reports(result: MethodResult, dataset: ClusteredDataset, mode: str,
                      K: int = 10, seed: int = 0,
                      config: SolverConfig | None = None, alpha: float = 0.05):
    """Per-coefficient inference rows for the selected covariates of a fit."""
    if result.trace is not None:
        raise ValueError(
            "post-selection inference does not apply to the iterative fits: "
            "their design is updated in a data-dependent way across refits, "
            "so neither the selection polyhedron nor the debiasing expansion "
            "describes the final estimate; use method shel or gshel")
    fit = result.fit
    targets = [int(l) for l in fit.active_set if l < dataset.n_covariates]
    if mode in ("si1", "si2"):
        if dataset.family != GAUSSIAN:
            raise ValueError("selective inference applies to the gaussian family only")
        return _selective_rows(result, dataset, mode)
    if mode == "debias":
        report = debiased_test_suite(dataset, result.synthetic, fit, targets,
                                     config=config, K=K, seed=seed, alpha=alpha)
        return list(report.rows)
    if mode == "naive":
        return naive_refit_inference(dataset, targets, alpha=alpha)
    raise ValueError(f"unknown inference mode {mode!r}")


def _infra_seed(seed: int, rep: int, role: int) -> int:
    return int(np.random.SeedSequence([seed, rep, role]).generate_state(1)[0] % (2 ** 31))


def run_replication(scenario: DgpConfig, methods, rep: int, base_seed: int,
                    K: int = 10, alpha: float = 0.05,
                    inference: tuple = (), lambda_rule: str = "1se",
                    config: SolverConfig | None = None,
                    n_lambda: int = 60) -> list[MetricsRow]:
    """All metric rows of one replication; raises on unrecoverable failure."""
    data_seed = base_seed + rep
    cfg = replace(scenario, seed=data_seed)
    dataset, truth = generate(cfg)
    rows = []
    anchor: MethodResult | None = None
    for method in methods:
        res = fit_method(dataset, method, alpha=alpha, K=K,
                         seed=_infra_seed(base_seed, rep, 1),
                         config=config, rule=lambda_rule, n_lambda=n_lambda)
        fp, tp, sens, spec = score_selection(res.fit, truth, dataset, res.synthetic)
        row = MetricsRow(scenario=scenario.label(), method=method, rep=rep,
                         seed=data_seed, FP=fp, TP=tp,
                         sensitivity=sens, specificity=spec)
        if dataset.family == GAUSSIAN:
            row.RMSE, row.l1_error, row.residual_ICC = score_estimation(
                res.fit, dataset, truth, res.synthetic)
        rows.append(row)
        if method in ("shel", "gshel"):
            anchor = res
    for mode in inference:
        if anchor is None:
            log.warning("inference %s requested without a shel/gshel fit", mode)
            continue
        reports = inference_reports(anchor, dataset, mode, K=K,
                                    seed=_infra_seed(base_seed, rep, 2),
                                    config=config, alpha=alpha)
        fpr, power, med_len = score_inference(reports, truth, alpha)
        rows.append(MetricsRow(scenario=scenario.label(),
                               method=f"{anchor.method}+{mode}", rep=rep,
                               seed=data_seed, FPR=fpr, power=power,
                               median_CI_length=med_len))
    return rows


def run_study(scenarios, methods, reps: int, seed: int, K: int = 10,
              alpha: float = 0.05, inference: tuple = (),
              lambda_rule: str = "1se", n_jobs: int = 1,
              config: SolverConfig | None = None,
              n_lambda: int = 60) -> pd.DataFrame:
    """Full scenario x method x replication grid as a tidy frame.

    Replication ``r`` draws its data from ``seed + r``; failed replications
    are logged and excluded.  Row order is canonical (scenario, method, rep)
    so a rerun with the same seed is byte-identical regardless of ``n_jobs``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    tasks = [(scn, rep) for scn in scenarios for rep in range(reps)]

    def one(scn, rep):
        try:
            return run_replication(scn, methods, rep, seed, K=K, alpha=alpha,
                                   inference=inference, lambda_rule=lambda_rule,
                                   config=config, n_lambda=n_lambda)
        except Exception as exc:
            log.error("replication %d of %s failed: %s", rep, scn.label(), exc)
            return []

    if n_jobs == 1:
        chunks = [one(scn, rep) for scn, rep in tasks]
    else:
        chunks = Parallel(n_jobs=n_jobs)(delayed(one)(scn, rep) for scn, rep in tasks)
    rows = [asdict(row) for chunk in chunks for row in chunk]
    frame = pd.DataFrame(rows)
    if len(frame):
        frame = frame.sort_values(["scenario", "method", "rep"], kind="stable")
        frame = frame.reset_index(drop=True)
    n_failed = sum(1 for c in chunks if not c)
    if n_failed:
        log.warning("%d replication(s) failed and were excluded", n_failed)
    return frame


def aggregate_study(frame: pd.DataFrame) -> dict:
    """Median / mean / MC standard error per scenario x method x metric."""
    summary: dict = {}
    for (scenario, method), group in frame.groupby(["scenario", "method"]):
        entry = {}
        for metric in METRIC_COLUMNS:
            values = group[metric].to_numpy(dtype=float)
            values = values[~np.isnan(values)]
            if len(values) == 0:
                continue
            entry[metric] = {
                "median": float(np.median(values)),
                "mean": float(np.mean(values)),
                "mc_se": float(np.std(values, ddof=1) / math.sqrt(len(values)))
                if len(values) > 1 else 0.0,
                "n": int(len(values)),
            }
        summary.setdefault(scenario, {})[method] = entry
    return summary
