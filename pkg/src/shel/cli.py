"""Batch front-end: fit, simulate, and infer from YAML configs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure; messages name the failing stage.  All randomness flows from the
config seed (optionally overridden by --seed), so identical invocations
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import yaml

from .data import BINOMIAL, DataError, FAMILIES, GAUSSIAN, load_csv
from .debias import DebiasError
from .estimators import METHODS, fit_method
from .screening import screen
from .selective import InferenceError
from .simulate import (
    DgpConfig,
    aggregate_study,
    inference_reports,
    run_study,
)
from .solver import SolverConfig, SolverError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PAPER_SCALE = {"m": 400, "p": 1000}
PAPER_REPS = 200


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return cfg


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config key {key!r} is required")
    return cfg[key]


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    input_path = _require(cfg, "input")
    response = _require(cfg, "response")
    cluster = _require(cfg, "cluster")
    family = cfg.get("family", GAUSSIAN)
    method = cfg.get("method", "shel")
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    K = int(cfg.get("K", 10))
    alpha = float(cfg.get("alpha", 0.05))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    rule = str(cfg.get("lambda_rule", "1se"))
    n_lambda = int(cfg.get("n_lambda", 60))
    inference = cfg.get("inference", "none")
    out_dir = args.out_dir or cfg.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    dataset, covariate_names = load_csv(input_path, response, cluster, family)
    solver_config = SolverConfig()
    synthetic, report = screen(dataset, alpha)
    result = fit_method(dataset, method, alpha=alpha, K=K, seed=seed,
                        config=solver_config, rule=rule, n_lambda=n_lambda,
                        synthetic=synthetic if method != "lasso" else None)
    report.write_csv(os.path.join(out_dir, "screening.csv"))
    effective = {
        "input": str(input_path), "response": response, "cluster": cluster,
        "family": family, "method": method, "K": K, "alpha": alpha,
        "seed": seed, "lambda_rule": rule, "n_lambda": n_lambda,
        "inference": inference, "out_dir": str(out_dir),
    }
    fit = result.fit
    payload = {
        "method": method,
        "family": family,
        "lambda1": fit.lambda1,
        "lambda2": fit.lambda2,
        "intercept": fit.intercept,
        "beta": fit.beta,
        "gamma": fit.gamma,
        "active_set": fit.active_set,
        "signs": fit.signs.astype(int),
        "converged": fit.converged,
        "n_iters": fit.n_iters,
        "screening": {
            "alpha": alpha,
            "source_column": result.synthetic.source_column,
            "pvalues": result.synthetic.pvalues,
        },
        "cv": {
            "lambda_min": result.cv.lambda_min,
            "lambda_1se": result.cv.lambda_1se,
            "lambdas": result.cv.lambdas,
            "cv_mean": result.cv.cv_mean,
            "cv_se": result.cv.cv_se,
            "fold_assignment": result.cv.fold_assignment,
        },
        "iterations": None if result.trace is None else {
            "trace": result.trace.trace,
            "e_thr": result.trace.e_thr,
            "n_iterations": result.trace.n_iterations,
            "converged": result.trace.converged,
        },
        "data": {
            "n_obs": dataset.n_obs, "n_clusters": dataset.n_clusters,
            "p": dataset.n_covariates, "p0": result.synthetic.n_synthetic,
        },
        "covariates": covariate_names,
        "config": effective,
    }
    _write_json(os.path.join(out_dir, "fit.json"), payload)
    if inference and inference != "none":
        code = _run_inference(result, dataset, inference, K, seed, alpha, out_dir)
        if code != 0:
            return code
    print(f"fit written to {os.path.join(out_dir, 'fit.json')}")
    return 0


def _run_inference(result, dataset, mode: str, K: int, seed: int,
                   alpha: float, out_dir: str) -> int:
    if mode not in ("si1", "si2", "debias"):
        raise ConfigError(f"unknown inference mode {mode!r}")
    if result.trace is not None:
        raise ConfigError(
            "post-selection inference is not available for the iterative "
            "methods (ishel1/ishel2/igshel): the design is updated "
            "data-dependently across refits; fit with shel or gshel instead")
    if mode in ("si1", "si2") and dataset.family != GAUSSIAN:
        raise ConfigError(
            "selective inference (si1/si2) requires the gaussian family: the "
            "polyhedral pivot is exact only for gaussian responses; use "
            "inference mode 'debias' for binomial fits")
    rows = inference_reports(result, dataset, mode, K=K, seed=seed, alpha=alpha)
    path = os.path.join(out_dir, "inference.csv")
    if mode == "debias":
        from .debias import DebiasReport
        DebiasReport(rows=tuple(rows)).write_csv(path)
    else:
        from .selective import estimate_covariance, residuals_from_fit
        resid = residuals_from_fit(result.fit, dataset, result.synthetic)
        cov = estimate_covariance(resid, dataset.cluster_id,
                                  kind="iid" if mode == "si1" else "clustered")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "estimate", "L", "U", "pivot", "p_value",
                             "ci_low", "ci_high", "covariance_kind",
                             "sigma2", "tau2", "flags"])
            for r in rows:
                writer.writerow([r.index, repr(r.estimate), repr(r.lower),
                                 repr(r.upper), repr(r.pivot), repr(r.p_value),
                                 repr(r.ci_low), repr(r.ci_high),
                                 r.covariance_kind, repr(cov.sigma2),
                                 repr(cov.tau2), r.flags])
    print(f"inference written to {path}")
    return 0


def parse_simulation_config(cfg: dict, paper_scale: bool):
    """Scenario grid plus study knobs; --paper-scale overrides m, p, reps."""
    raw_scenarios = _require(cfg, "scenarios")
    if not isinstance(raw_scenarios, list) or not raw_scenarios:
        raise ConfigError("scenarios must be a non-empty list")
    methods = cfg.get("methods", ["lasso", "shel"])
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    scenarios = []
    for raw in raw_scenarios:
        if not isinstance(raw, dict):
            raise ConfigError("each scenario must be a mapping")
        body = dict(raw)
        if paper_scale:
            body.update(PAPER_SCALE)
        try:
            scenarios.append(DgpConfig(**body))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario {raw}: {exc}") from exc
    reps = PAPER_REPS if paper_scale else int(cfg.get("reps", 50))
    return scenarios, methods, reps


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    scenarios, methods, reps = parse_simulation_config(cfg, args.paper_scale)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    inference = tuple(cfg.get("inference", []))
    K = int(cfg.get("K", 10))
    alpha = float(cfg.get("alpha", 0.05))
    rule = str(cfg.get("lambda_rule", "1se"))
    n_lambda = int(cfg.get("n_lambda", 60))
    out_dir = args.out_dir or cfg.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    frame = run_study(scenarios, methods, reps=reps, seed=seed, K=K,
                      alpha=alpha, inference=inference, lambda_rule=rule,
                      n_jobs=args.threads, n_lambda=n_lambda)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    frame.to_csv(metrics_path, index=False)
    effective = {
        "scenarios": [asdict(s) for s in scenarios], "methods": list(methods),
        "inference": list(inference), "reps": reps, "seed": seed, "K": K,
        "alpha": alpha, "lambda_rule": rule, "n_lambda": n_lambda,
        "paper_scale": bool(args.paper_scale), "out_dir": str(out_dir),
    }
    _write_json(os.path.join(out_dir, "summary.json"),
                {"config": effective, "summary": aggregate_study(frame)})
    print(f"metrics written to {metrics_path}")
    return 0


def cmd_infer(args) -> int:
    try:
        with open(args.fit) as fh:
            fit_payload = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"fit file not found: {args.fit}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"fit file is not valid JSON: {exc}") from exc
    mode = args.mode
    cfg = fit_payload.get("config", {})
    family = fit_payload.get("family", GAUSSIAN)
    if mode in ("si1", "si2") and family == BINOMIAL:
        raise ConfigError(
            "selective inference (si1/si2) requires the gaussian family: the "
            "polyhedral pivot is exact only for gaussian responses; use "
            "mode 'debias' for binomial fits")
    dataset, _ = load_csv(args.data, cfg["response"], cfg["cluster"], family)
    out_dir = args.out_dir or cfg.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    result = fit_method(dataset, fit_payload["method"],
                        alpha=float(cfg.get("alpha", 0.05)),
                        K=int(cfg.get("K", 10)), seed=seed,
                        rule=str(cfg.get("lambda_rule", "1se")),
                        n_lambda=int(cfg.get("n_lambda", 60)))
    stored = np.asarray(fit_payload["active_set"], dtype=int)
    if not np.array_equal(stored, result.fit.active_set):
        print("warning: refit active set differs from the stored fit "
              "(data or config changed?)", file=sys.stderr)
    return _run_inference(result, dataset, mode, int(cfg.get("K", 10)),
                          seed, float(cfg.get("alpha", 0.05)), out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shel",
        description="Synthetic heterogeneous-effects lasso for clustered data")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="screen, cross-validate, and fit from a CSV")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_fit.add_argument("--out-dir", default=None)
    p_fit.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run a scenario-grid study")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out-dir", default=None)
    p_sim.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_sim.add_argument("--paper-scale", action="store_true",
                       help="use m=400, p=1000, 200 replications")
    p_sim.set_defaults(func=cmd_simulate)

    p_inf = sub.add_parser("infer", help="post-selection inference for a stored fit")
    p_inf.add_argument("--fit", required=True, help="fit.json from `shel fit`")
    p_inf.add_argument("--data", required=True, help="the CSV the fit was made from")
    p_inf.add_argument("--mode", required=True, choices=["si1", "si2", "debias"])
    p_inf.add_argument("--out-dir", default=None)
    p_inf.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p_inf.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, InferenceError, DebiasError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
