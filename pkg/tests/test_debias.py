import numpy as np
import pytest
from scipy.stats import kstest, norm

from shel.data import ClusteredDataset, SyntheticDesign
from shel.debias import (
    DebiasError,
    cluster_variance,
    debias,
    debiased_test_suite,
    naive_refit_inference,
    nodewise_fit,
    score_vector,
    working_variance,
)
from shel.estimators import build_design
from shel.solver import SolverConfig, fit_gaussian, lambda_max
from tests.conftest import balanced_ids


def iid_dataset(seed=0, m=50, n=4, p=6, beta=None):
    rng = np.random.default_rng(seed)
    N = m * n
    X = rng.normal(size=(N, p))
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = X @ beta + rng.normal(size=N)
    return ClusteredDataset(y=y, X=X, cluster_id=balanced_ids(m, n))


class TestNodewise:
    def test_orthogonal_columns_give_unit_direction(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(80, 4))
        q, _ = np.linalg.qr(raw)
        ds = ClusteredDataset(y=np.zeros(80), X=q * np.sqrt(80),
                              cluster_id=balanced_ids(20, 4))
        B = SyntheticDesign.empty(80)
        design = build_design(ds, B)
        v = np.ones(80)
        a = nodewise_fit(design, v, B, ds.cluster_id, 0, K=4, seed=0, n_lambda=15)
        sigma2 = 1.0 / a[0]
        np.testing.assert_allclose(a[1:], 0.0, atol=1e-8)
        resid = design.W[:, 0] - design.W[:, 0].mean()
        assert sigma2 == pytest.approx(np.mean(resid ** 2), rel=1e-6)

    def test_gaussian_working_variance_is_identity(self):
        ds = iid_dataset(1)
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.1)
        np.testing.assert_array_equal(working_variance(fit, design), np.ones(ds.n_obs))

    def test_approximates_known_precision_matrix(self):
        # 5-block equicorrelated precision plus one free column, N = 2000
        rng = np.random.default_rng(3)
        m, n = 500, 4
        N = m * n
        theta_block = 0.5 * np.eye(5) + 0.5 * np.ones((5, 5))
        sigma_block = np.linalg.inv(theta_block)
        chol = np.linalg.cholesky(sigma_block)
        X = np.empty((N, 6))
        X[:, :5] = rng.normal(size=(N, 5)) @ chol.T
        X[:, 5] = rng.normal(size=N)
        theta_full = np.zeros((6, 6))
        theta_full[:5, :5] = theta_block
        theta_full[5, 5] = 1.0
        ds = ClusteredDataset(y=np.zeros(N), X=X, cluster_id=balanced_ids(m, n))
        B = SyntheticDesign.empty(N)
        design = build_design(ds, B)
        v = np.ones(N)
        scales = design.column_scales
        for l in (0, 5):
            a = nodewise_fit(design, v, B, ds.cluster_id, l, K=5, seed=0, n_lambda=25)
            want = (np.diag(scales) @ theta_full @ np.diag(scales))[:, l]
            rel = np.linalg.norm(a - want) / np.linalg.norm(want)
            assert rel < 0.2

    def test_collinearity_detected(self):
        # a duplicated column reproduces the response exactly once the
        # penalty is allowed to vanish
        rng = np.random.default_rng(4)
        X = rng.normal(size=(40, 3))
        X[:, 2] = X[:, 1]
        ds = ClusteredDataset(y=np.zeros(40), X=X, cluster_id=balanced_ids(10, 4))
        B = SyntheticDesign.empty(40)
        design = build_design(ds, B)
        with pytest.raises(DebiasError, match="collinearity"):
            nodewise_fit(design, np.ones(40), B, ds.cluster_id, 1, K=4, seed=0,
                         n_lambda=30, rule="min", ratio_min=1e-14)


class TestDebias:
    def test_unpenalized_full_rank_fixed_point(self):
        # at lambda = 0 the score vanishes, so the correction is exactly zero
        ds = iid_dataset(5, m=30, p=4, beta=[1.0, 0.0, -0.5, 0.2])
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.0, SolverConfig(max_iters=100000))
        a = np.zeros(design.n_cols)
        a[1] = 2.0
        a[0] = -0.3
        got = debias(fit, ds, B, a, 1, design)
        assert got == pytest.approx(fit.beta[1], abs=1e-8)

    def test_null_fit_closed_form(self):
        ds = iid_dataset(6, m=40, p=3)
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        lam = lambda_max(design, ds.y) * 1.01
        fit = fit_gaussian(design, ds.y, lam)
        assert fit.active_set.size == 0
        sigma2 = 0.9
        a = np.zeros(design.n_cols)
        a[0] = 1.0 / sigma2
        got = debias(fit, ds, B, a, 0, design)
        w0 = design.W[:, 0]
        want = (w0 @ (ds.y - ds.y.mean())) / (ds.n_obs * sigma2) / design.column_scales[0]
        assert got == pytest.approx(want, rel=1e-10)

    def test_ols_limit_low_dimension(self):
        ds = iid_dataset(7, m=50, p=4, beta=[0.8, -0.3, 0.0, 0.4])
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 1e-9, SolverConfig(max_iters=200000))
        Xd = np.hstack([np.ones((ds.n_obs, 1)), ds.X])
        ols = np.linalg.lstsq(Xd, ds.y, rcond=None)[0][1:]
        v = working_variance(fit, design)
        for l in range(4):
            a = nodewise_fit(design, v, B, ds.cluster_id, l, K=5, seed=0, n_lambda=15)
            got = debias(fit, ds, B, a, l, design)
            assert got == pytest.approx(ols[l], abs=1e-6)


class TestClusterVariance:
    def test_singletons_reduce_to_observation_level(self):
        rng = np.random.default_rng(8)
        N = 60
        ds = ClusteredDataset(y=rng.normal(size=N), X=rng.normal(size=(N, 3)),
                              cluster_id=np.arange(1, N + 1))
        B = SyntheticDesign.empty(N)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.1)
        a = np.zeros(design.n_cols)
        a[0] = 1.0
        v_hat, phi = cluster_variance(ds, fit, a, design)
        resid = ds.y - design.W @ fit.theta_scaled - fit.intercept_scaled
        obs_phi = design.W[:, 0] * resid
        assert v_hat == pytest.approx(np.mean(obs_phi ** 2), rel=1e-12)

    def test_duplicating_clusters_halves_variance_of_mean(self):
        ds = iid_dataset(9, m=25, p=3)
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.1)
        a = np.zeros(design.n_cols)
        a[1] = 1.5
        v1, phi1 = cluster_variance(ds, fit, a, design)
        dup = ClusteredDataset(
            y=np.concatenate([ds.y, ds.y]),
            X=np.vstack([ds.X, ds.X]),
            cluster_id=np.concatenate([ds.cluster_id, ds.cluster_id + ds.n_clusters]))
        dup_design = build_design(dup, SyntheticDesign.empty(dup.n_obs))
        dup_fit = fit_gaussian(dup_design, dup.y, 0.1)
        v2, phi2 = cluster_variance(dup, dup_fit, a, dup_design)
        assert v2 == pytest.approx(v1, rel=1e-8)
        se1 = np.sqrt(v1 / ds.n_clusters)
        se2 = np.sqrt(v2 / dup.n_clusters)
        assert se2 == pytest.approx(se1 / np.sqrt(2), rel=1e-8)

    def test_invariant_to_cluster_relabeling(self):
        ds = iid_dataset(10, m=20, p=3)
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.1)
        a = np.zeros(design.n_cols)
        a[2] = 1.0
        v1, _ = cluster_variance(ds, fit, a, design)
        relabeled = ClusteredDataset(y=ds.y, X=ds.X,
                                     cluster_id=ds.n_clusters + 1 - ds.cluster_id)
        from shel.data import canonicalize
        relabeled = canonicalize(relabeled)
        design2 = build_design(relabeled, SyntheticDesign.empty(ds.n_obs))
        fit2 = fit_gaussian(design2, relabeled.y, 0.1)
        v2, _ = cluster_variance(relabeled, fit2, a, design2)
        assert v2 == pytest.approx(v1, rel=1e-10)

    def test_cluster_level_matches_observation_level_under_iid(self):
        # no cluster effect: V_hat over the average cluster size agrees with
        # the observation-level variance of the scores
        ds = iid_dataset(11, m=400, n=4, p=5, beta=[0.5, 0, 0, 0, 0])
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.05)
        a = np.zeros(design.n_cols)
        a[0] = 1.0
        v_cluster, _ = cluster_variance(ds, fit, a, design)
        resid = ds.y - design.W @ fit.theta_scaled - fit.intercept_scaled
        obs_phi = design.W[:, 0] * resid
        n_tilde = ds.n_obs / ds.n_clusters
        v_obs = float(np.mean(obs_phi ** 2))
        assert abs((v_cluster / n_tilde) / v_obs - 1.0) < 0.10


class TestSuite:
    def test_failure_does_not_abort(self):
        # a constant column is dropped from the design, so targeting it fails
        # while the other target still gets a proper row
        rng = np.random.default_rng(12)
        X = rng.normal(size=(60, 4))
        X[:, 3] = 2.0
        with pytest.warns(UserWarning, match="constant"):
            ds = ClusteredDataset(y=rng.normal(size=60), X=X,
                                  cluster_id=balanced_ids(15, 4))
            B = SyntheticDesign.empty(60)
            design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.05)
        report = debiased_test_suite(ds, B, fit, [0, 3], K=5, seed=0)
        assert len(report.rows) == 2
        flags = {r.index: r.flags for r in report.rows}
        assert flags[3].startswith("failed:")
        assert flags[0] == ""

    def test_report_invariants_and_csv(self, tmp_path):
        ds = iid_dataset(13, m=40, p=5, beta=[1.0, 0, 0, 0, 0])
        B = SyntheticDesign.empty(ds.n_obs)
        design = build_design(ds, B)
        fit = fit_gaussian(design, ds.y, 0.08)
        report = debiased_test_suite(ds, B, fit, [0, 1], K=5, seed=0)
        for row in report.rows:
            assert row.v_hat >= 0
            mid = 0.5 * (row.ci_low + row.ci_high)
            assert mid == pytest.approx(row.beta_debiased, abs=1e-10)
            assert row.a_l1_norm > 0
        path = tmp_path / "debias.csv"
        report.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("index,beta_penalized,beta_debiased,v_hat,se,z")

    def test_z_statistics_standard_normal_under_null(self):
        # singleton clusters: the per-cluster sums are single scores, so the
        # z-statistics follow N(0,1) under the global null.  (With larger
        # clusters the sqrt(m) normalization is deliberately conservative;
        # see cluster_variance.)  The design is fixed and y redrawn; the
        # nodewise directions are response-free so they are computed once.
        rng = np.random.default_rng(14)
        N, p = 320, 40
        X = rng.normal(size=(N, p))
        cid = np.arange(1, N + 1)
        base = ClusteredDataset(y=np.zeros(N), X=X, cluster_id=cid)
        B = SyntheticDesign.empty(N)
        design = build_design(base, B)
        lam = 1.2 * np.sqrt(np.log(p) / N)
        targets = [0, 7, 19]
        v = np.ones(N)
        a_vectors = {l: nodewise_fit(design, v, B, cid, l, K=5, seed=0, n_lambda=20)
                     for l in targets}
        zs = []
        for rep in range(700):
            y = np.random.default_rng(10_000 + rep).normal(size=N)
            fit = fit_gaussian(design, y, lam)
            ds = ClusteredDataset(y=y, X=X, cluster_id=cid)
            score = score_vector(fit, design, y)
            for l in targets:
                a = a_vectors[l]
                corrected = fit.theta_scaled[l] + float(a @ score)
                v_hat, _ = cluster_variance(ds, fit, a, design)
                zs.append(np.sqrt(N) * corrected / np.sqrt(v_hat))
        stat = kstest(np.asarray(zs), "norm").statistic
        assert stat < 0.06


class TestNaiveRefit:
    def test_gaussian_recovers_truth(self):
        rng = np.random.default_rng(15)
        m, n = 200, 4
        N = m * n
        cid = balanced_ids(m, n)
        X = rng.normal(size=(N, 2))
        y = 1.0 * X[:, 0] - 0.5 * X[:, 1] + np.repeat(
            np.sqrt(0.5) * rng.normal(size=m), n) + rng.normal(size=N)
        ds = ClusteredDataset(y=y, X=X, cluster_id=cid)
        rows = naive_refit_inference(ds, [0, 1])
        assert rows[0].estimate == pytest.approx(1.0, abs=0.1)
        assert rows[1].estimate == pytest.approx(-0.5, abs=0.1)
        assert rows[0].p_value < 1e-6

    def test_binomial_sandwich(self):
        rng = np.random.default_rng(16)
        from scipy.special import expit
        m, n = 150, 4
        N = m * n
        cid = balanced_ids(m, n)
        X = rng.normal(size=(N, 2))
        eta = 1.2 * X[:, 0] + np.repeat(rng.normal(size=m), n)
        y = (rng.uniform(size=N) < expit(eta)).astype(float)
        ds = ClusteredDataset(y=y, X=X, cluster_id=cid, family="binomial")
        rows = naive_refit_inference(ds, [0, 1])
        assert rows[0].p_value < 1e-4
        assert rows[1].p_value > 0.01

    def test_empty_targets(self, small_clustered):
        assert naive_refit_inference(small_clustered, []) == []


class TestCoverageAndComposition:
    def test_debiased_ci_covers_true_coefficients(self):
        # endogenous clustered data; the 95% intervals for the six true
        # coefficients should cover at roughly the nominal rate
        from shel.estimators import fit_method
        from shel.simulate import DgpConfig, generate
        covered = 0
        total = 0
        for rep in range(40):
            cfg = DgpConfig(m=100, n=4, p=60, p0_true=30,
                            dependence="endogenous", family="gaussian",
                            seed=4000 + rep)
            ds, truth = generate(cfg)
            res = fit_method(ds, "shel", alpha=0.05, K=10, seed=rep)
            targets = np.flatnonzero(truth.beta)
            report = debiased_test_suite(ds, res.synthetic, res.fit, targets,
                                         K=10, seed=rep)
            for row in report.rows:
                if np.isnan(row.ci_low):
                    continue
                covered += row.ci_low <= truth.beta[row.index] <= row.ci_high
                total += 1
        rate = covered / total
        assert total >= 200
        # the cluster-level normalization is conservative for n > 1, so
        # coverage sits at or above the nominal level
        assert 0.93 <= rate <= 1.0

    def test_gshel_debias_composition(self):
        # binomial fit + debiased tests over its selected covariates
        from scipy.special import expit as sigmoid

        from shel.estimators import fit_method
        rng = np.random.default_rng(21)
        m, n, p = 80, 4, 20
        N = m * n
        cid = balanced_ids(m, n)
        X = rng.normal(size=(N, p))
        X[:, 2] += np.repeat(rng.normal(size=m), n)
        eta = 1.5 * X[:, 0] - 1.0 * X[:, 4] + np.repeat(0.5 * rng.normal(size=m), n)
        y = (rng.uniform(size=N) < sigmoid(eta)).astype(float)
        ds = ClusteredDataset(y=y, X=X, cluster_id=cid, family="binomial")
        res = fit_method(ds, "gshel", alpha=0.05, K=5, seed=0)
        targets = [int(l) for l in res.fit.active_set if l < p]
        assert targets
        report = debiased_test_suite(ds, res.synthetic, res.fit, targets,
                                     K=5, seed=0)
        by_index = {r.index: r for r in report.rows}
        assert by_index[0].p_value < 0.05
        assert all(r.v_hat >= 0 or np.isnan(r.v_hat) for r in report.rows)
