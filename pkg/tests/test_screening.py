import numpy as np
import pytest
from scipy.stats import ncf

from shel.data import ClusteredDataset, DataError, check_cluster_constant
from shel.screening import (
    TEST_ANOVA,
    TEST_CONSTANT,
    TEST_LRT,
    anova_heterogeneity,
    anova_pvalues,
    binary_heterogeneity,
    binary_heterogeneity_detail,
    build_synthetic_design,
    screen,
)
from tests.conftest import balanced_ids


class TestAnova:
    def test_cluster_constant_spread_means(self):
        cid = balanced_ids(10, 4)
        x = np.repeat(np.linspace(0, 10, 10), 4)
        assert anova_heterogeneity(x, cid) < 1e-30

    def test_constant_everywhere_p_one(self):
        cid = balanced_ids(10, 4)
        assert anova_heterogeneity(np.full(40, 3.3), cid) == 1.0

    def test_size_at_level(self):
        # 2000 iid-normal columns at once: rejection rate ~ alpha
        m, n, reps = 50, 4, 2000
        cid = balanced_ids(m, n)
        X = np.random.default_rng(0).normal(size=(m * n, reps))
        pvals = anova_pvalues(X, cid)
        rate = float(np.mean(pvals < 0.05))
        mc_se = np.sqrt(0.05 * 0.95 / reps)
        assert abs(rate - 0.05) < 2 * mc_se + 1e-12

    def test_all_singletons_error(self):
        with pytest.raises(DataError, match="singleton"):
            anova_heterogeneity(np.arange(5.0), np.arange(1, 6))

    def test_needs_two_clusters(self):
        with pytest.raises(DataError, match="two clusters"):
            anova_heterogeneity(np.arange(4.0), np.ones(4, dtype=np.int64))


class TestBinaryHeterogeneity:
    def test_pure_cluster_split_rejects(self):
        m, n = 40, 4
        cid = balanced_ids(m, n)
        x = np.repeat((np.arange(m) % 2).astype(float), n)
        assert binary_heterogeneity(x, cid) < 1e-10

    def test_lrt_nonnegative_and_p_in_unit(self):
        rng = np.random.default_rng(5)
        cid = balanced_ids(30, 4)
        for _ in range(20):
            x = (rng.uniform(size=120) < rng.uniform(0.2, 0.8)).astype(float)
            if x.min() == x.max():
                continue
            p = binary_heterogeneity(x, cid)
            assert 0.0 <= p <= 1.0

    def test_boundary_size_not_anticonservative(self):
        m, n, reps = 50, 4, 2000
        cid = balanced_ids(m, n)
        rej = 0
        used = 0
        for r in range(reps):
            x = (np.random.default_rng(r).uniform(size=m * n) < 0.5).astype(float)
            p, kind = binary_heterogeneity_detail(x, cid)
            used += 1
            rej += p < 0.05
        rate = rej / used
        mc_se = np.sqrt(0.05 * 0.95 / used)
        assert rate <= 0.05 + 2 * mc_se

    def test_rejects_nonbinary(self):
        cid = balanced_ids(5, 2)
        with pytest.raises(DataError, match="0/1"):
            binary_heterogeneity(np.linspace(0, 2, 10), cid)

    def test_rejects_single_level(self):
        cid = balanced_ids(5, 2)
        with pytest.raises(DataError, match="both levels"):
            binary_heterogeneity(np.ones(10), cid)


class TestScreen:
    def test_alpha_zero_empty_design(self, small_clustered):
        design = build_synthetic_design(small_clustered, 0.0)
        assert design.n_synthetic == 0

    def test_cluster_mean_column_value(self):
        # two clusters, the screened column carries the within-cluster means
        cid = np.array([1, 1, 2, 2, 2])
        x = np.array([1.0, 1.0, 3.0, 3.0, 3.0])
        filler = np.random.default_rng(0).normal(size=(5, 1))
        ds = ClusteredDataset(y=np.zeros(5), X=np.hstack([x[:, None], filler]),
                              cluster_id=cid)
        design = build_synthetic_design(ds, 0.5)
        assert 0 in design.source_column
        col = design.B[:, list(design.source_column).index(0)]
        np.testing.assert_allclose(col, [1, 1, 3, 3, 3])

    def test_power_vs_noncentral_f_oracle(self):
        # unit-variance cluster means vs unit within-noise, n = 4
        m, n, p0_true = 100, 4, 50
        rng = np.random.default_rng(7)
        cid = balanced_ids(m, n)
        mu = rng.normal(size=(m, p0_true))
        X = np.repeat(mu, n, axis=0) + rng.normal(size=(m * n, p0_true))
        pvals = anova_pvalues(X, cid)
        recovered = float(np.mean(pvals < 0.05))
        assert recovered >= 0.95
        # oracle: conditional noncentral-F power per column
        from scipy.stats import f as f_dist
        crit = f_dist.isf(0.05, m - 1, m * n - m)
        ncp = n * ((mu - mu.mean(axis=0)) ** 2).sum(axis=0)
        oracle_power = ncf.sf(crit, m - 1, m * n - m, ncp).mean()
        assert oracle_power >= 0.95
        assert abs(recovered - oracle_power) < 0.05

    def test_invariant_within_cluster_row_order(self, small_clustered):
        ds = small_clustered
        rng = np.random.default_rng(3)
        perm = np.concatenate([
            rng.permutation(np.flatnonzero(ds.cluster_id == c))
            for c in range(1, ds.n_clusters + 1)])
        shuffled = ClusteredDataset(y=ds.y[perm], X=ds.X[perm],
                                    cluster_id=ds.cluster_id[perm])
        d1, _ = screen(ds, 0.1)
        d2, _ = screen(shuffled, 0.1)
        np.testing.assert_array_equal(d1.source_column, d2.source_column)
        np.testing.assert_allclose(d1.pvalues, d2.pvalues, rtol=1e-10)

    def test_monotone_in_alpha(self, small_clustered):
        cols = [set(build_synthetic_design(small_clustered, a).source_column.tolist())
                for a in (0.2, 0.1, 0.05, 0.01)]
        for bigger, smaller in zip(cols, cols[1:]):
            assert smaller <= bigger

    def test_b_exactly_cluster_constant(self, small_clustered):
        design = build_synthetic_design(small_clustered, 0.5)
        assert design.n_synthetic > 0
        assert check_cluster_constant(design.B, small_clustered.cluster_id)

    def test_report_covers_all_columns(self, small_clustered):
        _, report = screen(small_clustered, 0.05)
        assert len(report.index) == small_clustered.n_covariates
        assert all(t == TEST_ANOVA for t in report.test)
        assert np.all((report.pvalue >= 0) & (report.pvalue <= 1))

    def test_binary_and_constant_columns_routed(self):
        rng = np.random.default_rng(9)
        m, n = 30, 4
        cid = balanced_ids(m, n)
        X = np.empty((m * n, 3))
        X[:, 0] = rng.normal(size=m * n)
        X[:, 1] = np.repeat((np.arange(m) % 2).astype(float), n)  # binary heterogeneous
        X[:, 2] = 1.25
        ds = ClusteredDataset(y=rng.normal(size=m * n), X=X, cluster_id=cid)
        design, report = screen(ds, 0.05)
        assert report.test[0] == TEST_ANOVA
        assert report.test[1] == TEST_LRT
        assert report.test[2] == TEST_CONSTANT
        assert report.pvalue[2] == 1.0
        assert 1 in design.source_column

    def test_report_csv(self, small_clustered, tmp_path):
        _, report = screen(small_clustered, 0.05)
        path = tmp_path / "screen.csv"
        report.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "covariate,test,pvalue,selected"
        assert len(lines) == small_clustered.n_covariates + 1

    def test_alpha_out_of_range(self, small_clustered):
        with pytest.raises(ValueError):
            screen(small_clustered, 1.0)
