import numpy as np
import pytest

from shel.data import ClusteredDataset


@pytest.fixture
def small_clustered():
    """20 clusters x 4, 8 covariates, one heterogeneous, gaussian response."""
    rng = np.random.default_rng(11)
    m, n, p = 20, 4, 8
    N = m * n
    cid = np.repeat(np.arange(1, m + 1), n)
    X = rng.normal(size=(N, p))
    X[:, 2] += np.repeat(rng.normal(size=m), n)
    beta = np.zeros(p)
    beta[[0, 4]] = [1.0, -0.8]
    y = X @ beta + np.repeat(rng.normal(size=m), n) + 0.5 * rng.normal(size=N)
    return ClusteredDataset(y=y, X=X, cluster_id=cid)


def balanced_ids(m, n):
    return np.repeat(np.arange(1, m + 1), n)
