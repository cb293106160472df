"""Clustered data containers and the stacked penalized design.

The canonical layout keeps rows of the same cluster contiguous with labels
relabeled to 1..m in order of first appearance; every downstream routine
(fold construction, cluster sums, polyhedral inference) relies on it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

GAUSSIAN = "gaussian"
BINOMIAL = "binomial"
FAMILIES = (GAUSSIAN, BINOMIAL)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class ClusteredDataset:
    """Responses, covariates, and integer cluster labels.

    ``y`` is real for the gaussian family and {0,1} for binomial.  Labels may
    be arbitrary integers on input; :func:`canonicalize` maps them to 1..m
    with contiguous rows.
    """

    y: np.ndarray
    X: np.ndarray
    cluster_id: np.ndarray
    family: str = GAUSSIAN

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        cid = np.asarray(self.cluster_id)
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        if y.ndim != 1 or y.shape[0] != X.shape[0] or cid.shape[0] != X.shape[0]:
            raise DataError("y, X, cluster_id must share the row count")
        if y.shape[0] == 0:
            raise DataError("empty dataset")
        if not np.issubdtype(cid.dtype, np.integer):
            raise DataError("cluster_id must be integer-valued")
        if np.isnan(y).any() or np.isnan(X).any():
            raise DataError("NaN in y or X")
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}")
        if self.family == BINOMIAL and not np.isin(y, (0.0, 1.0)).all():
            raise DataError("binomial responses must be exactly 0 or 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "cluster_id", cid.astype(np.int64))

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.cluster_id).shape[0])

    def cluster_sizes(self) -> np.ndarray:
        """Sizes n_i in label order (requires canonical labels 1..m)."""
        return np.bincount(self.cluster_id, minlength=self.n_clusters + 1)[1:]

    def is_canonical(self) -> bool:
        cid = self.cluster_id
        first = {}
        expected = 0
        for c in cid:
            c = int(c)
            if c not in first:
                expected += 1
                if c != expected:
                    return False
                first[c] = True
        # contiguity: label changes only at first appearances
        changes = np.count_nonzero(np.diff(cid) != 0)
        return changes == len(first) - 1

    def require_canonical(self):
        """Guard for routines that index clusters by label or block layout."""
        if not self.is_canonical():
            raise DataError(
                "cluster labels must be canonical (1..m, contiguous rows); "
                "pass the dataset through canonicalize() first")


def canonicalize(dataset: ClusteredDataset) -> ClusteredDataset:
    """Relabel clusters to 1..m in first-appearance order and group rows.

    Rows within a cluster keep their relative order (stable).  Idempotent:
    a canonical dataset is returned unchanged.  The applied row permutation
    is available via :func:`canonical_permutation`.
    """
    perm, labels = canonical_permutation(dataset.cluster_id)
    if dataset.is_canonical():
        return dataset
    return ClusteredDataset(
        y=dataset.y[perm],
        X=dataset.X[perm],
        cluster_id=labels[perm],
        family=dataset.family,
    )


def canonical_permutation(cluster_id: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row permutation and new labels realizing the canonical layout.

    Returns ``(perm, labels)`` where ``labels`` maps each original row to its
    new 1..m label and ``perm`` stably sorts rows by that label.
    """
    cid = np.asarray(cluster_id)
    _, first_pos, inverse = np.unique(cid, return_index=True, return_inverse=True)
    # rank unique labels by first appearance
    order = np.argsort(first_pos, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(1, len(order) + 1)
    labels = rank[inverse].astype(np.int64)
    perm = np.argsort(labels, kind="stable")
    return perm, labels


@dataclass(frozen=True)
class SyntheticDesign:
    """Cluster-constant matrix B with screening provenance.

    ``B`` replicates, over each cluster's rows, a per-cluster summary of the
    screened covariates (cluster means).  ``source_column`` gives the 0-based
    covariate index that produced each column.
    """

    B: np.ndarray
    source_column: np.ndarray
    pvalues: np.ndarray
    alpha: float

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        src = np.asarray(self.source_column, dtype=np.int64)
        pv = np.asarray(self.pvalues, dtype=float)
        if B.ndim != 2 or B.shape[1] != src.shape[0] or src.shape[0] != pv.shape[0]:
            raise DataError("B, source_column, pvalues are inconsistent")
        if len(np.unique(src)) != len(src):
            raise DataError("source_column entries must be distinct")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "source_column", src)
        object.__setattr__(self, "pvalues", pv)

    @property
    def n_synthetic(self) -> int:
        return self.B.shape[1]

    @staticmethod
    def empty(n_obs: int, alpha: float = 0.05) -> "SyntheticDesign":
        return SyntheticDesign(
            B=np.zeros((n_obs, 0)),
            source_column=np.zeros(0, dtype=np.int64),
            pvalues=np.zeros(0),
            alpha=alpha,
        )


def check_cluster_constant(B: np.ndarray, cluster_id: np.ndarray) -> bool:
    """True when every column of B is exactly constant within each cluster."""
    for c in np.unique(cluster_id):
        rows = B[cluster_id == c]
        if rows.size and not (rows == rows[0]).all():
            return False
    return True


@dataclass(frozen=True)
class StackedDesign:
    """Centered and scaled [X B] stack with per-column penalty weights.

    Columns are centered and scaled so that ``||W_l||^2 / N == 1`` exactly
    for every retained column; constant columns are dropped (recorded in
    ``dropped_x`` / ``dropped_b``) so the normalization bound holds with
    equality everywhere.  Penalty weights are 1 on covariate coordinates and
    ``ratio`` on synthetic coordinates.  Coefficients estimated in scaled
    space map back to the original scale through ``column_scales`` and
    ``column_centers``.
    """

    W: np.ndarray
    weights: np.ndarray
    column_scales: np.ndarray
    column_centers: np.ndarray
    x_columns: np.ndarray        # retained indices into 0..p-1
    b_columns: np.ndarray        # retained indices into 0..p0-1
    n_x: int                     # original p
    n_b: int                     # original p0
    ratio: float
    dropped_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dropped_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_obs(self) -> int:
        return self.W.shape[0]

    @property
    def n_cols(self) -> int:
        return self.W.shape[1]

    def reparameterized(self) -> np.ndarray:
        """Z = W diag(1/w): the uniform-penalty design of the weighted problem."""
        return self.W / self.weights[np.newaxis, :]

    def predict_scaled(self, theta_scaled: np.ndarray, intercept_scaled: float) -> np.ndarray:
        return self.W @ theta_scaled + intercept_scaled

    def to_original(self, theta_scaled: np.ndarray, intercept_scaled: float):
        """Map scaled-space coefficients to full-length (beta, gamma, intercept)."""
        coef = theta_scaled / self.column_scales
        beta = np.zeros(self.n_x)
        gamma = np.zeros(self.n_b)
        k = len(self.x_columns)
        beta[self.x_columns] = coef[:k]
        gamma[self.b_columns] = coef[k:k + len(self.b_columns)]
        intercept = intercept_scaled - float(self.column_centers @ coef)
        return beta, gamma, intercept


def stack_design(X: np.ndarray, B: np.ndarray, ratio: float) -> StackedDesign:
    """Stack W = [X B], center/scale columns to ``||W_l||^2/N = 1``, set weights.

    Constant columns carry no information after centering and are dropped
    with a warning; their indices are recorded so coefficients can be
    reported at full length (zeros in dropped slots).
    """
    X = np.asarray(X, dtype=float)
    B = np.asarray(B, dtype=float)
    if X.shape[0] != B.shape[0]:
        raise DataError("X and B must have equal row counts")
    if not ratio > 0:
        raise DataError("penalty ratio must be positive")
    n = X.shape[0]
    raw = np.hstack([X, B])
    centers = raw.mean(axis=0)
    centered = raw - centers
    scales = np.sqrt((centered ** 2).sum(axis=0) / n)
    # the range test catches exactly-constant columns whose centered values
    # are rounding residue rather than true variation
    keep = (scales > 0) & (raw.max(axis=0) > raw.min(axis=0))
    p, p0 = X.shape[1], B.shape[1]
    is_x = np.arange(p + p0) < p
    dropped_x = np.flatnonzero(~keep & is_x)
    dropped_b = np.flatnonzero(~keep & ~is_x) - p
    if dropped_x.size or dropped_b.size:
        warnings.warn(
            f"dropping {dropped_x.size + dropped_b.size} constant column(s) "
            "from the stacked design",
            stacklevel=2,
        )
    W = centered[:, keep] / scales[keep]
    x_cols = np.flatnonzero(keep[:p])
    b_cols = np.flatnonzero(keep[p:])
    weights = np.concatenate([np.ones(len(x_cols)), np.full(len(b_cols), float(ratio))])
    return StackedDesign(
        W=W,
        weights=weights,
        column_scales=scales[keep],
        column_centers=centers[keep],
        x_columns=x_cols,
        b_columns=b_cols,
        n_x=p,
        n_b=p0,
        ratio=float(ratio),
        dropped_x=dropped_x.astype(np.int64),
        dropped_b=dropped_b.astype(np.int64),
    )


def subset_rows(design: StackedDesign, rows: np.ndarray) -> np.ndarray:
    """Scaled design rows for a subset (centering/scaling from the full data)."""
    return design.W[rows]


def append_unpenalized(design: StackedDesign, column: np.ndarray) -> StackedDesign:
    """Append one centered/scaled column with penalty weight zero.

    Used for offsets carried across iterative refits; a constant column is a
    no-op (it carries no information after centering).  The appended
    coordinate is excluded from the beta/gamma back-transform but does enter
    the intercept correction and scaled-space predictions.
    """
    col = np.asarray(column, dtype=float)
    if col.shape != (design.n_obs,):
        raise DataError("appended column must be a length-N vector")
    center = col.mean()
    centered = col - center
    scale = np.sqrt((centered ** 2).sum() / design.n_obs)
    if scale == 0:
        return design
    return StackedDesign(
        W=np.hstack([design.W, (centered / scale)[:, None]]),
        weights=np.concatenate([design.weights, [0.0]]),
        column_scales=np.concatenate([design.column_scales, [scale]]),
        column_centers=np.concatenate([design.column_centers, [center]]),
        x_columns=design.x_columns,
        b_columns=design.b_columns,
        n_x=design.n_x,
        n_b=design.n_b,
        ratio=design.ratio,
        dropped_x=design.dropped_x,
        dropped_b=design.dropped_b,
    )


def load_csv(path, response: str, cluster: str, family: str = GAUSSIAN) -> tuple[ClusteredDataset, list[str]]:
    """Read a headered CSV into a canonical :class:`ClusteredDataset`.

    One column holds the response, one the integer cluster id; every other
    column must be numeric and becomes a covariate.  Missing values are
    rejected.  Returns the dataset and the covariate column names.
    """
    import pandas as pd

    frame = pd.read_csv(path)
    for col in (response, cluster):
        if col not in frame.columns:
            raise DataError(f"column {col!r} not found in {path}")
    if frame.isna().any().any():
        raise DataError("missing values in input CSV")
    covariate_names = [c for c in frame.columns if c not in (response, cluster)]
    try:
        X = frame[covariate_names].to_numpy(dtype=float)
    except ValueError as exc:
        raise DataError(f"non-numeric covariate column: {exc}") from exc
    cid = frame[cluster].to_numpy()
    if not np.issubdtype(cid.dtype, np.integer):
        as_float = frame[cluster].to_numpy(dtype=float)
        if not np.allclose(as_float, np.round(as_float)):
            raise DataError("cluster column must be integer-valued")
        cid = np.round(as_float).astype(np.int64)
    dataset = ClusteredDataset(
        y=frame[response].to_numpy(dtype=float),
        X=X,
        cluster_id=cid,
        family=family,
    )
    return canonicalize(dataset), covariate_names


def with_family(dataset: ClusteredDataset, family: str) -> ClusteredDataset:
    return replace(dataset, family=family)
