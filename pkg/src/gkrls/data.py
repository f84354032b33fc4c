"""Tabular ingestion, validation, and covariate standardization.

This module owns the `Dataset` container (validated numeric covariates,
outcome, optional cluster labels and weights), CSV ingestion with categorical
expansion, and the three standardization transforms (`none`, `scale`,
`mahalanobis`) whose fitted state is reused verbatim at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "Dataset",
    "StandardizationTransform",
    "load_csv",
    "fit_standardizer",
    "apply_standardizer",
]

# Eigenvalues below this fraction of the largest are treated as zero when
# determining the rank of a covariance matrix.
EIG_RTOL = 1e-10


class DataError(ValueError):
    """Raised for ingestion and validation failures (CLI exit code 3)."""


@dataclass
class CategoricalCoding:
    """Reference coding for one categorical column.

    The first level in lexicographic order is the reference and gets no
    indicator column.
    """

    column: str
    levels: list
    indicator_names: list

    @property
    def reference(self):
        return self.levels[0]

    def expand(self, labels: np.ndarray) -> np.ndarray:
        """Indicator matrix for ``labels`` (unseen levels map to all-zero)."""
        out = np.zeros((labels.shape[0], len(self.levels) - 1))
        for j, level in enumerate(self.levels[1:]):
            out[:, j] = labels == level
        return out

    def to_dict(self) -> dict:
        return {
            "column": self.column,
            "levels": [str(v) for v in self.levels],
            "indicator_names": list(self.indicator_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalCoding":
        return cls(
            column=d["column"],
            levels=list(d["levels"]),
            indicator_names=list(d["indicator_names"]),
        )


@dataclass
class Dataset:
    """Validated modeling data: numeric covariates plus bookkeeping.

    Attributes
    ----------
    W : ndarray, shape (N, P)
        Numeric covariate matrix (categoricals already expanded).
    colnames : list of str
        Column names of ``W``.
    y : ndarray, shape (N,)
        Outcome.
    g : ndarray or None
        Cluster labels (strings), present when a cluster role was supplied.
    weights : ndarray, shape (N,)
        Positive observation weights (all ones by default).
    folds : ndarray or None
        Small-integer fold labels, populated by cross-fitting helpers.
    categoricals : dict
        Original column name -> CategoricalCoding for expanded columns.
    labels : dict
        Original column name -> raw label array (retained for random
        intercepts and cluster bookkeeping).
    """

    W: np.ndarray
    colnames: list
    y: np.ndarray
    g: np.ndarray = None
    weights: np.ndarray = None
    folds: np.ndarray = None
    categoricals: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    cluster_name: str = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2:
            raise DataError("covariate matrix must be 2-dimensional")
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.W.shape[0]
        if n < 2:
            raise DataError(f"need at least 2 rows, got {n}")
        if self.y.shape[0] != n:
            raise DataError("outcome length does not match covariate rows")
        if len(self.colnames) != self.W.shape[1]:
            raise DataError("column-name count does not match covariate columns")
        if not np.all(np.isfinite(self.W)):
            bad = np.unique(np.where(~np.isfinite(self.W))[0])
            raise DataError(
                f"non-finite covariate values in rows {bad[:10].tolist()}"
            )
        if not np.all(np.isfinite(self.y)):
            bad = np.where(~np.isfinite(self.y))[0]
            raise DataError(f"non-finite outcome values in rows {bad[:10].tolist()}")
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.asarray(self.weights, dtype=float).ravel()
            if self.weights.shape[0] != n:
                raise DataError("weights length does not match rows")
            if np.any(~np.isfinite(self.weights)) or np.any(self.weights <= 0):
                raise DataError("weights must be finite and strictly positive")
        if self.g is not None:
            self.g = np.asarray(self.g).astype(str)
            if self.g.shape[0] != n:
                raise DataError("cluster labels length does not match rows")

    @property
    def N(self) -> int:
        return self.W.shape[0]

    @property
    def P(self) -> int:
        return self.W.shape[1]

    def column_indices(self, names) -> list:
        """Resolve covariate names to column indices.

        A name may be a numeric column or an original categorical column, in
        which case it resolves to all of its indicator columns.
        """
        index = {c: j for j, c in enumerate(self.colnames)}
        out = []
        for name in names:
            if name in index:
                out.append(index[name])
            elif name in self.categoricals:
                coding = self.categoricals[name]
                out.extend(index[c] for c in coding.indicator_names)
            else:
                raise DataError(f"unknown covariate {name!r}")
        return out

    def matrix(self, names) -> np.ndarray:
        """Covariate submatrix for the given (resolved) names."""
        return self.W[:, self.column_indices(names)]

    def label_column(self, name) -> np.ndarray:
        """Raw labels for a categorical or cluster column."""
        if name in self.labels:
            return self.labels[name]
        if self.cluster_name is not None and name == self.cluster_name:
            return self.g
        raise DataError(f"no categorical or cluster column named {name!r}")

    def subset(self, rows) -> "Dataset":
        """Row-subset copy (used by cross-fitting)."""
        rows = np.asarray(rows)
        return Dataset(
            W=self.W[rows],
            colnames=list(self.colnames),
            y=self.y[rows],
            g=None if self.g is None else self.g[rows],
            weights=self.weights[rows],
            folds=None if self.folds is None else self.folds[rows],
            categoricals=dict(self.categoricals),
            labels={k: v[rows] for k, v in self.labels.items()},
            cluster_name=self.cluster_name,
        )

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        outcome: str,
        covariates=None,
        cluster: str = None,
        weights: str = None,
        categorical=None,
    ) -> "Dataset":
        """Build a Dataset from a pandas DataFrame.

        Parameters
        ----------
        df : DataFrame
            Input table (header names are the column identifiers).
        outcome : str
            Outcome column name.
        covariates : list of str, optional
            Covariate columns; defaults to every column not assigned a role.
        cluster, weights : str, optional
            Role columns.
        categorical : list of str, optional
            Columns to force-treat as categorical; non-numeric covariate
            columns are treated as categorical automatically.
        """
        for col, role in [(outcome, "outcome"), (cluster, "cluster"), (weights, "weights")]:
            if col is not None and col not in df.columns:
                raise DataError(f"{role} column {col!r} not found")
        reserved = {outcome}
        if cluster:
            reserved.add(cluster)
        if weights:
            reserved.add(weights)
        if covariates is None:
            covariates = [c for c in df.columns if c not in reserved]
        else:
            missing = [c for c in covariates if c not in df.columns]
            if missing:
                raise DataError(f"covariate columns not found: {missing}")

        na_mask = df[
            [outcome, *covariates]
            + ([cluster] if cluster else [])
            + ([weights] if weights else [])
        ].isna().any(axis=1)
        if na_mask.any():
            bad = np.where(na_mask.to_numpy())[0]
            raise DataError(
                f"{bad.size} rows contain missing values (rows {bad[:10].tolist()})"
            )

        forced = set(categorical or [])
        y = _numeric_column(df, outcome)

        cols = []
        names = []
        codings = {}
        labels = {}
        for c in covariates:
            series = df[c]
            is_cat = c in forced or not pd.api.types.is_numeric_dtype(series)
            if is_cat:
                raw = series.astype(str).to_numpy()
                levels = sorted(set(raw))
                coding = CategoricalCoding(
                    column=c,
                    levels=levels,
                    indicator_names=[f"{c}={lv}" for lv in levels[1:]],
                )
                mat = coding.expand(raw)
                for j, nm in enumerate(coding.indicator_names):
                    cols.append(mat[:, j])
                    names.append(nm)
                codings[c] = coding
                labels[c] = raw
            else:
                cols.append(_numeric_column(df, c))
                names.append(c)

        g = df[cluster].astype(str).to_numpy() if cluster else None
        if cluster:
            labels.setdefault(cluster, g)
        w = _numeric_column(df, weights) if weights else None

        W = np.column_stack(cols) if cols else np.empty((len(df), 0))
        return cls(
            W=W,
            colnames=names,
            y=y,
            g=g,
            weights=w,
            categoricals=codings,
            labels=labels,
            cluster_name=cluster,
        )


def _numeric_column(df: pd.DataFrame, col: str) -> np.ndarray:
    """Strictly numeric column extraction with row/column error reporting."""
    series = df[col]
    if pd.api.types.is_numeric_dtype(series):
        return series.to_numpy(dtype=float)
    converted = pd.to_numeric(series, errors="coerce")
    bad = converted.isna() & ~series.isna()
    if bad.any():
        row = int(np.where(bad.to_numpy())[0][0])
        raise DataError(
            f"non-numeric value {series.iloc[row]!r} in column {col!r}, row {row}"
        )
    return converted.to_numpy(dtype=float)


def load_csv(path, schema: dict = None, **roles) -> Dataset:
    """Load an RFC-4180 CSV (header required, UTF-8) into a Dataset.

    Column roles come from ``schema`` (a dict with keys ``outcome``,
    ``covariates``, ``cluster``, ``weights``, ``categorical``) and/or keyword
    arguments, keywords winning. The outcome must be non-constant.
    """
    spec = dict(schema or {})
    spec.update({k: v for k, v in roles.items() if v is not None})
    if "outcome" not in spec:
        raise DataError("schema must name an outcome column")
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except pd.errors.ParserError as err:
        raise DataError(f"malformed CSV {path}: {err}") from None
    if df.shape[0] == 0:
        raise DataError(f"{path} contains no data rows")
    data = Dataset.from_frame(
        df,
        outcome=spec["outcome"],
        covariates=spec.get("covariates"),
        cluster=spec.get("cluster"),
        weights=spec.get("weights"),
        categorical=spec.get("categorical"),
    )
    if np.ptp(data.y) == 0.0:
        raise DataError(f"outcome column {spec['outcome']!r} is constant")
    return data


@dataclass
class StandardizationTransform:
    """Fitted covariate transform: ``(X - center) @ transform``.

    Attributes
    ----------
    kind : str
        One of ``none``, ``scale``, ``mahalanobis``.
    center : ndarray, shape (P,)
        Training column means (zeros for ``none``).
    transform : ndarray, shape (P, r)
        Linear map applied after centering. For ``mahalanobis`` this is the
        generalized inverse square root of the training covariance restricted
        to its rank-r non-null eigenspace.
    rank : int
        r, the output dimension (equals P at full rank).
    dropped : list of str
        Zero-variance columns removed under ``kind="scale"``.
    notes : list of str
        Warning records accumulated during fitting.
    """

    kind: str
    center: np.ndarray
    transform: np.ndarray
    rank: int
    colnames: list = None
    dropped: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "transform": self.transform.tolist(),
            "rank": int(self.rank),
            "colnames": list(self.colnames) if self.colnames else None,
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationTransform":
        return cls(
            kind=d["kind"],
            center=np.asarray(d["center"], dtype=float),
            transform=np.asarray(d["transform"], dtype=float),
            rank=int(d["rank"]),
            colnames=d.get("colnames"),
            dropped=list(d.get("dropped", [])),
        )


def fit_standardizer(data, kind: str = "mahalanobis", colnames=None) -> StandardizationTransform:
    """Fit a standardization transform on training covariates.

    Parameters
    ----------
    data : Dataset or ndarray
        Training covariates (Dataset uses its full covariate matrix).
    kind : str
        ``none`` (identity), ``scale`` (center and scale each column by its
        standard deviation), or ``mahalanobis`` (whiten: center, then rotate
        and scale so the sample covariance is the identity on the non-null
        eigenspace).
    """
    if isinstance(data, Dataset):
        X = data.W
        colnames = colnames or list(data.colnames)
    else:
        X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise DataError("covariates must be a 2-d matrix")
    n, p = X.shape
    if n < 2:
        raise DataError("standardizer needs at least 2 rows")
    names = list(colnames) if colnames is not None else [f"x{j+1}" for j in range(p)]

    if kind == "none":
        return StandardizationTransform(
            kind="none",
            center=np.zeros(p),
            transform=np.eye(p),
            rank=p,
            colnames=names,
        )

    center = X.mean(axis=0)
    if kind == "scale":
        sd = X.std(axis=0, ddof=1)
        keep = sd > 0
        dropped = [names[j] for j in range(p) if not keep[j]]
        notes = []
        if dropped:
            notes.append(
                f"zero-variance columns dropped from kernel inputs: {dropped}"
            )
        transform = np.zeros((p, int(keep.sum())))
        transform[keep, np.arange(int(keep.sum()))] = 1.0 / sd[keep]
        return StandardizationTransform(
            kind="scale",
            center=center,
            transform=transform,
            rank=int(keep.sum()),
            colnames=names,
            dropped=dropped,
            notes=notes,
        )

    if kind != "mahalanobis":
        raise DataError(f"unknown standardizer kind {kind!r}")

    cov = np.cov(X, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vmax = float(vals[-1]) if vals.size else 0.0
    if vmax <= 0.0:
        raise DataError("all covariate columns are constant; cannot whiten")
    keep = vals > EIG_RTOL * vmax
    r = int(np.count_nonzero(keep))
    transform = vecs[:, keep] / np.sqrt(vals[keep])
    return StandardizationTransform(
        kind="mahalanobis",
        center=center,
        transform=transform,
        rank=r,
        colnames=names,
    )


def apply_standardizer(t: StandardizationTransform, X: np.ndarray) -> np.ndarray:
    """Apply a fitted transform to new rows (never re-fits)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != t.center.shape[0]:
        raise DataError(
            f"expected {t.center.shape[0]} columns, got {X.shape[1]}"
        )
    return (X - t.center) @ t.transform
