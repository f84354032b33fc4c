"""Marginal effects, prediction grids, and curvature summaries.

All quantities are computed on the response scale by central finite
differences with "observed values" averaging: counterfactual columns are
pushed through the stored standardizers and kernel references exactly like
any prediction, per-row effects are averaged, and uncertainty comes from the
delta method over the full coefficient covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .inference import VarianceEstimate
from .terms import stack_prediction

__all__ = [
    "EffectEstimate",
    "ame",
    "first_difference",
    "predicted_grid",
    "second_derivative_avg",
    "endpoint_contrast",
]

# central-difference steps, relative to max(|x|, 1)
FIRST_DIFF_REL_H = math.sqrt(np.finfo(float).eps)
SECOND_DIFF_REL_H = np.finfo(float).eps ** (1.0 / 3.0)
SECOND_DIFF_MIN_REL_H = 1e-6


@dataclass
class EffectEstimate:
    """Point estimates with delta-method uncertainty.

    ``estimate`` is always a 1-D array (length 1 for averaged scalars, one
    entry per grid point otherwise); ``covariance`` is the matching full
    delta-method covariance and ``se`` its square-root diagonal, both None
    when no coefficient covariance was supplied. ``individual`` carries
    per-observation values for averaged effects.
    """

    kind: str
    variable: str
    estimate: np.ndarray
    grid: np.ndarray = None
    se: np.ndarray = None
    covariance: np.ndarray = None
    individual: np.ndarray = None
    h: float = None
    labels: list = None
    notes: list = field(default_factory=list)

    @property
    def value(self) -> float:
        """The scalar estimate (first entry)."""
        return float(self.estimate[0])

    def ci(self, level: float = 0.95):
        """Normal-theory confidence bounds ``(lo, hi)``."""
        if self.se is None:
            raise ValueError("no covariance was supplied; SEs are unavailable")
        z = norm.ppf(0.5 + level / 2.0)
        return self.estimate - z * self.se, self.estimate + z * self.se

    def to_frame(self, level: float = 0.95):
        """Plot-ready DataFrame: grid, estimate, se, ci_lo, ci_hi."""
        import pandas as pd

        n = self.estimate.size
        grid = self.grid if self.grid is not None else np.arange(n, dtype=float)
        if self.se is not None:
            lo, hi = self.ci(level)
            se = self.se
        else:
            se = np.full(n, np.nan)
            lo = np.full(n, np.nan)
            hi = np.full(n, np.nan)
        return pd.DataFrame(
            {"grid": np.asarray(grid, dtype=float), "estimate": self.estimate,
             "se": se, "ci_lo": lo, "ci_hi": hi}
        )

    def to_dict(self, level: float = 0.95) -> dict:
        """JSON-ready summary."""
        out = {
            "kind": self.kind,
            "variable": self.variable,
            "estimate": self.estimate.tolist(),
            "h": self.h,
            "notes": list(self.notes),
        }
        if self.labels is not None:
            out["labels"] = list(self.labels)
        if self.grid is not None:
            out["grid"] = np.asarray(self.grid, dtype=float).tolist()
        if self.se is not None:
            lo, hi = self.ci(level)
            out["se"] = self.se.tolist()
            out["ci_lo"] = lo.tolist()
            out["ci_hi"] = hi.tolist()
        return out


def _table_columns(model, table=None) -> dict:
    """A mutable {column -> array} view of the evaluation rows.

    Numeric columns are copied (they get perturbed); categorical and cluster
    columns ride along as raw label arrays so indicator resolution works.
    """
    if table is None:
        table = getattr(model, "dataset_", None)
        if table is None:
            raise ValueError(
                "this model carries no training rows; pass evaluation data"
            )
    cols = {}
    if isinstance(table, Dataset):
        for j, name in enumerate(table.colnames):
            cols[name] = table.W[:, j].copy()
        for name, lab in table.labels.items():
            cols[name] = np.asarray(lab)
        if table.g is not None and table.cluster_name:
            cols[table.cluster_name] = np.asarray(table.g)
    elif isinstance(table, dict):
        for name, v in table.items():
            arr = np.asarray(v)
            cols[name] = arr.astype(float).copy() if arr.dtype.kind in "fiub" else arr
    else:  # pandas DataFrame
        for name in table.columns:
            arr = np.asarray(table[name])
            cols[name] = arr.astype(float).copy() if arr.dtype.kind in "fiub" else arr
    return cols


def _numeric_column(cols: dict, variable: str) -> np.ndarray:
    if variable not in cols:
        raise KeyError(
            f"column {variable!r} not found; available: {sorted(cols)}"
        )
    x = np.asarray(cols[variable])
    if x.dtype.kind not in "fiub":
        raise ValueError(f"column {variable!r} is not numeric")
    return x.astype(float)


def _resolve_cov(model, variance):
    """Full coefficient covariance from a kind name, estimate, or matrix."""
    if variance is None:
        return None
    if isinstance(variance, VarianceEstimate):
        return variance.full
    if isinstance(variance, np.ndarray):
        k = model.coef_.size
        if variance.shape != (k, k):
            raise ValueError(
                f"covariance shape {variance.shape} does not match "
                f"{k} coefficients"
            )
        return variance
    if isinstance(variance, str):
        return model.covariance(variance).full
    raise TypeError(
        "variance must be a kind name, VarianceEstimate, ndarray, or None"
    )


def _parts(model, cols: dict):
    """(rows, mu, dmu/deta) for the evaluation columns."""
    rows = stack_prediction(model.design_, cols)
    eta = rows @ model.coef_
    fam = model.family_
    return rows, fam.linkinv(eta), fam.mu_eta(eta)


def _with(cols: dict, variable: str, values) -> dict:
    out = dict(cols)
    base = np.asarray(cols[variable], dtype=float)
    out[variable] = np.broadcast_to(np.asarray(values, dtype=float),
                                    base.shape).copy()
    return out


def _step(x: np.ndarray, rel: float, min_rel: float = 0.0) -> float:
    scale = max(float(np.max(np.abs(x))), 1.0)
    return max(scale * rel, scale * min_rel)


def _range_notes(x: np.ndarray, grid, variable: str) -> list:
    g = np.asarray(grid, dtype=float)
    outside = int(np.count_nonzero((g < x.min()) | (g > x.max())))
    if outside:
        return [
            f"{outside} grid value(s) outside the observed range of {variable}"
        ]
    return []


def _is_binary(x: np.ndarray) -> bool:
    u = np.unique(x)
    return u.size <= 2 and bool(np.all(np.isin(u, (0.0, 1.0))))


def ame(model, variable: str, variance="bayes", h: float = None,
        table=None) -> EffectEstimate:
    """Average marginal effect of ``variable`` on the response scale.

    Central difference (f(x+h) − f(x−h))/(2h) per observation at observed
    covariates, then averaged; h defaults to max(|x|,1)·√ε. Binary {0,1}
    columns are redirected to a 0→1 first difference (derivatives of
    indicators are undefined).
    """
    cols = _table_columns(model, table)
    x = _numeric_column(cols, variable)
    if _is_binary(x):
        res = first_difference(model, variable, variance=variance, table=table)
        res.notes.append(
            f"{variable} is binary; reporting the 0->1 first difference"
        )
        return res
    if h is None:
        h = _step(x, FIRST_DIFF_REL_H)
    elif h <= 0:
        raise ValueError("h must be positive")
    rows_hi, mu_hi, dmu_hi = _parts(model, _with(cols, variable, x + h))
    rows_lo, mu_lo, dmu_lo = _parts(model, _with(cols, variable, x - h))
    individual = (mu_hi - mu_lo) / (2.0 * h)
    est = float(individual.mean())

    V = _resolve_cov(model, variance)
    se = cov = None
    if V is not None:
        jac = (rows_hi * dmu_hi[:, None] - rows_lo * dmu_lo[:, None]).mean(axis=0)
        jac /= 2.0 * h
        var = float(jac @ V @ jac)
        cov = np.array([[var]])
        se = np.sqrt(np.clip(np.array([var]), 0.0, None))
    return EffectEstimate(
        kind="ame", variable=variable, estimate=np.array([est]), se=se,
        covariance=cov, individual=individual, h=float(h),
        labels=[f"ame({variable})"],
    )


def first_difference(model, variable: str, lo: float = 0.0, hi: float = 1.0,
                     variance="bayes", table=None) -> EffectEstimate:
    """Average response change when ``variable`` moves from ``lo`` to ``hi``."""
    cols = _table_columns(model, table)
    _numeric_column(cols, variable)
    rows_hi, mu_hi, dmu_hi = _parts(model, _with(cols, variable, hi))
    rows_lo, mu_lo, dmu_lo = _parts(model, _with(cols, variable, lo))
    individual = mu_hi - mu_lo
    est = float(individual.mean())

    V = _resolve_cov(model, variance)
    se = cov = None
    if V is not None:
        jac = (rows_hi * dmu_hi[:, None] - rows_lo * dmu_lo[:, None]).mean(axis=0)
        var = float(jac @ V @ jac)
        cov = np.array([[var]])
        se = np.sqrt(np.clip(np.array([var]), 0.0, None))
    return EffectEstimate(
        kind="first_difference", variable=variable, estimate=np.array([est]),
        se=se, covariance=cov, individual=individual,
        labels=[f"fd({variable}: {lo:g}->{hi:g})"],
    )


def predicted_grid(model, variable: str, grid, variance="bayes",
                   table=None) -> EffectEstimate:
    """Average adjusted predictions p̄(e) over a grid of ``variable`` values.

    For each grid value e the variable is set to e for every row and the
    response-scale predictions are averaged; the full grid covariance comes
    from the stacked delta-method Jacobian.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    cols = _table_columns(model, table)
    x = _numeric_column(cols, variable)
    notes = _range_notes(x, grid, variable)

    est = np.empty(grid.size)
    V = _resolve_cov(model, variance)
    jac = np.empty((grid.size, model.coef_.size)) if V is not None else None
    for i, e in enumerate(grid):
        rows, mu, dmu = _parts(model, _with(cols, variable, e))
        est[i] = mu.mean()
        if jac is not None:
            jac[i] = (rows * dmu[:, None]).mean(axis=0)
    se = cov = None
    if jac is not None:
        cov = jac @ V @ jac.T
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return EffectEstimate(
        kind="predicted_grid", variable=variable, estimate=est, grid=grid,
        se=se, covariance=cov,
        labels=[f"{variable}={e:g}" for e in grid], notes=notes,
    )


def second_derivative_avg(model, variable: str, grid=None, variance="bayes",
                          h: float = None, table=None) -> EffectEstimate:
    """Average second derivative of the response in ``variable``.

    Central second difference (f(x+h) − 2f(x) + f(x−h))/h² per row. With a
    grid, the variable is pinned to each grid value before differencing
    (one averaged estimate per grid point); without one, differences are
    taken at the observed values and averaged once. The step default is
    max(|x|,1)·ε^(1/3), floored at 1e-6·scale against cancellation.
    """
    cols = _table_columns(model, table)
    x = _numeric_column(cols, variable)
    scale = max(float(np.max(np.abs(x))), 1.0)
    if h is None:
        h = _step(x, SECOND_DIFF_REL_H, SECOND_DIFF_MIN_REL_H)
    elif h <= 0:
        raise ValueError("h must be positive")
    elif h < SECOND_DIFF_MIN_REL_H * scale:
        raise ValueError(
            f"h={h:g} is below the cancellation guard "
            f"{SECOND_DIFF_MIN_REL_H * scale:g} for this column"
        )
    V = _resolve_cov(model, variance)

    def one(center):
        rows_hi, mu_hi, dmu_hi = _parts(model, _with(cols, variable, center + h))
        rows_md, mu_md, dmu_md = _parts(model, _with(cols, variable, center))
        rows_lo, mu_lo, dmu_lo = _parts(model, _with(cols, variable, center - h))
        vals = (mu_hi - 2.0 * mu_md + mu_lo) / h**2
        j = None
        if V is not None:
            j = (
                rows_hi * dmu_hi[:, None]
                - 2.0 * rows_md * dmu_md[:, None]
                + rows_lo * dmu_lo[:, None]
            ).mean(axis=0) / h**2
        return vals, j

    if grid is None:
        vals, j = one(x)
        est = np.array([vals.mean()])
        se = cov = None
        if j is not None:
            var = float(j @ V @ j)
            cov = np.array([[var]])
            se = np.sqrt(np.clip(np.array([var]), 0.0, None))
        return EffectEstimate(
            kind="second_derivative", variable=variable, estimate=est, se=se,
            covariance=cov, individual=vals, h=float(h),
            labels=[f"d2({variable})"],
        )

    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    notes = _range_notes(x, grid, variable)
    est = np.empty(grid.size)
    jac = np.empty((grid.size, model.coef_.size)) if V is not None else None
    for i, e in enumerate(grid):
        vals, j = one(e)
        est[i] = vals.mean()
        if jac is not None:
            jac[i] = j
    se = cov = None
    if jac is not None:
        cov = jac @ V @ jac.T
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return EffectEstimate(
        kind="second_derivative", variable=variable, estimate=est, grid=grid,
        se=se, covariance=cov, h=float(h),
        labels=[f"d2({variable}={e:g})" for e in grid], notes=notes,
    )


def endpoint_contrast(model, variable: str, e_min: float, e_max: float,
                      e_inflect: float, variance="bayes",
                      table=None) -> EffectEstimate:
    """Two nonlinearity contrasts across three reference points.

    Returns ``ame_contrast`` = AME(e_max) − AME(e_min) (the derivative
    pinned at each endpoint, averaged over rows) and ``curvature_contrast``
    = [p̄(e_max) − p̄(e_inflect)] − [p̄(e_inflect) − p̄(e_min)], with a joint
    delta-method covariance. Both are 0 for a model linear in the variable.
    """
    cols = _table_columns(model, table)
    x = _numeric_column(cols, variable)
    h = _step(x, FIRST_DIFF_REL_H)
    V = _resolve_cov(model, variance)

    def deriv_at(e):
        rows_hi, mu_hi, dmu_hi = _parts(model, _with(cols, variable, e + h))
        rows_lo, mu_lo, dmu_lo = _parts(model, _with(cols, variable, e - h))
        val = float(((mu_hi - mu_lo) / (2.0 * h)).mean())
        j = None
        if V is not None:
            j = (rows_hi * dmu_hi[:, None] - rows_lo * dmu_lo[:, None]).mean(
                axis=0
            ) / (2.0 * h)
        return val, j

    def pbar_at(e):
        rows, mu, dmu = _parts(model, _with(cols, variable, e))
        j = (rows * dmu[:, None]).mean(axis=0) if V is not None else None
        return float(mu.mean()), j

    d_max, jd_max = deriv_at(float(e_max))
    d_min, jd_min = deriv_at(float(e_min))
    p_max, jp_max = pbar_at(float(e_max))
    p_inf, jp_inf = pbar_at(float(e_inflect))
    p_min, jp_min = pbar_at(float(e_min))

    est = np.array([d_max - d_min, p_max - 2.0 * p_inf + p_min])
    se = cov = None
    if V is not None:
        jac = np.vstack([jd_max - jd_min, jp_max - 2.0 * jp_inf + jp_min])
        cov = jac @ V @ jac.T
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return EffectEstimate(
        kind="endpoint_contrast", variable=variable, estimate=est,
        grid=np.array([float(e_min), float(e_inflect), float(e_max)]),
        se=se, covariance=cov, h=float(h),
        labels=["ame_contrast", "curvature_contrast"],
        notes=_range_notes(x, [e_min, e_inflect, e_max], variable),
    )
