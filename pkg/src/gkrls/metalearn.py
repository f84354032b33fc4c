"""Cross-fitting and meta-learners: DML-PLR, DML-ATE (AIPW), R-learner.

All three algorithms share the same machinery: deterministic fold plans
(optionally stratified so whole clusters stay inside one fold), out-of-fold
nuisance predictions from penalized fits, and influence-function standard
errors with a one-way cluster aggregation when cluster labels are present.
Oracle injection hooks let tests replace any nuisance with known values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import DataError, Dataset
from .estimator import GKRLS
from .rng import child_rng, hash_key

__all__ = [
    "MetalearnError",
    "FoldPlan",
    "CausalEstimate",
    "make_folds",
    "crossfit_nuisance",
    "dml_plr",
    "dml_ate",
    "rlearner",
]

# rows whose treatment residual is smaller than this are excluded from the
# R-learner pseudo-outcome regression (the pseudo-outcome is unstable there)
RESIDUAL_FLOOR = 1e-6

DEFAULT_TRIM = (0.01, 0.99)


class MetalearnError(RuntimeError):
    """Raised for fold-plan violations and failed nuisance fits."""


@dataclass
class FoldPlan:
    """A partition of rows into K folds.

    ``assignment[i]`` is the fold of row i. When ``stratify_by`` is set, the
    plan was built by assigning whole clusters to folds, so every cluster's
    rows share one fold.
    """

    K: int
    assignment: np.ndarray
    stratify_by: str = None
    seed: int = 0

    def rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)


@dataclass
class CausalEstimate:
    """A treatment-effect estimate with influence-function uncertainty."""

    method: str
    theta: float
    se: float
    n: int
    folds: int
    trimmed_n: int = 0
    excluded_n: int = 0
    per_fold_deviance: list = field(default_factory=list)
    cluster: str = None
    psi: np.ndarray = None
    tau_cv: np.ndarray = None
    tau_full: np.ndarray = None
    notes: list = field(default_factory=list)

    def ci(self, level: float = 0.95):
        z = norm.ppf(0.5 + level / 2.0)
        return self.theta - z * self.se, self.theta + z * self.se

    def to_dict(self, level: float = 0.95) -> dict:
        lo, hi = self.ci(level)
        out = {
            "method": self.method,
            "theta": self.theta,
            "se": self.se,
            "ci": [lo, hi],
            "n": self.n,
            "folds": self.folds,
            "trimmed_n": self.trimmed_n,
            "per_fold_deviance": self.per_fold_deviance,
            "notes": list(self.notes),
        }
        if self.excluded_n:
            out["excluded_n"] = self.excluded_n
        if self.cluster is not None:
            out["cluster"] = self.cluster
        return out


# --------------------------------------------------------------------- folds


def make_folds(data: Dataset, K: int = 5, stratify_by=None,
               seed: int = 0) -> FoldPlan:
    """Assign rows to K near-equal folds, optionally cluster-stratified.

    ``stratify_by`` may be a column name carrying labels (typically the
    cluster column) or an explicit label array; whole clusters are then
    assigned to folds greedily (shuffled order, smallest fold first), so no
    cluster straddles a fold boundary.
    """
    n = data.N
    if K < 2:
        raise MetalearnError(f"need at least 2 folds, got {K}")
    if n < 2 * K:
        raise MetalearnError(f"need N >= 2K rows (N={n}, K={K})")
    rng = child_rng(seed, "folds")
    assignment = np.empty(n, dtype=int)
    strat_name = None
    if stratify_by is None:
        perm = rng.permutation(n)
        assignment[perm] = np.arange(n) % K
    else:
        if isinstance(stratify_by, str):
            labels = np.asarray(data.label_column(stratify_by)).astype(str)
            strat_name = stratify_by
        else:
            labels = np.asarray(stratify_by).astype(str).ravel()
            strat_name = "labels"
            if labels.shape[0] != n:
                raise MetalearnError(
                    "stratification labels length does not match rows"
                )
        clusters, inverse, sizes = np.unique(
            labels, return_inverse=True, return_counts=True
        )
        if K > clusters.size:
            raise MetalearnError(
                f"more folds ({K}) than clusters ({clusters.size})"
            )
        order = rng.permutation(clusters.size)
        fold_rows = np.zeros(K, dtype=int)
        cluster_fold = np.empty(clusters.size, dtype=int)
        for c in order:
            k = int(np.argmin(fold_rows))
            cluster_fold[c] = k
            fold_rows[k] += sizes[c]
        assignment = cluster_fold[inverse]
    plan = FoldPlan(K=K, assignment=assignment, stratify_by=strat_name,
                    seed=int(seed))
    _assert_fold_hygiene(plan, n)
    return plan


def _assert_fold_hygiene(plan: FoldPlan, n: int) -> None:
    """Check the plan partitions rows and no fold trains on its own rows."""
    a = np.asarray(plan.assignment)
    if a.shape != (n,):
        raise MetalearnError("fold assignment length does not match rows")
    if a.min() < 0 or a.max() >= plan.K:
        raise MetalearnError("fold ids outside [0, K)")
    counts = np.bincount(a, minlength=plan.K)
    if np.any(counts == 0):
        raise MetalearnError(f"empty fold(s): {np.flatnonzero(counts == 0).tolist()}")
    for k in range(plan.K):
        if np.intersect1d(plan.rows(k), plan.train_rows(k)).size:
            raise MetalearnError(f"fold {k} overlaps its training complement")


# ----------------------------------------------------------- nuisance fits


def _drop_columns(data: Dataset, drop, y_col: str = None) -> Dataset:
    """A Dataset with ``y_col`` (or the stored outcome) as y and the columns
    in ``drop`` removed from the covariates (expanded indicators included)."""
    drop = set(drop)

    def base(name: str) -> str:
        return name.split("=", 1)[0] if "=" in name else name

    keep = [j for j, c in enumerate(data.colnames)
            if c not in drop and base(c) not in drop]
    colnames = [data.colnames[j] for j in keep]
    if y_col is None:
        y = data.y
    else:
        if y_col not in data.colnames:
            raise DataError(f"column {y_col!r} not found")
        y = data.W[:, data.colnames.index(y_col)]
    kept_bases = {base(c) for c in colnames}
    return Dataset(
        W=data.W[:, keep],
        colnames=colnames,
        y=np.asarray(y, dtype=float).copy(),
        g=data.g,
        weights=data.weights,
        categoricals={k: v for k, v in data.categoricals.items()
                      if k in kept_bases},
        labels={k: v for k, v in data.labels.items() if k in kept_bases},
        cluster_name=data.cluster_name,
    )


def crossfit_nuisance(
    data: Dataset,
    spec=None,
    family: str = "gaussian",
    folds: FoldPlan = None,
    seed: int = 0,
    label: str = "nuisance",
    starts=(0.0,),
    train_mask: np.ndarray = None,
    include_linear: bool = True,
):
    """Out-of-fold predictions: fit each fold's complement, predict the fold.

    ``train_mask`` optionally restricts training rows (the fold complement is
    intersected with it) while predictions still cover every fold row — used
    by the AIPW arm-specific outcome models. Returns ``(oof, fits)`` where
    ``fits`` is one fitted model per fold.
    """
    if folds is None:
        folds = make_folds(data, seed=seed)
    _assert_fold_hygiene(folds, data.N)
    oof = np.full(data.N, np.nan)
    fits = []
    for k in range(folds.K):
        train = folds.train_rows(k)
        if train_mask is not None:
            train = train[np.asarray(train_mask, dtype=bool)[train]]
        if train.size == 0:
            raise MetalearnError(f"fold {k}: no training rows ({label})")
        test_rows = folds.rows(k)
        if np.intersect1d(train, test_rows).size:  # pragma: no cover
            raise MetalearnError(f"fold {k} trains on its own rows")
        model = GKRLS(
            spec=spec,
            family=family,
            seed=hash_key(seed, "fold", k, label),
            starts=starts,
            include_linear=include_linear,
        )
        try:
            model.fit(data.subset(train))
        except Exception as err:
            raise MetalearnError(
                f"{label} fit failed on fold {k}: {err}"
            ) from err
        oof[test_rows] = model.predict(data.subset(test_rows),
                                       scale="response")
        fits.append(model)
    if np.any(np.isnan(oof)):  # pragma: no cover - hygiene guard
        raise MetalearnError("some rows received no out-of-fold prediction")
    return oof, fits


def _binary_treatment(data: Dataset, treatment: str) -> np.ndarray:
    if treatment not in data.colnames:
        raise DataError(f"treatment column {treatment!r} not found")
    w = data.W[:, data.colnames.index(treatment)]
    if not np.all(np.isin(np.unique(w), (0.0, 1.0))):
        raise MetalearnError("treatment must be binary {0,1}")
    return w


def _cluster_se(psi: np.ndarray, labels) -> float:
    """One-way cluster SE of mean(psi): G/(G−1)·Σ_g S_g² / N² with centered
    within-cluster sums S_g."""
    labels = np.asarray(labels).astype(str).ravel()
    groups = np.unique(labels)
    G = groups.size
    if G < 2:
        raise MetalearnError("cluster SE needs >= 2 clusters")
    centered = psi - psi.mean()
    sums = np.array([centered[labels == g].sum() for g in groups])
    var = G / (G - 1.0) * float(np.sum(sums**2)) / psi.size**2
    return float(np.sqrt(var))


def _score_se(psi: np.ndarray, data: Dataset, cluster) -> tuple:
    """(se, cluster_name) with one-way cluster aggregation when available."""
    if cluster == "auto":
        cluster = data.cluster_name if data.g is not None else None
    if cluster is None:
        se = float(np.std(psi, ddof=1) / np.sqrt(psi.size))
        return se, None
    labels = data.g if cluster == data.cluster_name else data.label_column(cluster)
    return _cluster_se(psi, labels), str(cluster)


def _resolve_folds(data, folds, K, seed, cluster):
    if folds is not None:
        _assert_fold_hygiene(folds, data.N)
        return folds
    stratify = None
    if cluster == "auto" and data.g is not None:
        stratify = data.cluster_name or "cluster"
        if data.cluster_name is None:
            return make_folds(data, K=K, stratify_by=data.g, seed=seed)
    elif isinstance(cluster, str) and cluster != "auto":
        stratify = cluster
    return make_folds(data, K=K, stratify_by=stratify, seed=seed)


# ------------------------------------------------------------------ DML-PLR


def dml_plr(
    data: Dataset,
    treatment: str,
    spec=None,
    folds: FoldPlan = None,
    K: int = 5,
    seed: int = 0,
    cluster="auto",
    m_hat: np.ndarray = None,
    e_hat: np.ndarray = None,
    starts=(0.0,),
) -> CausalEstimate:
    """Partially linear DML: θ̂ = Σṽỹ / Σṽ² on out-of-fold residuals.

    Both nuisances (outcome mean and treatment mean) are gaussian penalized
    fits on the covariates with the treatment removed; 2 fits per fold.
    ``m_hat``/``e_hat`` inject known nuisance values (testing hook).
    """
    if treatment not in data.colnames:
        raise DataError(f"treatment column {treatment!r} not found")
    w = data.W[:, data.colnames.index(treatment)]
    y = data.y
    folds = _resolve_folds(data, folds, K, seed, cluster)
    per_fold = []

    if m_hat is None or e_hat is None:
        nuis = _drop_columns(data, {treatment})
        if m_hat is None:
            m_hat, m_fits = crossfit_nuisance(
                nuis, spec=spec, family="gaussian", folds=folds, seed=seed,
                label="outcome", starts=starts,
            )
        else:
            m_fits = None
        if e_hat is None:
            edat = _drop_columns(data, {treatment}, y_col=treatment)
            e_hat, e_fits = crossfit_nuisance(
                edat, spec=spec, family="gaussian", folds=folds, seed=seed,
                label="treatment", starts=starts,
            )
        else:
            e_fits = None
        for k in range(folds.K):
            row = {"fold": k}
            if m_fits is not None:
                row["m"] = m_fits[k].fit_.deviance
            if e_fits is not None:
                row["e"] = e_fits[k].fit_.deviance
            per_fold.append(row)
    m_hat = np.asarray(m_hat, dtype=float).ravel()
    e_hat = np.asarray(e_hat, dtype=float).ravel()

    y_t = y - m_hat
    v_t = w - e_hat
    denom = float(np.sum(v_t**2))
    scale = max(float(np.var(w)), 1.0) * data.N
    if denom <= 1e-12 * scale:
        raise MetalearnError(
            "degenerate treatment residuals (constant treatment after "
            "partialling out?)"
        )
    theta = float(np.sum(v_t * y_t) / denom)
    psi = v_t * (y_t - v_t * theta) / (denom / data.N)
    se, cluster_name = _score_se(psi, data, cluster)
    return CausalEstimate(
        method="dml_plr", theta=theta, se=se, n=data.N, folds=folds.K,
        per_fold_deviance=per_fold, cluster=cluster_name, psi=psi,
    )


# ------------------------------------------------------------------ DML-ATE


def dml_ate(
    data: Dataset,
    treatment: str,
    spec=None,
    folds: FoldPlan = None,
    K: int = 5,
    trim=DEFAULT_TRIM,
    seed: int = 0,
    cluster="auto",
    m_hat0: np.ndarray = None,
    m_hat1: np.ndarray = None,
    e_hat: np.ndarray = None,
    starts=(0.0,),
) -> CausalEstimate:
    """AIPW average treatment effect with cross-fitted nuisances.

    Per fold: a gaussian outcome model on treated training rows (μ̂₁), one
    on control rows (μ̂₀), and a binomial-logit propensity on all training
    rows — 3 fits per fold. Propensities are clamped to ``trim`` and the
    clamped count reported. θ̂ is the mean AIPW score; SE = sd(score)/√N with
    one-way cluster aggregation when labels are present.
    """
    w = _binary_treatment(data, treatment)
    y = data.y
    lo, hi = float(trim[0]), float(trim[1])
    if not (0.0 < lo < hi < 1.0):
        raise MetalearnError(f"invalid trim bounds {trim}")
    folds = _resolve_folds(data, folds, K, seed, cluster)
    per_fold = []

    need_fit = m_hat0 is None or m_hat1 is None or e_hat is None
    if need_fit:
        nuis = _drop_columns(data, {treatment})
        for k in range(folds.K):
            train = folds.train_rows(k)
            if not np.any(w[train] == 1.0) or not np.any(w[train] == 0.0):
                raise MetalearnError(
                    f"fold {k}: training rows are all-treated or all-control"
                )
        fits = {}
        if m_hat1 is None:
            m_hat1, f1 = crossfit_nuisance(
                nuis, spec=spec, family="gaussian", folds=folds, seed=seed,
                label="outcome_treated", starts=starts, train_mask=(w == 1.0),
            )
            fits["m1"] = f1
        if m_hat0 is None:
            m_hat0, f0 = crossfit_nuisance(
                nuis, spec=spec, family="gaussian", folds=folds, seed=seed,
                label="outcome_control", starts=starts, train_mask=(w == 0.0),
            )
            fits["m0"] = f0
        if e_hat is None:
            edat = _drop_columns(data, {treatment}, y_col=treatment)
            e_hat, fe = crossfit_nuisance(
                edat, spec=spec, family="binomial_logit", folds=folds,
                seed=seed, label="propensity", starts=starts,
            )
            fits["e"] = fe
        for k in range(folds.K):
            row = {"fold": k}
            for name, fl in fits.items():
                row[name] = fl[k].fit_.deviance
            per_fold.append(row)
    m_hat0 = np.asarray(m_hat0, dtype=float).ravel()
    m_hat1 = np.asarray(m_hat1, dtype=float).ravel()
    e_hat = np.asarray(e_hat, dtype=float).ravel()

    trimmed = int(np.count_nonzero((e_hat < lo) | (e_hat > hi)))
    e_use = np.clip(e_hat, lo, hi)
    psi = (
        m_hat1
        - m_hat0
        + w * (y - m_hat1) / e_use
        - (1.0 - w) * (y - m_hat0) / (1.0 - e_use)
    )
    theta = float(psi.mean())
    se, cluster_name = _score_se(psi, data, cluster)
    return CausalEstimate(
        method="dml_ate", theta=theta, se=se, n=data.N, folds=folds.K,
        trimmed_n=trimmed, per_fold_deviance=per_fold, cluster=cluster_name,
        psi=psi,
    )


# ---------------------------------------------------------------- R-learner


def rlearner(
    data: Dataset,
    treatment: str,
    spec_nuisance=None,
    spec_tau=None,
    folds: FoldPlan = None,
    K: int = 5,
    trim=DEFAULT_TRIM,
    seed: int = 0,
    cluster="auto",
    m_hat: np.ndarray = None,
    e_hat: np.ndarray = None,
    starts=(0.0,),
) -> CausalEstimate:
    """Heterogeneous effects by weighted pseudo-outcome regression.

    Step 1 cross-fits m̂ (gaussian) and ê (binomial-logit, trimmed). Step 2
    regresses (y−m̂)/(W−ê) on the covariates with weights (W−ê)², reusing the
    same folds for a cross-validated per-row τ̂ plus one full-sample τ̂ fit.
    Rows with |W−ê| < 1e-6 are excluded from the regressions (and counted).
    The summary θ̂ is the mean cross-validated τ̂; its SE is the descriptive
    sd/√N of the τ̂ values.
    """
    w = _binary_treatment(data, treatment)
    y = data.y
    lo, hi = float(trim[0]), float(trim[1])
    if not (0.0 < lo < hi < 1.0):
        raise MetalearnError(f"invalid trim bounds {trim}")
    folds = _resolve_folds(data, folds, K, seed, cluster)
    per_fold = []

    nuis = _drop_columns(data, {treatment})
    if m_hat is None:
        m_hat, m_fits = crossfit_nuisance(
            nuis, spec=spec_nuisance, family="gaussian", folds=folds,
            seed=seed, label="outcome", starts=starts,
        )
    else:
        m_fits = None
    if e_hat is None:
        edat = _drop_columns(data, {treatment}, y_col=treatment)
        e_hat, e_fits = crossfit_nuisance(
            edat, spec=spec_nuisance, family="binomial_logit", folds=folds,
            seed=seed, label="propensity", starts=starts,
        )
    else:
        e_fits = None
    m_hat = np.asarray(m_hat, dtype=float).ravel()
    e_hat = np.asarray(e_hat, dtype=float).ravel()

    trimmed = int(np.count_nonzero((e_hat < lo) | (e_hat > hi)))
    e_use = np.clip(e_hat, lo, hi)
    v_t = w - e_use
    usable = np.abs(v_t) >= RESIDUAL_FLOOR
    excluded = int(np.count_nonzero(~usable))
    if np.count_nonzero(usable) < 2 * folds.K:
        raise MetalearnError(
            "too few usable rows after excluding near-zero treatment residuals"
        )
    pseudo = np.zeros(data.N)
    pseudo[usable] = (y[usable] - m_hat[usable]) / v_t[usable]
    wts = v_t**2

    tau_data = Dataset(
        W=nuis.W,
        colnames=list(nuis.colnames),
        y=pseudo,
        g=nuis.g,
        weights=nuis.weights,
        categoricals=dict(nuis.categoricals),
        labels=dict(nuis.labels),
        cluster_name=nuis.cluster_name,
    )

    def tau_fit(rows, label):
        model = GKRLS(
            spec=spec_tau,
            family="gaussian",
            seed=hash_key(seed, label),
            starts=starts,
            include_linear=True,
        )
        try:
            model.fit(tau_data.subset(rows), weights=wts[rows])
        except Exception as err:
            raise MetalearnError(f"{label} fit failed: {err}") from err
        return model

    tau_cv = np.full(data.N, np.nan)
    for k in range(folds.K):
        train = folds.train_rows(k)
        train = train[usable[train]]
        if train.size == 0:
            raise MetalearnError(f"fold {k}: no usable training rows for tau")
        model = tau_fit(train, f"tau_cv_{k}")
        test_rows = folds.rows(k)
        tau_cv[test_rows] = model.predict(data.subset(test_rows),
                                          scale="response")
        row = {"fold": k, "tau": model.fit_.deviance}
        if m_fits is not None:
            row["m"] = m_fits[k].fit_.deviance
        if e_fits is not None:
            row["e"] = e_fits[k].fit_.deviance
        per_fold.append(row)

    full_model = tau_fit(np.flatnonzero(usable), "tau_full")
    tau_full = full_model.predict(data, scale="response")

    theta = float(tau_cv.mean())
    se = float(np.std(tau_cv, ddof=1) / np.sqrt(data.N))
    notes = ["theta is the mean cross-validated tau; the SE is descriptive "
             "(sd/sqrt(N) of tau values, not an influence function)"]
    return CausalEstimate(
        method="rlearner", theta=theta, se=se, n=data.N, folds=folds.K,
        trimmed_n=trimmed, excluded_n=excluded, per_fold_deviance=per_fold,
        cluster=data.cluster_name, tau_cv=tau_cv, tau_full=tau_full,
        notes=notes,
    )
