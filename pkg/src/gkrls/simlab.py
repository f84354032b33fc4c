"""Synthetic data generators and simulation-study drivers.

Every generator returns a :class:`~gkrls.data.Dataset` together with the
analytic ground truth of the design (mean surface, per-row derivatives,
average-marginal-effect targets), so downstream studies never rely on a
numerical approximation of the truth. Every study driver is a deterministic
function of its seed: replicate-level randomness is derived through the
package RNG tree and never from global state.

Study output is an :class:`ExperimentResult`: a tidy per-replicate row log
plus aggregate rows (with percentile-bootstrap confidence intervals where
a study calls for them). Aggregates are always recomputable from the row
log alone, and :func:`relative_impact_from_rows` exposes that recomputation
for the sketch-stability study.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import DataError, Dataset
from .rng import child_rng, hash_key

__all__ = [
    "DgpConfig",
    "ExperimentResult",
    "coverage_surface",
    "fe_gradient",
    "fe_surface",
    "gen_bivariate_coverage",
    "gen_fe_dgp",
    "gen_plr_synthetic",
    "gen_three_hills",
    "percentile_bootstrap",
    "relative_impact_from_rows",
    "run_fe_study",
    "run_scaling",
    "run_sketch_stability",
    "run_three_hills",
    "three_hills_gradient",
    "three_hills_surface",
]

DGP_KINDS = (
    "three_hills",
    "fe_linear",
    "fe_nonlinear",
    "bivariate_coverage",
    "plr_synthetic",
)

#: Default covariate range for the three-hills design. The mean surface
#: sin(x1)·cos(x2) repeats with period 2π, so one full period centred at the
#: origin exercises every hill and valley exactly once.
THREE_HILLS_RANGE = (-math.pi, math.pi)

#: Bump widths of the bivariate two-bump coverage surface (the classic
#: smoothing benchmark): the first factor controls spread in x, the second
#: in z.
COVERAGE_SX = 0.3
COVERAGE_SZ = 0.4

#: Group-level covariance of (group effect, group covariate mean) in the
#: grouped panel design; the off-diagonal is the correlation knob ρ.
FE_GROUP_VAR_MU = 3.0
FE_GROUP_VAR_XBAR = 0.3


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def three_hills_surface(x1, x2) -> np.ndarray:
    """Mean surface sin(x1)·cos(x2)."""
    return np.sin(np.asarray(x1, dtype=float)) * np.cos(np.asarray(x2, dtype=float))


def three_hills_gradient(x1, x2) -> tuple:
    """Partial derivatives of the three-hills surface, per row."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return np.cos(x1) * np.cos(x2), -np.sin(x1) * np.sin(x2)


def gen_three_hills(
    n: int,
    seed: int = 0,
    noise_sd: float = 0.5,
    low: float = THREE_HILLS_RANGE[0],
    high: float = THREE_HILLS_RANGE[1],
) -> tuple:
    """Draw the three-hills design: y ~ Normal(sin(x1)·cos(x2), noise_sd²).

    Covariates are Uniform(low, high), by default one full period of the
    surface. Returns ``(dataset, truth)`` where ``truth`` carries the mean
    surface, its per-row partial derivatives, and the sample-average
    derivative targets.
    """
    if n < 10:
        raise DataError(f"three-hills design needs at least 10 rows, got {n}")
    if noise_sd <= 0:
        raise DataError("noise_sd must be positive")
    rng = child_rng(seed, "three_hills")
    x1 = rng.uniform(low, high, n)
    x2 = rng.uniform(low, high, n)
    mu = three_hills_surface(x1, x2)
    y = mu + noise_sd * rng.standard_normal(n)
    d1, d2 = three_hills_gradient(x1, x2)
    ds = Dataset(W=np.column_stack([x1, x2]), colnames=["x1", "x2"], y=y)
    truth = {
        "mu": mu,
        "d_x1": d1,
        "d_x2": d2,
        "ame_x1": float(d1.mean()),
        "ame_x2": float(d2.mean()),
        "noise_sd": float(noise_sd),
    }
    return ds, truth


def coverage_surface(x, z, sx: float = COVERAGE_SX, sz: float = COVERAGE_SZ) -> np.ndarray:
    """Two-bump bivariate surface used by the CI-coverage experiment."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    bump1 = np.exp(-((x - 0.2) ** 2) / sx**2 - ((z - 0.3) ** 2) / sz**2)
    bump2 = np.exp(-((x - 0.7) ** 2) / sx**2 - ((z - 0.8) ** 2) / sz**2)
    return (np.pi**sx * sz) * (1.2 * bump1 + 0.8 * bump2)


def gen_bivariate_coverage(n: int = 250, seed: int = 0, noise_sd: float = 1.0) -> tuple:
    """Draw the coverage design: x, z ~ Uniform(0,1), y ~ Normal(f(x,z), 1)."""
    if n < 10:
        raise DataError(f"coverage design needs at least 10 rows, got {n}")
    rng = child_rng(seed, "bivariate_coverage")
    x = rng.uniform(0.0, 1.0, n)
    z = rng.uniform(0.0, 1.0, n)
    f = coverage_surface(x, z)
    y = f + noise_sd * rng.standard_normal(n)
    ds = Dataset(W=np.column_stack([x, z]), colnames=["x", "z"], y=y)
    return ds, f


def fe_surface(x1, x2, form: str) -> np.ndarray:
    """Structural surface of the grouped panel design.

    ``linear`` is 0.5·x1 + 0.2·x2; ``nonlinear`` is a two-bump exponential
    with modes near (0.15, 0.15) and (0.5, 0.5).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if form == "linear":
        return 0.5 * x1 + 0.2 * x2
    if form == "nonlinear":
        e1 = np.exp((-((x1 - 0.15) ** 2) - (x2 - 0.15) ** 2) / 4.0)
        e2 = np.exp((-((x1 - 0.5) ** 2) - (x2 - 0.5) ** 2) / 2.5)
        return e1 + 2.5 * e2
    raise DataError(f"unknown surface form {form!r}; use 'linear' or 'nonlinear'")


def fe_gradient(x1, x2, form: str) -> tuple:
    """Partial derivatives of :func:`fe_surface`, per row."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if form == "linear":
        return np.full(x1.shape, 0.5), np.full(x1.shape, 0.2)
    if form == "nonlinear":
        e1 = np.exp((-((x1 - 0.15) ** 2) - (x2 - 0.15) ** 2) / 4.0)
        e2 = np.exp((-((x1 - 0.5) ** 2) - (x2 - 0.5) ** 2) / 2.5)
        d1 = -0.5 * (x1 - 0.15) * e1 - 2.0 * (x1 - 0.5) * e2
        d2 = -0.5 * (x2 - 0.15) * e1 - 2.0 * (x2 - 0.5) * e2
        return d1, d2
    raise DataError(f"unknown surface form {form!r}; use 'linear' or 'nonlinear'")


def _fe_dataset(x1, x2, groups, y) -> Dataset:
    df = pd.DataFrame({"y": y, "x1": x1, "x2": x2, "g": groups})
    return Dataset.from_frame(
        df,
        outcome="y",
        covariates=["x1", "x2", "g"],
        cluster="g",
        categorical=["g"],
    )


def gen_fe_dgp(
    J: int = 50,
    T: int = 10,
    rho: float = 0.0,
    form: str = "linear",
    seed: int = 0,
    noise_var: float = 1.25,
    test_T: int = None,
) -> tuple:
    """Draw the grouped panel design with correlated group effects.

    Per group j, (μ_j, x̄_j) is bivariate normal with covariance
    [[3, ρ], [ρ, 0.3]]; within groups x1 ~ Normal(x̄_j, 1), x2 ~ Normal(0,1),
    and y = f(x1, x2) + μ_j + ε with ε ~ Normal(0, noise_var). Larger ρ ties
    x1 more tightly to the group effect, which is exactly what penalizes
    estimators that shrink the group intercepts.

    Groups are balanced: T training rows and ``test_T`` held-out rows per
    group (held-out rows share the group effects, so group-aware methods can
    predict them). Because rows are i.i.d. given their group, balanced
    labeling is equivalent to randomly assigning each row a group.

    Returns ``(train, test, truth)``; ``truth`` includes per-row derivative
    arrays and the sample-average derivative targets over the training rows.
    """
    if J < 2:
        raise DataError(f"need at least 2 groups, got {J}")
    if T < 2:
        raise DataError(f"need at least 2 rows per group, got {T}")
    if noise_var <= 0:
        raise DataError("noise_var must be positive")
    det = FE_GROUP_VAR_MU * FE_GROUP_VAR_XBAR - rho**2
    if det <= 0:
        bound = math.sqrt(FE_GROUP_VAR_MU * FE_GROUP_VAR_XBAR)
        raise DataError(
            f"group covariance is not positive definite: |rho| must be "
            f"below sqrt({FE_GROUP_VAR_MU}*{FE_GROUP_VAR_XBAR}) ~= {bound:.3f}, "
            f"got {rho}"
        )
    test_T = T if test_T is None else int(test_T)
    if test_T < 1:
        raise DataError("test_T must be at least 1")

    rng = child_rng(seed, "fe_dgp")
    # (μ_j, x̄_j) via the explicit 2×2 Cholesky factor of [[3, ρ], [ρ, 0.3]].
    z = rng.standard_normal((J, 2))
    l11 = math.sqrt(FE_GROUP_VAR_MU)
    l21 = rho / l11
    l22 = math.sqrt(FE_GROUP_VAR_XBAR - rho**2 / FE_GROUP_VAR_MU)
    mu_j = l11 * z[:, 0]
    xbar_j = l21 * z[:, 0] + l22 * z[:, 1]

    width = max(3, len(str(J - 1)))
    glabels = np.array([f"g{j:0{width}d}" for j in range(J)])
    sd = math.sqrt(noise_var)

    def draw(rows_per_group):
        gidx = np.repeat(np.arange(J), rows_per_group)
        n = gidx.size
        x1 = xbar_j[gidx] + rng.standard_normal(n)
        x2 = rng.standard_normal(n)
        f = fe_surface(x1, x2, form)
        y = f + mu_j[gidx] + sd * rng.standard_normal(n)
        return _fe_dataset(x1, x2, glabels[gidx], y), x1, x2, f, mu_j[gidx]

    train, x1_tr, x2_tr, f_tr, mu_tr = draw(T)
    test, x1_te, x2_te, f_te, mu_te = draw(test_T)
    d1, d2 = fe_gradient(x1_tr, x2_tr, form)
    truth = {
        "form": form,
        "rho": float(rho),
        "mu_j": mu_j,
        "xbar_j": xbar_j,
        "d_x1": d1,
        "d_x2": d2,
        "ame_x1": float(d1.mean()),
        "ame_x2": float(d2.mean()),
        "mean_train": f_tr + mu_tr,
        "mean_test": f_te + mu_te,
    }
    return train, test, truth


def gen_plr_synthetic(
    n: int = 2000,
    seed: int = 0,
    theta: float = 0.5,
    form: str = "linear",
    noise_sd: float = 1.0,
) -> tuple:
    """Randomized binary treatment with a constant effect.

    x1..x3 ~ Normal(0,1) i.i.d.; w ~ Bernoulli(0.5) independent of the
    covariates; y = θ·w + g(x) + ε with ε ~ Normal(0, noise_sd²). Because
    the effect is constant and the treatment randomized, θ is both the
    partially-linear coefficient and the average treatment effect, and the
    true propensity is 0.5 everywhere.
    """
    if n < 10:
        raise DataError(f"treatment design needs at least 10 rows, got {n}")
    rng = child_rng(seed, "plr_synthetic")
    X = rng.standard_normal((n, 3))
    w = (rng.uniform(size=n) < 0.5).astype(float)
    if form == "linear":
        g = 1.0 * X[:, 0] + 0.5 * X[:, 1] - 0.5 * X[:, 2]
    elif form == "nonlinear":
        g = np.sin(X[:, 0]) * np.cos(X[:, 1]) + 0.5 * X[:, 2]
    else:
        raise DataError(f"unknown surface form {form!r}; use 'linear' or 'nonlinear'")
    y = theta * w + g + noise_sd * rng.standard_normal(n)
    ds = Dataset(
        W=np.column_stack([X, w]),
        colnames=["x1", "x2", "x3", "w"],
        y=y,
    )
    truth = {"theta": float(theta), "g": g, "propensity": 0.5}
    return ds, truth


@dataclass
class DgpConfig:
    """Validated simulation-design configuration (used by the CLI)."""

    kind: str
    n: int = 1000
    J: int = 50
    T: int = 10
    rho: float = 0.0
    noise_var: float = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise DataError(
                f"unknown design kind {self.kind!r}; choose from {DGP_KINDS}"
            )
        if self.n <= 0 or self.J < 2 or self.T < 2:
            raise DataError("design sizes must be positive (J >= 2, T >= 2)")
        if not (0.0 <= self.rho < 1.0):
            raise DataError(f"rho must lie in [0, 1), got {self.rho}")
        if self.noise_var is not None and self.noise_var <= 0:
            raise DataError("noise_var must be positive")

    def generate(self) -> tuple:
        """Materialize the design; returns the generator's native tuple."""
        if self.kind == "three_hills":
            sd = math.sqrt(self.noise_var) if self.noise_var else 0.5
            return gen_three_hills(self.n, seed=self.seed, noise_sd=sd)
        if self.kind in ("fe_linear", "fe_nonlinear"):
            form = self.kind.split("_", 1)[1]
            var = self.noise_var if self.noise_var else 1.25
            return gen_fe_dgp(
                J=self.J, T=self.T, rho=self.rho, form=form,
                seed=self.seed, noise_var=var,
            )
        if self.kind == "bivariate_coverage":
            sd = math.sqrt(self.noise_var) if self.noise_var else 1.0
            return gen_bivariate_coverage(self.n, seed=self.seed, noise_sd=sd)
        sd = math.sqrt(self.noise_var) if self.noise_var else 1.0
        return gen_plr_synthetic(self.n, seed=self.seed, noise_sd=sd)


# ---------------------------------------------------------------------------
# result container and bootstrap
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    """Tidy study output: per-replicate rows plus aggregate rows."""

    rows: list
    aggregates: list
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        """Write the per-replicate rows as CSV (one row per replicate/cell)."""
        fields = []
        for row in self.rows:
            for key in row:
                if key not in fields:
                    fields.append(key)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, restval="")
            writer.writeheader()
            writer.writerows(self.rows)

    def write_json(self, path) -> None:
        """Write the aggregates (plus config metadata) as JSON."""
        with open(path, "w") as fh:
            json.dump(
                {"meta": self.meta, "aggregates": self.aggregates},
                fh,
                indent=2,
                default=float,
            )
            fh.write("\n")

    def to_dict(self) -> dict:
        return {"meta": self.meta, "aggregates": self.aggregates, "rows": self.rows}


def percentile_bootstrap(
    values,
    stat=np.mean,
    n_boot: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple:
    """Percentile-bootstrap CI for ``stat`` over i.i.d. replicate values."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float("nan"), float("nan")
    rng = child_rng(seed, "bootstrap")
    idx = rng.integers(0, values.size, size=(int(n_boot), values.size))
    stats = np.array([float(stat(values[row])) for row in idx])
    alpha = (1.0 - level) / 2.0
    return (
        float(np.quantile(stats, alpha)),
        float(np.quantile(stats, 1.0 - alpha)),
    )


def _rmse(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(errors**2)))


# ---------------------------------------------------------------------------
# three-hills accuracy study
# ---------------------------------------------------------------------------

def run_three_hills(
    n: int = 3000,
    reps: int = 20,
    sketch: str = "subsample",
    delta: float = 5.0,
    seed: int = 0,
    starts=(0.0,),
    test_n: int = None,
) -> ExperimentResult:
    """Out-of-sample accuracy of the kernel fit on the three-hills surface.

    Per replicate: draw a training and an independent test sample, fit the
    pure kernel model (no unpenalized intercept, so the unsketched variant
    exercises the dedicated full-kernel route), and record out-of-sample
    RMSE against the observed test outcomes (noise floor = noise sd) plus
    the finite-difference average marginal effects and their analytic
    targets.
    """
    from .effects import ame
    from .estimator import GKRLS

    test_n = n if test_n is None else int(test_n)
    rows = []
    for r in range(reps):
        train, truth = gen_three_hills(n, seed=hash_key(seed, "train", r))
        test, _ = gen_three_hills(test_n, seed=hash_key(seed, "test", r))
        t0 = time.perf_counter()
        model = GKRLS(
            spec="y ~ kernel(x1, x2)",
            intercept=False,
            sketch=sketch,
            delta=delta,
            seed=hash_key(seed, "fit", r),
            starts=starts,
        ).fit(train)
        fit_seconds = time.perf_counter() - t0
        pred = model.predict(test)
        oos_rmse = _rmse(pred - test.y)
        rows.append(
            {
                "study": "three_hills",
                "rep": r,
                "n": n,
                "sketch": sketch,
                "delta": float(delta),
                "oos_rmse": oos_rmse,
                "ame_x1": float(ame(model, "x1", variance=None).value),
                "ame_x2": float(ame(model, "x2", variance=None).value),
                "ame_true_x1": truth["ame_x1"],
                "ame_true_x2": truth["ame_x2"],
                "fit_seconds": fit_seconds,
            }
        )
    oos = np.array([row["oos_rmse"] for row in rows])
    err1 = np.array([row["ame_x1"] - row["ame_true_x1"] for row in rows])
    lo, hi = percentile_bootstrap(oos, np.median, seed=hash_key(seed, "boot"))
    aggregates = [
        {
            "study": "three_hills",
            "n": n,
            "sketch": sketch,
            "delta": float(delta),
            "reps": reps,
            "oos_rmse_median": float(np.median(oos)),
            "oos_rmse_median_lo": lo,
            "oos_rmse_median_hi": hi,
            "oos_rmse_mean": float(np.mean(oos)),
            "ame_x1_rmse": _rmse(err1),
            "ame_x1_bias": float(np.mean(err1)),
        }
    ]
    meta = {
        "study": "three_hills",
        "n": n,
        "test_n": test_n,
        "reps": reps,
        "sketch": sketch,
        "delta": float(delta),
        "seed": seed,
    }
    return ExperimentResult(rows, aggregates, meta)


# ---------------------------------------------------------------------------
# grouped-panel (fixed-effects) study
# ---------------------------------------------------------------------------

FE_METHODS = (
    "ols",
    "fixed_effects",
    "random_effects",
    "kernel_fe_inside",
    "gkrls_fe_outside",
    "gkrls_plus_linear",
)

_FE_SPECS = {
    "ols": "y ~ fixed(x1, x2)",
    "fixed_effects": "y ~ fixed(x1, x2, g)",
    "random_effects": "y ~ fixed(x1, x2) + re(g)",
    "kernel_fe_inside": "y ~ kernel(x1, x2, g)",
    "gkrls_fe_outside": "y ~ fixed(g) + kernel(x1, x2)",
    "gkrls_plus_linear": "y ~ fixed(x1, x2, g) + kernel(x1, x2)",
}


def _fit_fe_method(method, train, *, sketch, delta, seed, starts):
    from .estimator import GKRLS

    return GKRLS(
        spec=_FE_SPECS[method],
        intercept=True,
        sketch=sketch,
        delta=delta,
        seed=seed,
        starts=starts,
    ).fit(train)


def run_fe_study(
    rhos=(0.0, 0.3, 0.6, 0.9),
    forms=("linear", "nonlinear"),
    methods=FE_METHODS,
    reps: int = 200,
    J: int = 50,
    T: int = 10,
    seed: int = 0,
    sketch: str = "subsample",
    delta: float = 5.0,
    starts=(0.0,),
    n_boot: int = 1000,
) -> ExperimentResult:
    """Estimator comparison on the grouped panel design.

    For every (form, ρ, replicate, method) cell: fit, record the
    finite-difference average marginal effects of x1 and x2 with their
    analytic targets, out-of-sample RMSE on a held-out draw sharing the
    group effects, and the fit wall time. Aggregates carry RMSE / median
    absolute error / bias of the AMEs with percentile-bootstrap CIs.
    """
    from .effects import ame

    unknown = [m for m in methods if m not in FE_METHODS]
    if unknown:
        raise DataError(f"unknown study methods {unknown}; choose from {FE_METHODS}")

    rows = []
    for form in forms:
        for rho in rhos:
            for r in range(reps):
                train, test, truth = gen_fe_dgp(
                    J=J, T=T, rho=rho, form=form,
                    seed=hash_key(seed, "fe_data", form, rho, r),
                )
                for method in methods:
                    t0 = time.perf_counter()
                    model = _fit_fe_method(
                        method, train,
                        sketch=sketch, delta=delta,
                        seed=hash_key(seed, "fe_fit", form, rho, r, method),
                        starts=starts,
                    )
                    fit_seconds = time.perf_counter() - t0
                    pred = model.predict(test)
                    rows.append(
                        {
                            "study": "fe",
                            "form": form,
                            "rho": float(rho),
                            "rep": r,
                            "method": method,
                            "ame_x1": float(ame(model, "x1", variance=None).value),
                            "ame_x2": float(ame(model, "x2", variance=None).value),
                            "ame_true_x1": truth["ame_x1"],
                            "ame_true_x2": truth["ame_x2"],
                            "oos_rmse": _rmse(pred - test.y),
                            "fit_seconds": fit_seconds,
                        }
                    )

    aggregates = []
    for form in forms:
        for rho in rhos:
            for method in methods:
                cell = [
                    row for row in rows
                    if row["form"] == form
                    and row["rho"] == float(rho)
                    and row["method"] == method
                ]
                if not cell:
                    continue
                agg = {
                    "study": "fe",
                    "form": form,
                    "rho": float(rho),
                    "method": method,
                    "reps": len(cell),
                }
                for var in ("x1", "x2"):
                    err = np.array(
                        [row[f"ame_{var}"] - row[f"ame_true_{var}"] for row in cell]
                    )
                    agg[f"ame_{var}_rmse"] = _rmse(err)
                    agg[f"ame_{var}_medae"] = float(np.median(np.abs(err)))
                    agg[f"ame_{var}_bias"] = float(np.mean(err))
                    if n_boot:
                        bseed = hash_key(seed, "fe_boot", form, rho, method, var)
                        lo, hi = percentile_bootstrap(
                            err, stat=_rmse, n_boot=n_boot, seed=bseed
                        )
                        agg[f"ame_{var}_rmse_lo"] = lo
                        agg[f"ame_{var}_rmse_hi"] = hi
                oos = np.array([row["oos_rmse"] for row in cell])
                agg["oos_rmse_mean"] = float(np.mean(oos))
                agg["oos_rmse_median"] = float(np.median(oos))
                agg["fit_seconds_median"] = float(
                    np.median([row["fit_seconds"] for row in cell])
                )
                aggregates.append(agg)

    meta = {
        "study": "fe",
        "rhos": [float(r) for r in rhos],
        "forms": list(forms),
        "methods": list(methods),
        "reps": reps,
        "J": J,
        "T": T,
        "sketch": sketch,
        "delta": float(delta),
        "seed": seed,
        "n_boot": n_boot,
    }
    return ExperimentResult(rows, aggregates, meta)


# ---------------------------------------------------------------------------
# sketch-stability study
# ---------------------------------------------------------------------------

def run_sketch_stability(
    deltas=(1.0, 3.0, 5.0, 15.0),
    inner: int = 20,
    outer: int = 20,
    rho: float = 0.6,
    form: str = "nonlinear",
    methods=("gkrls_fe_outside", "kernel_fe_inside"),
    J: int = 50,
    T: int = 10,
    seed: int = 0,
    starts=(0.0,),
    n_boot: int = 1000,
) -> ExperimentResult:
    """Stability of the average marginal effect under subsampled sketching.

    Per outer dataset: fit the unsketched model once (its error is
    deterministic given the data), then refit with subsampled sketching
    ``inner`` times per multiplier δ, varying only the sketch randomness.
    Aggregation averages the per-dataset RMSEs of the x1 effect and reports
    the relative increase over the unsketched baseline; see
    :func:`relative_impact_from_rows` for the exact arithmetic.
    """
    from .effects import ame

    unknown = [m for m in methods if m not in FE_METHODS]
    if unknown:
        raise DataError(f"unknown study methods {unknown}; choose from {FE_METHODS}")

    rows = []
    for s in range(outer):
        train, _, truth = gen_fe_dgp(
            J=J, T=T, rho=rho, form=form, seed=hash_key(seed, "sk_data", s)
        )
        for method in methods:
            model = _fit_fe_method(
                method, train,
                sketch="none", delta=5.0,
                seed=hash_key(seed, "sk_unsk", s, method),
                starts=starts,
            )
            rows.append(
                {
                    "study": "sketch_stability",
                    "dataset": s,
                    "method": method,
                    "delta": "unsketch",
                    "rep": 0,
                    "ame_x1": float(ame(model, "x1", variance=None).value),
                    "ame_true_x1": truth["ame_x1"],
                }
            )
            for d in deltas:
                for m in range(inner):
                    model = _fit_fe_method(
                        method, train,
                        sketch="subsample", delta=float(d),
                        seed=hash_key(seed, "sk_fit", s, method, float(d), m),
                        starts=starts,
                    )
                    rows.append(
                        {
                            "study": "sketch_stability",
                            "dataset": s,
                            "method": method,
                            "delta": float(d),
                            "rep": m,
                            "ame_x1": float(ame(model, "x1", variance=None).value),
                            "ame_true_x1": truth["ame_x1"],
                        }
                    )

    aggregates = relative_impact_from_rows(rows, n_boot=n_boot, seed=seed)
    meta = {
        "study": "sketch_stability",
        "deltas": [float(d) for d in deltas],
        "inner": inner,
        "outer": outer,
        "rho": float(rho),
        "form": form,
        "methods": list(methods),
        "J": J,
        "T": T,
        "seed": seed,
        "n_boot": n_boot,
    }
    return ExperimentResult(rows, aggregates, meta)


def relative_impact_from_rows(rows, n_boot: int = 0, seed: int = 0) -> list:
    """Recompute the sketch-stability aggregates from the per-run row log.

    Per dataset s and multiplier δ the effect RMSE over the sketch draws is
    RMSE_δ(s) = sqrt(mean_m (est − truth)²); the unsketched run contributes
    its absolute error. Averaging each across datasets gives the mean RMSE
    curve, and the relative impact of sketching is
    (mean RMSE_δ − mean RMSE_unsketch) / mean RMSE_unsketch. Median-based
    analogues of the same quantities are reported alongside.
    """
    methods = []
    for row in rows:
        if row["method"] not in methods:
            methods.append(row["method"])

    aggregates = []
    for method in methods:
        sub = [row for row in rows if row["method"] == method]
        datasets = sorted({row["dataset"] for row in sub})
        deltas = []
        for row in sub:
            if row["delta"] != "unsketch" and row["delta"] not in deltas:
                deltas.append(row["delta"])
        deltas.sort()

        # per-dataset RMSE arrays, aligned on the dataset index
        unsk = np.full(len(datasets), np.nan)
        per_delta = {d: np.full(len(datasets), np.nan) for d in deltas}
        for i, s in enumerate(datasets):
            for row in sub:
                if row["dataset"] != s:
                    continue
                err = row["ame_x1"] - row["ame_true_x1"]
                if row["delta"] == "unsketch":
                    unsk[i] = abs(err)
            for d in deltas:
                errs = [
                    row["ame_x1"] - row["ame_true_x1"]
                    for row in sub
                    if row["dataset"] == s and row["delta"] == d
                ]
                if errs:
                    per_delta[d][i] = _rmse(errs)

        base_mean = float(np.nanmean(unsk))
        base_median = float(np.nanmedian(unsk))
        aggregates.append(
            {
                "study": "sketch_stability",
                "method": method,
                "delta": "unsketch",
                "rmse_mean": base_mean,
                "rmse_median": base_median,
                "relative_impact": 0.0,
                "relative_impact_median": 0.0,
            }
        )
        for d in deltas:
            vals = per_delta[d]
            agg = {
                "study": "sketch_stability",
                "method": method,
                "delta": float(d),
                "rmse_mean": float(np.nanmean(vals)),
                "rmse_median": float(np.nanmedian(vals)),
                "relative_impact": float(
                    (np.nanmean(vals) - base_mean) / base_mean
                ),
                "relative_impact_median": float(
                    (np.nanmedian(vals) - base_median) / base_median
                ),
            }
            if n_boot:
                ok = ~(np.isnan(vals) | np.isnan(unsk))
                pair = np.column_stack([vals[ok], unsk[ok]])
                if pair.shape[0] >= 2:
                    rng = child_rng(hash_key(seed, "ri_boot", method, float(d)), "bootstrap")
                    idx = rng.integers(0, pair.shape[0], size=(int(n_boot), pair.shape[0]))
                    stats = []
                    for draw in idx:
                        mb = float(np.mean(pair[draw, 1]))
                        stats.append((float(np.mean(pair[draw, 0])) - mb) / mb)
                    agg["relative_impact_lo"] = float(np.quantile(stats, 0.025))
                    agg["relative_impact_hi"] = float(np.quantile(stats, 0.975))
            aggregates.append(agg)
    return aggregates


# ---------------------------------------------------------------------------
# runtime-scaling study
# ---------------------------------------------------------------------------

_SCALING_GRIDS = {
    "unsketched": (500, 1000, 2000, 4000),
    "subsample": (10_000, 31_623, 100_000),
}

_SCALING_STAGES = ("estimation", "prediction", "effects")


def _ols_slope(logx, logy) -> float:
    logx = np.asarray(logx, dtype=float)
    logy = np.asarray(logy, dtype=float)
    xc = logx - logx.mean()
    return float(np.dot(xc, logy - logy.mean()) / np.dot(xc, xc))


def run_scaling(
    n_grid=None,
    methods=("unsketched", "subsample"),
    delta: float = 5.0,
    seed: int = 0,
    reps: int = 3,
    starts=(0.0,),
) -> ExperimentResult:
    """Wall-clock scaling of estimation, prediction, and effects in N.

    Uses the pure kernel model on the three-hills design so the unsketched
    variant exercises the cubic-cost dense route. ``n_grid`` may be a
    mapping from method to an N tuple, a single tuple applied to every
    method, or None for the built-in grids. Per method and stage, the
    aggregate row reports the log-log OLS slope of the median times.
    """
    from .effects import ame
    from .estimator import GKRLS

    grids = {}
    for method in methods:
        if isinstance(n_grid, dict):
            grid = n_grid.get(method)
        else:
            grid = n_grid
        if grid is None:
            grid = _SCALING_GRIDS.get(method)
        if grid is None:
            raise DataError(
                f"no size grid given for method {method!r}; pass n_grid"
            )
        grids[method] = tuple(int(v) for v in grid)

    sketch_of = {"unsketched": "none", "none": "none",
                 "subsample": "subsample", "gaussian": "gaussian"}
    rows = []
    for method in methods:
        sketch = sketch_of.get(method)
        if sketch is None:
            raise DataError(f"unknown scaling method {method!r}")
        # warm-up fit so one-time library initialization is not billed to
        # the first timed size
        warm, _ = gen_three_hills(
            min(grids[method]), seed=hash_key(seed, "warm", method)
        )
        GKRLS(
            spec="y ~ kernel(x1, x2)", intercept=False, sketch=sketch,
            delta=delta, seed=hash_key(seed, "warmfit", method), starts=starts,
        ).fit(warm)
        for n in grids[method]:
            for r in range(reps):
                train, _ = gen_three_hills(n, seed=hash_key(seed, "data", method, n, r))
                t0 = time.perf_counter()
                model = GKRLS(
                    spec="y ~ kernel(x1, x2)",
                    intercept=False,
                    sketch=sketch,
                    delta=delta,
                    seed=hash_key(seed, "fit", method, n, r),
                    starts=starts,
                ).fit(train)
                t_est = time.perf_counter() - t0
                fresh, _ = gen_three_hills(n, seed=hash_key(seed, "pred", method, n, r))
                t0 = time.perf_counter()
                model.predict(fresh)
                t_pred = time.perf_counter() - t0
                t0 = time.perf_counter()
                ame(model, "x1", variance=None)
                t_eff = time.perf_counter() - t0
                rows.append(
                    {
                        "study": "scaling",
                        "method": method,
                        "n": n,
                        "rep": r,
                        "estimation": t_est,
                        "prediction": t_pred,
                        "effects": t_eff,
                    }
                )

    aggregates = []
    for method in methods:
        for stage in _SCALING_STAGES:
            medians = []
            for n in grids[method]:
                times = [
                    row[stage] for row in rows
                    if row["method"] == method and row["n"] == n
                ]
                medians.append(float(np.median(times)))
            slope = _ols_slope(np.log(grids[method]), np.log(medians))
            aggregates.append(
                {
                    "study": "scaling",
                    "method": method,
                    "stage": stage,
                    "slope": slope,
                    "n_grid": list(grids[method]),
                    "median_seconds": medians,
                    "monotone": bool(np.all(np.diff(medians) >= 0)),
                }
            )

    meta = {
        "study": "scaling",
        "methods": list(methods),
        "grids": {k: list(v) for k, v in grids.items()},
        "delta": float(delta),
        "reps": reps,
        "seed": seed,
    }
    return ExperimentResult(rows, aggregates, meta)
