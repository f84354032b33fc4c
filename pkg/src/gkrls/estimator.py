"""High-level estimator tying data, design assembly, tuning, and fitting.

:class:`GKRLS` is a scikit-learn-style estimator: construct with
configuration, call :meth:`fit`, then use :meth:`predict`,
:meth:`covariance`, and the effects helpers. It accepts a
:class:`~gkrls.data.Dataset`, a pandas DataFrame plus a model spec, or plain
arrays (which get default column names ``x1..xP``).
"""

from __future__ import annotations

import copy
import time

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .data import DataError, Dataset
from .families import get_family
from .reml import RemlState, gcv_criterion, optimize_smoothing, reml_criterion
from .terms import assemble, default_spec, parse_spec, stack_prediction

__all__ = ["GKRLS"]


class GKRLS(BaseEstimator):
    """Hierarchical kernel-ridge estimator with REML/GCV-tuned penalties.

    Parameters
    ----------
    spec : str, dict, or ModelSpec, optional
        Model declaration, e.g. ``"y ~ fixed(x1) + kernel(x1, x2)"``. When
        omitted, defaults to a single kernel over all covariates (plus a
        linear block when ``include_linear=True``).
    family : str
        ``gaussian``, ``binomial_logit``, or ``poisson_log``.
    criterion : str
        Smoothing selection rule: ``reml`` (default) or ``gcv``.
    lambdas : array-like, optional
        Fixed smoothing parameters; skips criterion optimization.
    intercept : bool
        Include an intercept column in the fixed block.
    sketch, delta, sketch_size : str, float, int
        Fit-level kernel sketching defaults (per-term options override).
    standardize : str
        Kernel-input standardization: ``mahalanobis`` (default), ``scale``,
        or ``none``.
    bandwidth : float, optional
        Kernel bandwidth override (default: rank of the standardized inputs).
    seed : int
        Master seed for sketch randomness.
    starts : list, optional
        Override the multi-start set for smoothing optimization.
    max_kernel_n, force_kernel : int, bool
        Memory guard for unsketched/gaussian kernels.
    """

    def __init__(
        self,
        spec=None,
        family: str = "gaussian",
        criterion: str = "reml",
        lambdas=None,
        intercept: bool = True,
        sketch: str = "subsample",
        delta: float = 5.0,
        sketch_size: int = None,
        standardize: str = "mahalanobis",
        bandwidth: float = None,
        seed: int = 0,
        starts=None,
        include_linear: bool = False,
        max_kernel_n: int = 20_000,
        force_kernel: bool = False,
    ):
        self.spec = spec
        self.family = family
        self.criterion = criterion
        self.lambdas = lambdas
        self.intercept = intercept
        self.sketch = sketch
        self.delta = delta
        self.sketch_size = sketch_size
        self.standardize = standardize
        self.bandwidth = bandwidth
        self.seed = seed
        self.starts = starts
        self.include_linear = include_linear
        self.max_kernel_n = max_kernel_n
        self.force_kernel = force_kernel

    # ------------------------------------------------------------------ fit

    def _resolve_dataset(self, X, y):
        if isinstance(X, Dataset):
            if y is not None and not isinstance(y, str):
                raise DataError("pass the outcome inside the Dataset")
            return X, None
        if isinstance(X, pd.DataFrame):
            outcome = y if isinstance(y, str) else None
            if outcome is None and self.spec is not None:
                outcome = parse_spec(self.spec).outcome
            if outcome is None:
                raise DataError(
                    "DataFrame input needs an outcome: give a spec or y='col'"
                )
            return Dataset.from_frame(X, outcome=outcome), outcome
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if y is None:
            raise DataError("array input requires an outcome vector y")
        names = [f"x{j + 1}" for j in range(X.shape[1])]
        ds = Dataset(W=X, colnames=names, y=np.asarray(y, dtype=float))
        return ds, None

    def fit(self, X, y=None, *, weights=None):
        """Fit the model; returns self."""
        t0 = time.perf_counter()
        ds, _ = self._resolve_dataset(X, y)
        if self.spec is not None:
            spec = parse_spec(self.spec)
        else:
            spec = default_spec("y", ds.colnames, linear=self.include_linear)

        design = assemble(
            ds,
            spec,
            intercept=self.intercept,
            seed=self.seed,
            sketch=self.sketch,
            delta=self.delta,
            sketch_size=self.sketch_size,
            standardize=self.standardize,
            bandwidth=self.bandwidth,
            max_kernel_n=self.max_kernel_n,
            force_kernel=self.force_kernel,
        )

        w = ds.weights if weights is None else np.asarray(weights, dtype=float)
        fam = get_family(self.family)
        fam.validate_y(ds.y)

        if self.lambdas is not None and design.J > 0:
            lam = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
            if lam.size == 1 and design.J > 1:
                lam = np.full(design.J, float(lam[0]))
            rho = np.log(np.maximum(lam, np.finfo(float).tiny))
            if self.criterion == "gcv":
                _, state = gcv_criterion(design, ds.y, rho, weights=w,
                                         return_state=True)
            else:
                _, state = reml_criterion(design, ds.y, rho, family=fam,
                                          weights=w, return_state=True)
        else:
            state = optimize_smoothing(
                design, ds.y, family=fam, weights=w,
                criterion=self.criterion, starts=self.starts,
            )

        self._install(ds, spec, design, state)
        self.timings_ = {"estimation": time.perf_counter() - t0}
        return self

    def _install(self, ds: Dataset, spec, design, state: RemlState):
        fit = state.fit
        self.dataset_ = ds
        self.spec_ = spec
        self.design_ = design
        self.state_ = state
        self.fit_ = fit
        self.family_ = fit.family
        self.coef_ = fit.coef
        self.beta_ = fit.beta
        self.alphas_ = fit.alphas
        self.lambda_ = state.lambdas
        self.rho_ = state.rho
        self.sigma2_ = state.sigma2
        self.edf_ = state.edf
        self.criterion_value_ = state.criterion
        self.converged_ = state.converged and fit.converged
        self.fitted_values_ = fit.mu
        self.eta_values_ = fit.eta
        self.fixed_names_ = list(design.fixed_names)
        self.n_obs_ = design.N
        self.covariances_ = {}
        self.notes_ = list(design.notes) + list(state.notes)

    # ------------------------------------------------------------- predict

    def predict(self, table=None, scale: str = "response") -> np.ndarray:
        """Predict for new rows (or return training fitted values).

        ``table`` may be a DataFrame, Dataset, or dict of column arrays with
        the original covariate columns; stored standardizers and sketch
        reference points are reused, never refit.
        """
        self._check_fitted()
        if table is None:
            if scale == "link":
                return self.eta_values_.copy()
            return self.fitted_values_.copy()
        rows = stack_prediction(self.design_, table)
        eta = rows @ self.coef_
        if scale == "link":
            return eta
        if scale == "response":
            return self.family_.linkinv(eta)
        raise ValueError(f"scale must be 'link' or 'response', got {scale!r}")

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise RuntimeError("model is not fitted; call fit() first")

    # ----------------------------------------------------------- inference

    def covariance(self, kind: str = "bayes", cluster=None):
        """Coefficient covariance (see :mod:`gkrls.inference`); cached."""
        self._check_fitted()
        from .inference import coefficient_covariance

        key = kind if cluster is None else f"{kind}:{getattr(cluster, 'name', 'labels')}"
        if key not in self.covariances_:
            if getattr(self, "fit_", None) is None:
                raise ValueError(
                    f"covariance {kind!r} is not stored in this model artifact; "
                    f"available: {sorted(self.covariances_)}"
                )
            if kind == "cluster" and cluster is None:
                cluster = self.dataset_.g
                if cluster is None:
                    raise ValueError(
                        "cluster covariance needs cluster labels (none stored)"
                    )
            self.covariances_[key] = coefficient_covariance(
                self.fit_, kind=kind, sigma2=self.sigma2_, cluster=cluster
            )
        return self.covariances_[key]

    # ------------------------------------------------------------- summary

    def summary(self) -> dict:
        """JSON-ready fit report."""
        self._check_fitted()
        if getattr(self, "fit_", None) is None:
            # restored from an artifact: report the stored diagnostics
            stored = getattr(self, "artifact_summary_", None)
            if stored is not None:
                return copy.deepcopy(stored)
            raise RuntimeError("model artifact carries no stored fit report")
        d = {
            "family": self.family_.name,
            "n_obs": int(self.n_obs_),
            "n_fixed": int(self.design_.p),
            "penalized_blocks": [
                {"label": b.label, "dim": int(b.q), "rank": int(b.rank)}
                for b in self.design_.blocks
            ],
            "lambda": np.asarray(self.lambda_).tolist(),
            "sigma2": float(self.sigma2_),
            "edf": float(self.edf_),
            "selection": self.state_.method,
            "criterion": float(self.criterion_value_),
            "criterion_evaluations": int(self.state_.n_evaluations),
            "converged": bool(self.converged_),
            "solver_iterations": int(self.fit_.iterations),
            "fixed_coefficients": {
                name: float(b)
                for name, b in zip(self.fixed_names_, self.beta_)
            },
            "notes": list(self.notes_),
        }
        if hasattr(self, "timings_"):
            d["timing_seconds"] = {
                k: float(v) for k, v in self.timings_.items()
            }
        return d
