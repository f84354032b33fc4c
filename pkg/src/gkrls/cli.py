"""Command-line front door: fit, predict, effects, dml, rlearner, simulate,
coverage, bench.

Exit codes: 0 success, 2 usage error, 3 data/validation error, 4 numeric
convergence failure (for ``fit`` the artifact is still written, flagged).
Every subcommand accepts ``--seed`` (falling back to the ``GKRLS_SEED``
environment variable) and is end-to-end deterministic given it; the resolved
configuration is echoed to stderr unless ``--quiet`` is given. ``--threads``
caps BLAS worker threads (default 1, keeping timing studies reproducible).

Machine-readable outputs: per-row CSV goes to ``--out`` (stdout when
omitted), aggregate/report JSON to ``--json`` or the subcommand's default
path. The JSON documents validate against the schemas in ``docs/schemas``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np


class UsageError(ValueError):
    """Command-line usage problem (maps to exit code 2)."""


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default: GKRLS_SEED env var, then 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="max BLAS threads (default 1)")
    p.add_argument("--quiet", action="store_true",
                   help="do not echo the resolved configuration to stderr")
    p.add_argument("--out", default=None,
                   help="output CSV path (default: stdout)")
    p.add_argument("--json", dest="json_out", default=None,
                   help="aggregate/report JSON path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gkrls",
        description="Generalized kernel regularized least squares toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write a .gkm artifact")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--spec", default=None,
                   help='model spec, e.g. "y ~ fixed(x1) + kernel(x1, x2)"')
    p.add_argument("--outcome", default=None,
                   help="outcome column (required when --spec is omitted)")
    p.add_argument("--family", default="gaussian")
    p.add_argument("--criterion", choices=("reml", "gcv"), default="reml")
    p.add_argument("--lambda", dest="lambdas", type=float, default=None,
                   help="fix the smoothing parameter instead of optimizing")
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--sketch", choices=("subsample", "gaussian", "none"),
                   default="subsample")
    p.add_argument("--delta", type=float, default=5.0)
    p.add_argument("--sketch-size", type=int, default=None)
    p.add_argument("--standardize", choices=("mahalanobis", "scale", "none"),
                   default="mahalanobis")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--cluster", default=None, help="cluster-label column")
    p.add_argument("--weights", default=None, help="observation-weight column")
    p.add_argument("--categorical", default=None,
                   help="comma-separated columns to force-treat as categorical")
    p.add_argument("--model", dest="model_out", default="model.gkm",
                   help="artifact output path (default model.gkm)")
    _add_common(p)

    p = sub.add_parser("predict", help="predict from a saved artifact")
    p.add_argument("--model", required=True, help=".gkm artifact")
    p.add_argument("--data", required=True, help="CSV of rows to predict")
    p.add_argument("--scale", choices=("response", "link"), default="response")
    p.add_argument("--se", action="store_true",
                   help="add a standard-error column (stored covariance)")
    p.add_argument("--se-kind", default="bayes",
                   help="stored covariance to use for --se (default bayes)")
    _add_common(p)

    p = sub.add_parser("effects", help="marginal effects from a saved artifact")
    p.add_argument("--model", required=True, help=".gkm artifact")
    p.add_argument("--data", required=True,
                   help="CSV of evaluation rows (artifacts carry no data)")
    p.add_argument("--variable", required=True)
    p.add_argument("--kind",
                   choices=("ame", "fd", "grid", "second", "contrast"),
                   default="ame")
    p.add_argument("--grid", default=None, help="lo:hi:n (kind=grid/second)")
    p.add_argument("--points", default=None,
                   help="min,inflection,max (kind=contrast)")
    p.add_argument("--lo", type=float, default=0.0, help="kind=fd lower value")
    p.add_argument("--hi", type=float, default=1.0, help="kind=fd upper value")
    p.add_argument("--se-kind", default="bayes",
                   help="stored covariance kind (default bayes)")
    p.add_argument("--level", type=float, default=0.95)
    _add_common(p)

    p = sub.add_parser("dml", help="double/debiased ML for a treatment effect")
    p.add_argument("--data", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--estimand", choices=("plr", "ate"), default="plr")
    p.add_argument("--spec", default=None, help="nuisance model spec")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--trim", default=None, help="propensity trim lo,hi (ate)")
    p.add_argument("--cluster", default=None)
    p.add_argument("--categorical", default=None)
    _add_common(p)

    p = sub.add_parser("rlearner", help="R-learner heterogeneous effects")
    p.add_argument("--data", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--spec", default=None, help="nuisance model spec")
    p.add_argument("--spec-tau", default=None, help="effect-model spec")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--trim", default=None, help="propensity trim lo,hi")
    p.add_argument("--cluster", default=None)
    p.add_argument("--categorical", default=None)
    _add_common(p)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--dgp",
                   choices=("three_hills", "fe_study", "sketch_stability"),
                   required=True)
    p.add_argument("--n", type=int, default=3000, help="sample size per rep")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--sketch", choices=("subsample", "gaussian", "none"),
                   default="subsample")
    p.add_argument("--delta", type=float, default=5.0)
    p.add_argument("--rhos", default=None, help="comma list (fe_study)")
    p.add_argument("--forms", default=None, help="comma list (fe_study)")
    p.add_argument("--methods", default=None, help="comma list (fe_study)")
    p.add_argument("--deltas", default=None, help="comma list (sketch_stability)")
    p.add_argument("--inner", type=int, default=None, help="sketch reps per δ")
    p.add_argument("--outer", type=int, default=None, help="datasets")
    p.add_argument("--groups", type=int, default=50, help="J (fe designs)")
    p.add_argument("--per-group", type=int, default=10, help="T (fe designs)")
    p.add_argument("--full-scale", action="store_true",
                   help="paper-scale replicate counts instead of desk scale")
    _add_common(p)

    p = sub.add_parser("coverage", help="CI-coverage study on the two-bump surface")
    p.add_argument("--sims", type=int, default=50)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--grid-size", type=int, default=40)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--full-scale", action="store_true", help="200 simulations")
    _add_common(p)

    p = sub.add_parser("bench", help="runtime-scaling benchmark")
    p.add_argument("--grid", default=None,
                   help="lo:hi[:k] log-spaced sizes (default per-method grids)")
    p.add_argument("--methods", default="unsketched,subsample",
                   help="comma list of unsketched|subsample|gaussian")
    p.add_argument("--delta", type=float, default=5.0)
    p.add_argument("--reps", type=int, default=3)
    _add_common(p)

    return ap


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _echo_config(args, extra=None):
    if getattr(args, "quiet", False):
        return
    cfg = {k: v for k, v in vars(args).items() if k != "quiet" and v is not None}
    cfg.update(extra or {})
    print(f"gkrls {args.command} config: "
          f"{json.dumps(cfg, sort_keys=True, default=str)}", file=sys.stderr)


def _csv_list(text):
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text):
    vals = _csv_list(text)
    return None if vals is None else [float(v) for v in vals]


def _parse_linear_grid(text) -> np.ndarray:
    parts = (text or "").split(":")
    if len(parts) != 3:
        raise UsageError(f"--grid expects lo:hi:n, got {text!r}")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 2 or hi <= lo:
        raise UsageError("--grid needs hi > lo and n >= 2")
    return np.linspace(lo, hi, n)


def _parse_size_grid(text, default_points=4):
    parts = (text or "").split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"--grid expects lo:hi[:k], got {text!r}")
    lo, hi = float(parts[0]), float(parts[1])
    k = int(parts[2]) if len(parts) == 3 else default_points
    if hi <= lo or k < 2:
        raise UsageError("--grid needs hi > lo and k >= 2")
    sizes = np.unique(np.geomspace(lo, hi, k).round().astype(int))
    return tuple(int(s) for s in sizes)


def _write_rows_csv(rows, path):
    import csv

    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path:
            fh.close()


def _write_json(doc, path):
    text = json.dumps(doc, indent=2, default=float) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_table(path):
    import pandas as pd

    from .data import DataError

    try:
        df = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except pd.errors.ParserError as err:
        raise DataError(f"malformed CSV {path}: {err}") from None
    if df.shape[0] == 0:
        raise DataError(f"{path} contains no data rows")
    return df


def _load_dataset(args, outcome, spec_vars=None):
    from .data import load_csv

    # With an explicit model spec, expose every non-outcome column (the
    # cluster column included) so each variable the spec names resolves;
    # otherwise the default covariate rule applies (cluster excluded).
    covariates = None
    if spec_vars:
        import pandas as pd

        weights = getattr(args, "weights", None)
        header = pd.read_csv(args.data, nrows=0, encoding="utf-8").columns
        covariates = [c for c in header if c != outcome and c != weights]
    return load_csv(
        args.data,
        outcome=outcome,
        covariates=covariates,
        cluster=getattr(args, "cluster", None),
        weights=getattr(args, "weights", None),
        categorical=_csv_list(getattr(args, "categorical", None)),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    from .estimator import GKRLS
    from .persistence import save_model
    from .rng import resolve_seed
    from .terms import parse_spec

    seed = resolve_seed(args.seed)
    if args.spec is not None:
        outcome = parse_spec(args.spec).outcome
    elif args.outcome is not None:
        outcome = args.outcome
    else:
        raise UsageError("fit needs --spec or --outcome")
    _echo_config(args, {"resolved_seed": seed, "outcome": outcome})

    data = _load_dataset(args, outcome, spec_vars=args.spec is not None)
    model = GKRLS(
        spec=args.spec,
        family=args.family,
        criterion=args.criterion,
        lambdas=None if args.lambdas is None else [args.lambdas],
        intercept=not args.no_intercept,
        sketch=args.sketch,
        delta=args.delta,
        sketch_size=args.sketch_size,
        standardize=args.standardize,
        bandwidth=args.bandwidth,
        seed=seed,
    ).fit(data)

    t0 = time.perf_counter()
    model.predict(data)
    t_pred = time.perf_counter() - t0
    t0 = time.perf_counter()
    model.covariance("bayes")
    t_cov = time.perf_counter() - t0

    save_model(model, args.model_out)

    report = model.summary()
    report["timing_seconds"] = {
        "estimation": model.timings_["estimation"],
        "prediction": t_pred,
        "covariance": t_cov,
    }
    report["criterion_trace"] = model.state_.trace
    report["seed"] = seed
    report["artifact"] = args.model_out
    _write_json(report, args.json_out or f"{args.model_out}.report.json")
    print(f"wrote {args.model_out} "
          f"(converged={model.converged_}, edf={model.edf_:.2f})")
    return 0 if model.converged_ else 4


def cmd_predict(args) -> int:
    from .inference import prediction_se
    from .persistence import load_model
    from .terms import stack_prediction

    _echo_config(args)
    model = load_model(args.model)
    df = _load_table(args.data)
    rows = stack_prediction(model.design_, df)
    eta = rows @ model.coef_
    pred = eta if args.scale == "link" else model.family_.linkinv(eta)
    out_rows = [{"prediction": float(v)} for v in pred]
    if args.se:
        cov = model.covariance(args.se_kind)
        se = prediction_se(rows, cov.full)
        if args.scale == "response":
            se = se * np.abs(model.family_.mu_eta(eta))
        for row, s in zip(out_rows, se):
            row["se"] = float(s)
    _write_rows_csv(out_rows, args.out)
    return 0


def cmd_effects(args) -> int:
    from . import effects as fx
    from .persistence import load_model

    _echo_config(args)
    model = load_model(args.model)
    table = _load_table(args.data)
    kind = args.kind
    se_kind = args.se_kind
    if kind == "ame":
        est = fx.ame(model, args.variable, variance=se_kind, table=table)
    elif kind == "fd":
        est = fx.first_difference(
            model, args.variable, lo=args.lo, hi=args.hi,
            variance=se_kind, table=table,
        )
    elif kind == "grid":
        if args.grid is None:
            raise UsageError("--kind grid needs --grid lo:hi:n")
        est = fx.predicted_grid(
            model, args.variable, _parse_linear_grid(args.grid),
            variance=se_kind, table=table,
        )
    elif kind == "second":
        grid = None if args.grid is None else _parse_linear_grid(args.grid)
        est = fx.second_derivative_avg(
            model, args.variable, grid=grid, variance=se_kind, table=table,
        )
    else:
        pts = _float_list(args.points)
        if pts is None or len(pts) != 3:
            raise UsageError("--kind contrast needs --points min,inflection,max")
        est = fx.endpoint_contrast(
            model, args.variable, e_min=pts[0], e_max=pts[2], e_inflect=pts[1],
            variance=se_kind, table=table,
        )

    frame = est.to_frame(level=args.level)
    if args.out:
        frame.to_csv(args.out, index=False)
    else:
        sys.stdout.write(frame.to_csv(index=False))
    if args.json_out:
        _write_json(est.to_dict(level=args.level), args.json_out)
    return 0


def cmd_dml(args) -> int:
    from .metalearn import DEFAULT_TRIM, dml_ate, dml_plr
    from .rng import resolve_seed

    seed = resolve_seed(args.seed)
    _echo_config(args, {"resolved_seed": seed})
    data = _load_dataset(args, args.outcome, spec_vars=args.spec is not None)
    kwargs = dict(
        spec=args.spec,
        K=args.folds,
        seed=seed,
        cluster="auto" if args.cluster else None,
    )
    if args.estimand == "plr":
        result = dml_plr(data, args.treatment, **kwargs)
    else:
        trim = _float_list(args.trim)
        result = dml_ate(
            data, args.treatment,
            trim=tuple(trim) if trim else DEFAULT_TRIM,
            **kwargs,
        )
    _write_json(result.to_dict(), args.json_out or args.out)
    return 0


def cmd_rlearner(args) -> int:
    from .metalearn import DEFAULT_TRIM, rlearner
    from .rng import resolve_seed

    seed = resolve_seed(args.seed)
    _echo_config(args, {"resolved_seed": seed})
    data = _load_dataset(
        args, args.outcome,
        spec_vars=args.spec is not None or args.spec_tau is not None,
    )
    trim = _float_list(args.trim)
    result = rlearner(
        data, args.treatment,
        spec_nuisance=args.spec,
        spec_tau=args.spec_tau,
        K=args.folds,
        trim=tuple(trim) if trim else DEFAULT_TRIM,
        seed=seed,
        cluster="auto" if args.cluster else None,
    )
    if args.out:
        # per-observation effects go to the CSV; the summary stays in JSON
        rows = [
            {"tau_cv": float(a), "tau_full": float(b)}
            for a, b in zip(result.tau_cv, result.tau_full)
        ]
        _write_rows_csv(rows, args.out)
    _write_json(result.to_dict(), args.json_out)
    return 0


def cmd_simulate(args) -> int:
    from .rng import resolve_seed
    from .simlab import run_fe_study, run_sketch_stability, run_three_hills

    seed = resolve_seed(args.seed)
    _echo_config(args, {"resolved_seed": seed})
    if args.dgp == "three_hills":
        reps = args.reps if args.reps is not None else (100 if args.full_scale else 20)
        result = run_three_hills(
            n=args.n, reps=reps, sketch=args.sketch, delta=args.delta, seed=seed,
        )
    elif args.dgp == "fe_study":
        reps = args.reps if args.reps is not None else (1000 if args.full_scale else 200)
        kw = dict(reps=reps, J=args.groups, T=args.per_group, seed=seed,
                  sketch=args.sketch, delta=args.delta)
        rhos = _float_list(args.rhos)
        if rhos:
            kw["rhos"] = tuple(rhos)
        forms = _csv_list(args.forms)
        if forms:
            kw["forms"] = tuple(forms)
        methods = _csv_list(args.methods)
        if methods:
            kw["methods"] = tuple(methods)
        result = run_fe_study(**kw)
    else:
        inner = args.inner if args.inner is not None else (100 if args.full_scale else 20)
        outer = args.outer if args.outer is not None else (150 if args.full_scale else 20)
        kw = dict(inner=inner, outer=outer, J=args.groups, T=args.per_group, seed=seed)
        deltas = _float_list(args.deltas)
        if deltas:
            kw["deltas"] = tuple(deltas)
        methods = _csv_list(args.methods)
        if methods:
            kw["methods"] = tuple(methods)
        result = run_sketch_stability(**kw)

    _write_rows_csv(result.rows, args.out)
    if args.json_out:
        _write_json({"meta": result.meta, "aggregates": result.aggregates},
                    args.json_out)
    return 0


def cmd_coverage(args) -> int:
    from .inference import coverage_study
    from .rng import resolve_seed

    seed = resolve_seed(args.seed)
    _echo_config(args, {"resolved_seed": seed})
    sims = 200 if args.full_scale and args.sims == 50 else args.sims
    table = coverage_study(
        n_sims=sims, n=args.n, grid_size=args.grid_size,
        seed=seed, level=args.level,
    )
    _write_rows_csv(table, args.out)
    if args.json_out:
        _write_json({"sims": sims, "n": args.n, "grid_size": args.grid_size,
                     "rows": table}, args.json_out)
    return 0


def cmd_bench(args) -> int:
    from .rng import resolve_seed
    from .simlab import run_scaling

    seed = resolve_seed(args.seed)
    _echo_config(args, {"resolved_seed": seed})
    methods = tuple(_csv_list(args.methods) or ("unsketched", "subsample"))
    grid = None if args.grid is None else _parse_size_grid(args.grid)
    result = run_scaling(
        n_grid=grid, methods=methods, delta=args.delta, seed=seed,
        reps=args.reps,
    )
    _write_rows_csv(result.rows, args.out)
    _write_json({"meta": result.meta, "aggregates": result.aggregates},
                args.json_out)
    return 0


_HANDLERS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "effects": cmd_effects,
    "dml": cmd_dml,
    "rlearner": cmd_rlearner,
    "simulate": cmd_simulate,
    "coverage": cmd_coverage,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn
        threadpool_limits = None

    from .metalearn import MetalearnError
    from .persistence import PersistenceError
    from .solver import SolverError

    try:
        if threadpool_limits is not None and args.threads:
            with threadpool_limits(limits=args.threads):
                return _HANDLERS[args.command](args)
        return _HANDLERS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except SolverError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, MemoryError, PersistenceError,
            MetalearnError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
