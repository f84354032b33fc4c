"""Generalized kernel regularized least squares.

Additive models mixing unpenalized linear terms, random intercepts, and
Gaussian-kernel smooths, with REML/GCV smoothing selection, Nyström-style
sketching for large samples, Bayesian and sandwich uncertainty, marginal
effects, and cross-fitted causal estimators built on the same machinery.

Quick start::

    from gkrls import GKRLS, load_csv

    data = load_csv("train.csv", outcome="y", cluster="g")
    model = GKRLS(spec="y ~ fixed(g) + kernel(x1, x2)").fit(data)
    model.predict(test_frame)

The ``gkrls`` console script exposes the same functionality as subcommands
(``fit``, ``predict``, ``effects``, ``dml``, ``rlearner``, ``simulate``,
``coverage``, ``bench``).
"""

from .data import (
    DataError,
    Dataset,
    StandardizationTransform,
    apply_standardizer,
    fit_standardizer,
    load_csv,
)
from .effects import (
    EffectEstimate,
    ame,
    endpoint_contrast,
    first_difference,
    predicted_grid,
    second_derivative_avg,
)
from .estimator import GKRLS
from .families import FAMILIES, Family, get_family
from .inference import (
    VarianceEstimate,
    coverage_study,
    prediction_se,
    variance_bayes,
    variance_freq,
    variance_hh,
)
from .kernel import MemoryGuardError, SketchPlan, gaussian_kernel, make_sketch_plan
from .metalearn import (
    CausalEstimate,
    FoldPlan,
    MetalearnError,
    dml_ate,
    dml_plr,
    make_folds,
    rlearner,
)
from .persistence import PersistenceError, load_model, save_model
from .rng import child_rng, hash_key, resolve_seed
from .solver import SolverError
from .terms import ModelSpec, SpecError, TermSpec, parse_spec

__version__ = "0.1.0"

__all__ = [
    "GKRLS",
    "Dataset",
    "DataError",
    "StandardizationTransform",
    "apply_standardizer",
    "fit_standardizer",
    "load_csv",
    "EffectEstimate",
    "ame",
    "endpoint_contrast",
    "first_difference",
    "predicted_grid",
    "second_derivative_avg",
    "FAMILIES",
    "Family",
    "get_family",
    "VarianceEstimate",
    "coverage_study",
    "prediction_se",
    "variance_bayes",
    "variance_freq",
    "variance_hh",
    "MemoryGuardError",
    "SketchPlan",
    "gaussian_kernel",
    "make_sketch_plan",
    "CausalEstimate",
    "FoldPlan",
    "MetalearnError",
    "dml_ate",
    "dml_plr",
    "make_folds",
    "rlearner",
    "PersistenceError",
    "load_model",
    "save_model",
    "child_rng",
    "hash_key",
    "resolve_seed",
    "SolverError",
    "ModelSpec",
    "SpecError",
    "TermSpec",
    "parse_spec",
    "__version__",
]
