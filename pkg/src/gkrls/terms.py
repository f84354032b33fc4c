"""Declarative model terms and design assembly.

A model is declared either as a formula-like string::

    y ~ fixed(x1, x2) + re(group) + kernel(x1, x2, x3; sketch=subsample, delta=5)

or as the JSON equivalent (``{"outcome": "y", "terms": [...]}``). Assembly
turns the term list plus a Dataset into the blocked design: an N×p fixed
matrix X (intercept first), and one penalized block (Z_j, S_j) per random
intercept or kernel term.
"""

from __future__ import annotations

import json
import re as _re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import DataError, Dataset, apply_standardizer, fit_standardizer
from .kernel import build_kernel_block, default_bandwidth, make_sketch_plan
from .linalg import positive_eig_summary
from .rng import hash_key

__all__ = [
    "SpecError",
    "TermSpec",
    "ModelSpec",
    "AssembledDesign",
    "PenalizedBlock",
    "parse_spec",
    "assemble",
    "prediction_design",
    "default_spec",
]

# Relative tolerance for declaring a fixed column collinear with its
# predecessors (sequential rank filter keeps earlier columns).
COLLINEAR_RTOL = 1e-8

_IDENT = r"[A-Za-z_.][A-Za-z0-9_.\-]*"


class SpecError(ValueError):
    """Malformed model specification (reports the offending position)."""


@dataclass
class TermSpec:
    """One declared model term.

    kind is ``fixed``, ``random_intercept``, or ``kernel``. Kernel options
    left as None fall back to the fit-level defaults.
    """

    kind: str
    vars: list
    sketch: str = None
    delta: float = None
    sketch_size: int = None
    bandwidth: float = None
    standardize: str = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "vars": list(self.vars)}
        if self.kind == "kernel":
            sk = {}
            if self.sketch is not None:
                sk["method"] = self.sketch
            if self.delta is not None:
                sk["delta"] = self.delta
            if self.sketch_size is not None:
                sk["M"] = self.sketch_size
            if sk:
                d["sketch"] = sk
            if self.bandwidth is not None:
                d["bandwidth"] = self.bandwidth
            if self.standardize is not None:
                d["standardize"] = self.standardize
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TermSpec":
        kind = d.get("kind")
        if kind == "re":
            kind = "random_intercept"
        if kind not in ("fixed", "random_intercept", "kernel"):
            raise SpecError(f"unknown term kind {d.get('kind')!r}")
        vars_ = list(d.get("vars") or ([d["group"]] if "group" in d else []))
        if not vars_:
            raise SpecError(f"term {kind!r} lists no variables")
        sk = d.get("sketch") or {}
        return cls(
            kind=kind,
            vars=vars_,
            sketch=sk.get("method"),
            delta=sk.get("delta"),
            sketch_size=sk.get("M"),
            bandwidth=d.get("bandwidth"),
            standardize=d.get("standardize"),
        )


@dataclass
class ModelSpec:
    """Parsed model: outcome name plus ordered terms."""

    outcome: str
    terms: list

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "terms": [t.to_dict() for t in self.terms]}

    def to_string(self) -> str:
        parts = []
        for t in self.terms:
            if t.kind == "fixed":
                parts.append(f"fixed({', '.join(t.vars)})")
            elif t.kind == "random_intercept":
                parts.append(f"re({t.vars[0]})")
            else:
                opts = []
                if t.sketch is not None:
                    opts.append(f"sketch={t.sketch}")
                if t.delta is not None:
                    opts.append(f"delta={t.delta:g}")
                if t.sketch_size is not None:
                    opts.append(f"m={t.sketch_size}")
                if t.bandwidth is not None:
                    opts.append(f"bandwidth={t.bandwidth:g}")
                if t.standardize is not None:
                    opts.append(f"standardize={t.standardize}")
                body = ", ".join(t.vars) + (("; " + ", ".join(opts)) if opts else "")
                parts.append(f"kernel({body})")
        return f"{self.outcome} ~ " + " + ".join(parts)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if "terms" not in d:
            raise SpecError("JSON spec needs a 'terms' list")
        terms = [TermSpec.from_dict(t) for t in d["terms"]]
        return cls(outcome=d.get("outcome"), terms=terms)


def _parse_kernel_options(text: str, pos: int) -> dict:
    opts = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise SpecError(
                f"expected key=value in kernel options at position {pos}: {chunk!r}"
            )
        key, val = (s.strip() for s in chunk.split("=", 1))
        if key in ("sketch", "method"):
            opts["sketch"] = val
        elif key == "delta":
            opts["delta"] = float(val)
        elif key in ("m", "size", "sketch_size"):
            opts["sketch_size"] = int(val)
        elif key in ("b", "bandwidth"):
            opts["bandwidth"] = float(val)
        elif key in ("standardize", "std"):
            opts["standardize"] = val
        else:
            raise SpecError(f"unknown kernel option {key!r} at position {pos}")
    return opts


def _parse_vars(text: str, pos: int) -> list:
    names = [v.strip() for v in text.split(",")]
    if any(not v for v in names) or not names:
        raise SpecError(f"empty variable name at position {pos}")
    for v in names:
        if not _re.fullmatch(_IDENT, v):
            raise SpecError(f"invalid variable name {v!r} at position {pos}")
    return names


def parse_spec(spec) -> ModelSpec:
    """Parse a model specification.

    Accepts a formula-like string, a JSON string, a dict (JSON layout), or a
    ModelSpec (returned unchanged).
    """
    if isinstance(spec, ModelSpec):
        return spec
    if isinstance(spec, dict):
        return ModelSpec.from_dict(spec)
    if not isinstance(spec, str):
        raise SpecError(f"cannot parse spec of type {type(spec).__name__}")
    text = spec.strip()
    if text.startswith("{"):
        return ModelSpec.from_dict(json.loads(text))

    if text.count("~") != 1:
        raise SpecError("spec must contain exactly one '~'")
    lhs, rhs = text.split("~")
    outcome = lhs.strip()
    if not _re.fullmatch(_IDENT, outcome):
        raise SpecError(f"invalid outcome name {outcome!r}")

    terms = []
    # split the RHS on '+' at paren depth zero, keeping positions
    depth = 0
    start = 0
    offset = text.index("~") + 1
    pieces = []
    for i, ch in enumerate(rhs):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise SpecError(f"unbalanced ')' at position {offset + i}")
        elif ch == "+" and depth == 0:
            pieces.append((rhs[start:i], offset + start))
            start = i + 1
    if depth != 0:
        raise SpecError("unbalanced '(' in spec")
    pieces.append((rhs[start:], offset + start))

    for piece, pos in pieces:
        body = piece.strip()
        if not body:
            raise SpecError(f"empty term at position {pos}")
        m = _re.fullmatch(r"(fixed|re|kernel)\s*\((.*)\)", body, _re.DOTALL)
        if not m:
            raise SpecError(f"cannot parse term {body!r} at position {pos}")
        kind, inner = m.group(1), m.group(2).strip()
        if kind == "kernel":
            if ";" in inner:
                var_text, opt_text = inner.split(";", 1)
                opts = _parse_kernel_options(opt_text, pos)
            else:
                var_text, opts = inner, {}
            if not var_text.strip():
                raise SpecError(f"kernel term lists no variables at position {pos}")
            terms.append(TermSpec(kind="kernel", vars=_parse_vars(var_text, pos), **opts))
        elif kind == "re":
            names = _parse_vars(inner, pos) if inner else []
            if len(names) != 1:
                raise SpecError(
                    f"re() takes exactly one grouping column at position {pos}"
                )
            terms.append(TermSpec(kind="random_intercept", vars=names))
        else:
            if not inner:
                raise SpecError(f"fixed() lists no variables at position {pos}")
            terms.append(TermSpec(kind="fixed", vars=_parse_vars(inner, pos)))
    if not terms:
        raise SpecError("spec declares no terms")
    return ModelSpec(outcome=outcome, terms=terms)


def default_spec(outcome: str, covariates, linear: bool = True) -> ModelSpec:
    """All-covariates default: optional linear block plus one kernel."""
    terms = []
    if linear:
        terms.append(TermSpec(kind="fixed", vars=list(covariates)))
    terms.append(TermSpec(kind="kernel", vars=list(covariates)))
    return ModelSpec(outcome=outcome, terms=terms)


@dataclass
class PenalizedBlock:
    """One penalized design block (random intercept or kernel term).

    Kernel blocks that share the model with other terms are stored in their
    natural parameterization: the raw penalty P = U diag(e) Uᵀ is reduced to
    its positive eigenspace and rescaled so that S becomes the identity,
    with ``coef_transform`` holding the map from raw kernel columns to the
    stored coefficients. This keeps the penalized Hessian positive definite
    for any λ > 0. The one exception is a full kernel that is the entire
    model, which keeps Z = S = K and is solved by a dedicated route.
    """

    Z: np.ndarray
    S: np.ndarray
    label: str
    kind: str
    rank: int
    logdet_pos: float
    # prediction metadata
    var_names: list = None
    standardizer: object = None
    kernel_block: object = None
    coef_transform: np.ndarray = None
    group: str = None
    levels: list = None

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def null_dim(self) -> int:
        return self.q - self.rank


@dataclass
class AssembledDesign:
    """Blocked design: fixed matrix X plus penalized blocks.

    Coefficients are laid out as ``[beta (p), alpha_1, ..., alpha_J]``.
    """

    X: np.ndarray
    fixed_names: list
    blocks: list
    intercept: bool
    outcome: str = None
    categoricals: dict = field(default_factory=dict)
    terms: list = None
    notes: list = field(default_factory=list)
    _stacked: np.ndarray = None

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return sum(b.q for b in self.blocks)

    @property
    def J(self) -> int:
        return len(self.blocks)

    @property
    def M_p(self) -> int:
        """Dimension of the unpenalized space: p plus penalty null spaces.

        Null directions of a kernel penalty are excluded: for kernel blocks
        the design and penalty share the same null space (both are built
        from the same PSD kernel factor), so those directions are pure
        gauge — identified by neither the likelihood nor the prior — and
        belong in neither the penalized nor the unpenalized dimension.
        """
        return self.p + sum(
            b.null_dim for b in self.blocks if b.kind != "kernel"
        )

    def offsets(self) -> list:
        """Start offset of each block inside the stacked coefficient vector."""
        out = []
        off = self.p
        for b in self.blocks:
            out.append(off)
            off += b.q
        return out

    def stacked(self) -> np.ndarray:
        """Cached N×(p+q) design ``[X, Z_1, ..., Z_J]``."""
        if self._stacked is None:
            mats = [self.X] + [b.Z for b in self.blocks]
            self._stacked = np.hstack(mats) if len(mats) > 1 else self.X
        return self._stacked

    def split_coef(self, theta: np.ndarray):
        """Split a stacked coefficient vector into (beta, [alpha_j])."""
        theta = np.asarray(theta).ravel()
        beta = theta[: self.p]
        alphas = []
        off = self.p
        for b in self.blocks:
            alphas.append(theta[off: off + b.q])
            off += b.q
        return beta, alphas

    def penalty_quad(self, theta: np.ndarray, lambdas) -> float:
        """Quadratic form θᵀ S_λ θ for stacked coefficients."""
        _, alphas = self.split_coef(theta)
        total = 0.0
        for lam, a, b in zip(lambdas, alphas, self.blocks):
            total += float(lam) * float(a @ (b.S @ a))
        return total

    def add_penalty(self, H: np.ndarray, lambdas) -> np.ndarray:
        """Add λ_j S_j blocks into a (p+q)² matrix in place; returns H."""
        for off, lam, b in zip(self.offsets(), lambdas, self.blocks):
            H[off: off + b.q, off: off + b.q] += float(lam) * b.S
        return H

    def logdet_penalty_pos(self, rho) -> float:
        """log|S_λ|₊ as a function of ρ = log λ (positive eigenvalues only)."""
        total = 0.0
        for r, b in zip(rho, self.blocks):
            total += b.rank * float(r) + b.logdet_pos
        return total


class _TableView:
    """Uniform column access over DataFrame / Dataset / dict-of-arrays."""

    def __init__(self, obj):
        self._obj = obj
        if isinstance(obj, Dataset):
            self.n = obj.N
        elif isinstance(obj, pd.DataFrame):
            self.n = len(obj)
        elif isinstance(obj, dict):
            lengths = {np.asarray(v).shape[0] for v in obj.values()}
            if len(lengths) != 1:
                raise DataError("prediction columns have unequal lengths")
            self.n = lengths.pop()
        else:
            raise DataError(
                f"cannot read prediction data of type {type(obj).__name__}"
            )

    def has(self, name) -> bool:
        o = self._obj
        if isinstance(o, Dataset):
            return name in o.colnames or name in o.labels or (
                o.cluster_name is not None and name == o.cluster_name
            )
        if isinstance(o, pd.DataFrame):
            return name in o.columns
        return name in o

    def numeric(self, name) -> np.ndarray:
        o = self._obj
        if isinstance(o, Dataset):
            return o.matrix([name]).ravel() if name in o.colnames else None
        if isinstance(o, pd.DataFrame):
            vals = pd.to_numeric(o[name], errors="coerce")
            if vals.isna().any():
                raise DataError(f"non-numeric values in column {name!r}")
            return vals.to_numpy(dtype=float)
        return np.asarray(o[name], dtype=float).ravel()

    def labels(self, name) -> np.ndarray:
        o = self._obj
        if isinstance(o, Dataset):
            return o.label_column(name)
        if isinstance(o, pd.DataFrame):
            return o[name].astype(str).to_numpy()
        return np.asarray(o[name]).astype(str)


def _resolved_column(view: _TableView, name: str, codings: dict) -> np.ndarray:
    """Numeric values for a training-resolved column name on new data.

    Handles indicator names (``col=level``) by re-expanding the raw
    categorical column with the stored training coding.
    """
    if view.has(name):
        try:
            vals = view.numeric(name)
            if vals is not None:
                return vals
        except (DataError, ValueError, TypeError):
            pass
    if "=" in name:
        col, level = name.split("=", 1)
        if col in codings and view.has(col):
            return (view.labels(col) == level).astype(float)
    raise DataError(f"prediction data is missing column {name!r}")


def assemble(
    data: Dataset,
    spec,
    *,
    intercept: bool = True,
    seed: int = 0,
    sketch: str = "subsample",
    delta: float = 5.0,
    sketch_size: int = None,
    standardize: str = "mahalanobis",
    bandwidth: float = None,
    max_kernel_n: int = 20_000,
    force_kernel: bool = False,
) -> AssembledDesign:
    """Assemble the blocked design from a Dataset and a parsed spec.

    Fit-level keyword arguments are defaults; per-term options in the spec
    override them. Each kernel term fits its own standardizer on its own
    covariates and derives its sketch randomness from ``seed`` and its term
    index.
    """
    ms = parse_spec(spec)
    notes = []
    n = data.N

    # ---- fixed block -----------------------------------------------------
    fixed_cols = []
    fixed_names = []
    if intercept:
        fixed_cols.append(np.ones(n))
        fixed_names.append("(intercept)")
    for t in ms.terms:
        if t.kind != "fixed":
            continue
        idx = data.column_indices(t.vars)
        for j in idx:
            fixed_cols.append(data.W[:, j])
            fixed_names.append(data.colnames[j])
    X = np.column_stack(fixed_cols) if fixed_cols else np.empty((n, 0))

    # sequential rank filter: keep each column only if it adds rank, so
    # duplicates later in the list are the ones dropped
    if X.shape[1] > 1:
        keep = []
        basis = np.empty((n, 0))
        for j in range(X.shape[1]):
            v = X[:, j]
            resid = v - basis @ (basis.T @ v)
            norm_v = np.linalg.norm(v)
            if norm_v > 0 and np.linalg.norm(resid) > COLLINEAR_RTOL * norm_v:
                keep.append(j)
                basis = np.column_stack([basis, resid / np.linalg.norm(resid)])
            else:
                notes.append(
                    f"dropped collinear fixed column {fixed_names[j]!r}"
                )
        if len(keep) < X.shape[1]:
            X = X[:, keep]
            fixed_names = [fixed_names[j] for j in keep]

    # ---- penalized blocks --------------------------------------------------
    # A full-kernel block keeps its raw parameterization only when it is the
    # entire model (no unpenalized columns, no other penalized terms): that
    # configuration has its own direct solver route.  In any mixed model the
    # kernel's flat directions would make the stacked normal equations
    # singular, so such blocks are rebuilt in the natural parameterization.
    pen_terms = [t for t in ms.terms if t.kind != "fixed"]
    sole_kernel = (
        X.shape[1] == 0
        and len(pen_terms) == 1
        and pen_terms[0].kind == "kernel"
        and (pen_terms[0].sketch or sketch) == "none"
    )
    blocks = []
    for t_idx, t in enumerate(ms.terms):
        if t.kind == "fixed":
            continue
        if t.kind == "random_intercept":
            group = t.vars[0]
            labels = data.label_column(group)
            levels = sorted(set(labels))
            if len(levels) < 2:
                raise DataError(
                    f"random intercept column {group!r} has a single level"
                )
            Z = (labels[:, None] == np.asarray(levels)[None, :]).astype(float)
            q = len(levels)
            blocks.append(
                PenalizedBlock(
                    Z=Z,
                    S=np.eye(q),
                    label=f"re({group})",
                    kind="random_intercept",
                    rank=q,
                    logdet_pos=0.0,
                    group=group,
                    levels=levels,
                )
            )
            continue

        # kernel term
        idx = data.column_indices(t.vars)
        resolved = [data.colnames[j] for j in idx]
        Xk = data.W[:, idx]
        std_kind = t.standardize or standardize
        try:
            st = fit_standardizer(Xk, kind=std_kind, colnames=resolved)
        except DataError as err:
            raise DataError(
                f"kernel({', '.join(t.vars)}): {err}"
            ) from None
        notes.extend(st.notes)
        if st.rank == 0:
            raise DataError(
                f"kernel({', '.join(t.vars)}) has rank-zero inputs"
            )
        Wstd = apply_standardizer(st, Xk)
        b = t.bandwidth if t.bandwidth is not None else (
            bandwidth if bandwidth is not None else default_bandwidth(st)
        )
        method = t.sketch or sketch
        plan = make_sketch_plan(
            n,
            method=method,
            delta=t.delta if t.delta is not None else delta,
            seed=hash_key(seed, "term", t_idx),
            override_M=t.sketch_size if t.sketch_size is not None else sketch_size,
        )
        kb = build_kernel_block(Wstd, plan, b, max_n=max_kernel_n, force=force_kernel)
        notes.extend(kb.notes)
        label = f"kernel({', '.join(t.vars)})"
        if plan.method == "none" and sole_kernel:
            # Full N×N kernel as the only model term: keep the raw
            # parameterization (Z = S = K); the solver has a dedicated
            # well-conditioned route for exactly this configuration.
            if kb.penalty_eigvals is not None:
                vals = kb.penalty_eigvals
                vmax = max(float(vals[-1]), np.finfo(float).tiny)
                pos = vals[vals > 1e-10 * vmax]
                rank, logdet = len(pos), float(np.sum(np.log(pos)))
            else:
                rank, logdet = positive_eig_summary(kb.penalty)
            blocks.append(
                PenalizedBlock(
                    Z=kb.design,
                    S=kb.penalty,
                    label=label,
                    kind="kernel",
                    rank=rank,
                    logdet_pos=logdet,
                    var_names=resolved,
                    standardizer=st,
                    kernel_block=kb,
                )
            )
            continue
        # Otherwise use the natural parameterization so the block joins the
        # stacked solve with an identity penalty and full column rank.
        # Decompose the penalty P = U diag(e) Uᵀ, keep the positive
        # eigenspace, and rescale columns so the stored penalty is the
        # identity.
        evals, evecs = np.linalg.eigh(np.asarray(kb.penalty, dtype=float))
        vmax = max(float(evals[-1]), np.finfo(float).tiny)
        keep = evals > 1e-10 * vmax
        r = int(np.count_nonzero(keep))
        if r == 0:
            raise DataError(f"{label} has a numerically zero penalty")
        T = evecs[:, keep] / np.sqrt(evals[keep])[None, :]
        if r < keep.size:
            notes.append(
                f"{label}: penalized dimension reduced {keep.size} -> {r}"
            )
        if plan.method == "none":
            # design == penalty == K here, so K·T collapses to U₊·√e₊.
            Zb = evecs[:, keep] * np.sqrt(evals[keep])[None, :]
        else:
            Zb = kb.design @ T
        blocks.append(
            PenalizedBlock(
                Z=Zb,
                S=np.eye(r),
                label=label,
                kind="kernel",
                rank=r,
                logdet_pos=0.0,
                var_names=resolved,
                standardizer=st,
                kernel_block=kb,
                coef_transform=T,
            )
        )

    return AssembledDesign(
        X=X,
        fixed_names=fixed_names,
        blocks=blocks,
        intercept=intercept,
        outcome=ms.outcome,
        categoricals=dict(data.categoricals),
        terms=ms.terms,
        notes=notes,
    )


def prediction_design(design: AssembledDesign, table) -> tuple:
    """Build (X_new, [Z_j_new]) for new rows using stored transforms.

    ``table`` may be a DataFrame, Dataset, or dict of arrays carrying the
    original covariate columns (categoricals as raw labels or as expanded
    indicators).
    """
    from .kernel import kernel_predict_design

    view = _TableView(table)
    cod = design.categoricals
    xcols = []
    for name in design.fixed_names:
        if name == "(intercept)":
            xcols.append(np.ones(view.n))
        else:
            xcols.append(_resolved_column(view, name, cod))
    X_new = np.column_stack(xcols) if xcols else np.empty((view.n, 0))

    Z_new = []
    for b in design.blocks:
        if b.kind == "random_intercept":
            labels = view.labels(b.group)
            Z_new.append(
                (labels[:, None] == np.asarray(b.levels)[None, :]).astype(float)
            )
        else:
            cols = [_resolved_column(view, nm, cod) for nm in b.var_names]
            Wnew = np.column_stack(cols)
            Wstd = apply_standardizer(b.standardizer, Wnew)
            rows = kernel_predict_design(Wstd, b.kernel_block)
            if b.coef_transform is not None:
                rows = rows @ b.coef_transform
            Z_new.append(rows)
    return X_new, Z_new


def stack_prediction(design: AssembledDesign, table) -> np.ndarray:
    """Stacked prediction rows aligned with the fitted coefficient layout."""
    X_new, Z_new = prediction_design(design, table)
    mats = [X_new] + Z_new
    return np.hstack(mats) if len(mats) > 1 else X_new
