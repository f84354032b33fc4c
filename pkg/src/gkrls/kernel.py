"""Gaussian kernel evaluation, sketching plans, and kernel design blocks.

A kernel term turns standardized covariates into an N×M design matrix plus
an M×M penalty. Three construction methods are supported:

- ``none``: the full symmetric N×N kernel; penalty = the kernel itself.
- ``subsample``: M rows are drawn without replacement; design column m holds
  kernel similarities to sampled row m and the penalty is the M×M kernel
  among the sampled rows. The N×N kernel is never materialized.
- ``gaussian``: a dense M×N coefficient matrix S with i.i.d. N(0, 1/M)
  entries compresses the full kernel: design = K·Sᵀ, penalty = S·K·Sᵀ. This
  requires materializing K (cost documented; guarded by ``max_n``).

The sketch dimension defaults to ``floor(delta * N^(1/3))`` clamped to
``[2, N]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .linalg import symmetrize
from .rng import child_rng

__all__ = [
    "SketchPlan",
    "KernelBlock",
    "MemoryGuardError",
    "kernel_entry",
    "gaussian_kernel",
    "default_bandwidth",
    "make_sketch_plan",
    "build_kernel_block",
    "kernel_predict_design",
]

# Refuse to materialize an N×N kernel above this row count unless forced.
DEFAULT_MAX_N = 20_000

# Penalty eigenvalues are validated/repaired eagerly up to this dimension;
# larger blocks defer the (cubic) eigendecomposition to the smoothing step.
EAGER_EIG_MAX = 8192

# Most negative penalty eigenvalue tolerated before repair, relative to the
# largest; anything worse indicates a construction bug.
PSD_RTOL = 1e-8


class MemoryGuardError(MemoryError):
    """Raised when a construction would materialize a guarded N×N kernel."""


@dataclass
class SketchPlan:
    """Resolved sketching decisions for one kernel term.

    Attributes
    ----------
    method : str
        ``none``, ``subsample``, or ``gaussian``.
    delta : float
        Sketch multiplier (M defaults to ``floor(delta * N^(1/3))``).
    M : int
        Resolved sketch dimension (equals N for ``none``).
    seed : int
        Seed of the RNG stream that drew the plan.
    indices : ndarray or None
        Sampled row indices (``subsample`` only), M distinct values.
    coefficients : ndarray or None
        Dense M×N sketch coefficients (``gaussian`` only).
    """

    method: str
    delta: float
    M: int
    seed: int
    N: int
    indices: np.ndarray = None
    coefficients: np.ndarray = None

    def to_dict(self) -> dict:
        """JSON-serializable summary (coefficients reproducible from seed)."""
        return {
            "method": self.method,
            "delta": float(self.delta),
            "M": int(self.M),
            "seed": int(self.seed),
            "N": int(self.N),
            "indices": None if self.indices is None else self.indices.tolist(),
        }


@dataclass
class KernelBlock:
    """A built kernel design block.

    Attributes
    ----------
    design : ndarray, shape (N, M)
        Kernel design matrix K*.
    penalty : ndarray, shape (M, M)
        Symmetric PSD penalty.
    bandwidth : float
        Gaussian bandwidth used for every entry.
    reference : ndarray, shape (M, r) or (N, r)
        Standardized rows retained for prediction: the sampled rows for
        ``subsample``, all training rows for ``none``/``gaussian``.
    plan : SketchPlan
        The plan that produced the block.
    penalty_eigvals : ndarray or None
        Eigenvalues of the (repaired) penalty when eagerly computed.
    """

    design: np.ndarray
    penalty: np.ndarray
    bandwidth: float
    reference: np.ndarray
    plan: SketchPlan
    penalty_eigvals: np.ndarray = None
    notes: list = field(default_factory=list)


def kernel_entry(u, v, b: float) -> float:
    """Gaussian similarity exp(-||u - v||^2 / b) between two vectors."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError("u and v must have the same length")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("kernel inputs must be finite")
    if not b > 0:
        raise ValueError("bandwidth must be positive")
    return float(np.exp(-np.sum((u - v) ** 2) / b))


def gaussian_kernel(A: np.ndarray, B: np.ndarray, b: float) -> np.ndarray:
    """Pairwise Gaussian kernel matrix between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if not b > 0:
        raise ValueError("bandwidth must be positive")
    d2 = cdist(A, B, metric="sqeuclidean")
    return np.exp(-d2 / b)


def default_bandwidth(transform) -> float:
    """Default bandwidth: the rank of the fitted standardizer.

    Equals the covariate count at full rank; falls back to the retained
    eigenspace dimension when columns are collinear.
    """
    r = int(transform.rank)
    if r < 1:
        raise ValueError("standardizer has rank 0; no kernel inputs remain")
    return float(r)


def make_sketch_plan(
    N: int,
    method: str = "subsample",
    delta: float = 5.0,
    seed: int = 0,
    override_M: int = None,
) -> SketchPlan:
    """Resolve the sketch dimension and draw the sketch randomness.

    ``M = floor(delta * N^(1/3))`` clamped to ``[2, N]`` unless
    ``override_M`` is given. Subsample indices are uniform draws without
    replacement; gaussian coefficients are i.i.d. N(0, 1/M), drawn row-major.
    """
    if N < 2:
        raise ValueError("need at least 2 rows to sketch")
    if method not in ("none", "subsample", "gaussian"):
        raise ValueError(f"unknown sketch method {method!r}")
    if method == "none":
        return SketchPlan(method="none", delta=float(delta), M=N, seed=int(seed), N=N)
    if override_M is not None:
        M = int(override_M)
        if M > N:
            raise ValueError(f"override_M={M} exceeds N={N}")
        if M < 2:
            raise ValueError("sketch dimension must be at least 2")
    else:
        if not delta > 0:
            raise ValueError("delta must be positive")
        M = int(np.floor(delta * float(N) ** (1.0 / 3.0)))
        M = max(2, min(M, N))
    rng = child_rng(seed, "sketch", method)
    if method == "subsample":
        idx = rng.choice(N, size=M, replace=False)
        return SketchPlan(
            method="subsample", delta=float(delta), M=M, seed=int(seed), N=N,
            indices=idx,
        )
    coef = rng.standard_normal((M, N)) / np.sqrt(M)
    return SketchPlan(
        method="gaussian", delta=float(delta), M=M, seed=int(seed), N=N,
        coefficients=coef,
    )


def _repair_penalty(P: np.ndarray, notes: list):
    """Symmetrize, validate, and clamp tiny negative eigenvalues.

    Returns ``(penalty, eigvals)``. Raises if the penalty is indefinite
    beyond roundoff (min eig < -1e-8 * max eig).
    """
    P = symmetrize(P)
    vals, vecs = np.linalg.eigh(P)
    vmax = max(float(vals[-1]), np.finfo(float).tiny)
    if vals[0] < -PSD_RTOL * vmax:
        raise np.linalg.LinAlgError(
            f"kernel penalty indefinite: min eig {vals[0]:.3e}, max {vmax:.3e}"
        )
    if vals[0] < 0.0:
        notes.append(
            f"clamped {int(np.sum(vals < 0))} negative penalty eigenvalues "
            f"(min {vals[0]:.3e})"
        )
        vals = np.clip(vals, 0.0, None)
        P = symmetrize((vecs * vals) @ vecs.T)
    return P, vals


def build_kernel_block(
    Wstd: np.ndarray,
    plan: SketchPlan,
    b: float,
    max_n: int = DEFAULT_MAX_N,
    force: bool = False,
) -> KernelBlock:
    """Build the kernel design and penalty for standardized covariates."""
    Wstd = np.atleast_2d(np.asarray(Wstd, dtype=float))
    N = Wstd.shape[0]
    if plan.N != N:
        raise ValueError(f"plan was made for N={plan.N}, data has N={N}")
    notes = []

    if plan.method == "subsample":
        ref = Wstd[plan.indices]
        design = gaussian_kernel(Wstd, ref, b)
        penalty = gaussian_kernel(ref, ref, b)
    else:
        if N > max_n and not force:
            raise MemoryGuardError(
                f"method={plan.method!r} would materialize a {N}x{N} kernel "
                f"(cap {max_n}); use subsample sketching or force"
            )
        K = gaussian_kernel(Wstd, Wstd, b)
        ref = Wstd
        if plan.method == "none":
            design = K
            penalty = K
        else:
            S = plan.coefficients
            design = K @ S.T
            penalty = S @ design

    eigvals = None
    if penalty.shape[0] <= EAGER_EIG_MAX:
        penalty, eigvals = _repair_penalty(penalty, notes)

    return KernelBlock(
        design=design,
        penalty=penalty,
        bandwidth=float(b),
        reference=ref,
        plan=plan,
        penalty_eigvals=eigvals,
        notes=notes,
    )


def kernel_predict_design(Wnew_std: np.ndarray, block: KernelBlock) -> np.ndarray:
    """Kernel design rows for new standardized covariates.

    Evaluates similarities against the retained reference points; for
    gaussian sketching the result is additionally compressed by Sᵀ so the
    output always has the training design's column count.
    """
    Wnew_std = np.atleast_2d(np.asarray(Wnew_std, dtype=float))
    if Wnew_std.shape[1] != block.reference.shape[1]:
        raise ValueError(
            f"expected {block.reference.shape[1]} standardized columns, "
            f"got {Wnew_std.shape[1]}"
        )
    base = gaussian_kernel(Wnew_std, block.reference, block.bandwidth)
    if block.plan.method == "gaussian":
        return base @ block.plan.coefficients.T
    return base
