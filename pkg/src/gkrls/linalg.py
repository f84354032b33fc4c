"""Shared dense linear-algebra helpers.

Thin wrappers around scipy/numpy routines that add the failure handling the
estimation code relies on: Cholesky with diagonal repair for numerically
singular systems, positive-part eigenvalue summaries for penalty matrices,
and log-determinants from factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "CholFactor",
    "safe_cholesky",
    "symmetrize",
    "psd_project",
    "positive_eig_summary",
]

# Relative eigenvalue cut: eigenvalues below this fraction of the largest are
# treated as zero when computing ranks and positive-part log-determinants.
EIG_RTOL = 1e-10

# Diagonal repair added when a factorization hits a numerically singular
# pivot, as a fraction of trace; escalates tenfold on repeated failure.
RIDGE_RTOL = 1e-10
MAX_RIDGE_TRIES = 3


@dataclass
class CholFactor:
    """Lower-triangular Cholesky factor of a (possibly repaired) SPD matrix.

    Attributes
    ----------
    L : ndarray
        Lower factor such that ``L @ L.T`` equals the matrix plus
        ``ridge * I``.
    ridge : float
        Total diagonal repair that was required (0.0 for clean factors).
    notes : list of str
        Human-readable records of any repair that happened.
    """

    L: np.ndarray
    ridge: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def logdet(self) -> float:
        """Log-determinant of the factored matrix."""
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` using the stored factor."""
        return scipy.linalg.cho_solve((self.L, True), b, check_finite=False)

    def inv(self) -> np.ndarray:
        """Dense inverse of the factored matrix."""
        return self.solve(np.eye(self.L.shape[0]))


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose."""
    return 0.5 * (a + a.T)


def safe_cholesky(a: np.ndarray) -> CholFactor:
    """Cholesky-factor a symmetric matrix, repairing singular pivots.

    Tries a clean factorization first. On failure adds ``1e-10 * trace(a)``
    to the diagonal and retries, escalating the repair tenfold up to three
    times. Raises ``np.linalg.LinAlgError`` if the matrix cannot be repaired.
    """
    notes = []
    ridge = 0.0
    base = RIDGE_RTOL * max(float(np.trace(a)), np.finfo(float).tiny)
    for attempt in range(MAX_RIDGE_TRIES + 1):
        try:
            L = scipy.linalg.cholesky(
                a if ridge == 0.0 else a + ridge * np.eye(a.shape[0]),
                lower=True,
                check_finite=False,
            )
            return CholFactor(L=L, ridge=ridge, notes=notes)
        except scipy.linalg.LinAlgError:
            ridge = base * (10.0 ** attempt)
            notes.append(
                f"singular pivot: retrying with diagonal repair {ridge:.3e}"
            )
    raise np.linalg.LinAlgError(
        f"matrix not positive definite after {MAX_RIDGE_TRIES} diagonal repairs"
    )


def psd_project(a: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Clamp small negative eigenvalues of a symmetric matrix to zero.

    Raises if the most negative eigenvalue is worse than ``-rtol`` times the
    largest one — that indicates a construction bug, not roundoff.
    """
    a = symmetrize(a)
    vals, vecs = np.linalg.eigh(a)
    vmax = max(float(vals[-1]), 0.0)
    if vals[0] < -rtol * max(vmax, np.finfo(float).tiny):
        raise np.linalg.LinAlgError(
            f"matrix is indefinite: min eig {vals[0]:.3e} vs max {vmax:.3e}"
        )
    if vals[0] >= 0.0:
        return a
    clamped = np.clip(vals, 0.0, None)
    return symmetrize((vecs * clamped) @ vecs.T)


def positive_eig_summary(a: np.ndarray, rtol: float = EIG_RTOL):
    """Rank and positive-part log-determinant of a symmetric PSD matrix.

    Eigenvalues below ``rtol * max_eig`` count as zero. Returns
    ``(rank, logdet_pos)`` where ``logdet_pos`` is the sum of logs of the
    retained eigenvalues (0.0 for the zero matrix).
    """
    vals = np.linalg.eigvalsh(symmetrize(a))
    vmax = float(vals[-1]) if vals.size else 0.0
    if vmax <= 0.0:
        return 0, 0.0
    keep = vals > rtol * vmax
    rank = int(np.count_nonzero(keep))
    logdet = float(np.sum(np.log(vals[keep])))
    return rank, logdet
