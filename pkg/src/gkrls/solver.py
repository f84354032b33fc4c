"""Penalized weighted least squares and PIRLS for non-gaussian families.

The core operation solves the blocked normal equations

    [XᵀWX   XᵀWZ ] [β]   [XᵀWz]
    [ZᵀWX   ZᵀWZ+S_λ] [α] = [ZᵀWz]

via a (repaired) Cholesky factorization of the penalized Hessian
``H = DᵀWD + S_λ`` with ``D = [X, Z]``. Non-gaussian families iterate the
working response/weight updates until the penalized deviance stabilizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .families import Family, get_family
from .linalg import CholFactor, safe_cholesky
from .terms import AssembledDesign

__all__ = ["SolverError", "PenalizedFit", "solve_penalized", "pirls", "predict"]


class SolverError(RuntimeError):
    """Raised when the penalized system cannot be solved."""


@dataclass
class PenalizedFit:
    """A converged (or flagged) penalized fit.

    Attributes
    ----------
    beta, alphas : ndarray, list of ndarray
        Fixed and per-block penalized coefficients.
    coef : ndarray
        Stacked ``[beta, alpha_1, ..., alpha_J]``.
    eta, mu : ndarray
        Linear predictor and response-scale mean at the solution.
    working_weights : ndarray
        Diagonal of W at convergence (prior weights for gaussian).
    H : ndarray
        Penalized Hessian ``DᵀWD + S_λ`` at convergence.
    H_factor : CholFactor
        Its Cholesky factor (with any diagonal repair recorded).
    deviance : float
        Family deviance at the solution.
    penalty : float
        Quadratic form ``αᵀS_λα``.
    iterations : int
        PIRLS iterations (1 for gaussian).
    converged : bool
    """

    beta: np.ndarray
    alphas: list
    coef: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    working_weights: np.ndarray
    H: np.ndarray
    H_factor: CholFactor
    deviance: float
    penalty: float
    iterations: int
    converged: bool
    lambdas: np.ndarray
    family: Family
    design: AssembledDesign
    y: np.ndarray
    prior_weights: np.ndarray
    deviance_trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def penalized_deviance(self) -> float:
        return self.deviance + self.penalty

    @property
    def fitted(self) -> np.ndarray:
        return self.mu

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.mu

    def score_residuals(self) -> np.ndarray:
        """Per-row score scale u_i = W_i · (working residual)_i.

        Equals ``weight_i · (y_i − μ_i)`` for the canonical links used here;
        the per-row coefficient score is ``u_i · d_i``.
        """
        dmu = self.family.mu_eta(self.eta)
        v = self.family.variance(self.mu)
        return self.prior_weights * (self.y - self.mu) * dmu / v


def _check_lambdas(design: AssembledDesign, lambdas) -> np.ndarray:
    J = design.J
    if lambdas is None:
        lam = np.ones(J)
    else:
        lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
        if lam.size == 1 and J > 1:
            lam = np.full(J, float(lam[0]))
    if lam.size != J:
        raise SolverError(f"expected {J} smoothing parameters, got {lam.size}")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise SolverError("smoothing parameters must be finite and >= 0")
    return lam


def full_kernel(design) -> np.ndarray:
    """The N×N kernel when the model is a single un-sketched kernel term.

    Returns None for any other configuration. In this case Z = S = K, so
    the blocked normal equations (KᵀWK + λK)α = KᵀWy are equivalent to the
    far better conditioned symmetric system

        α = W^{1/2} (W^{1/2} K W^{1/2} + λI)⁻¹ W^{1/2} y,

    which is the route used for both the gaussian solve and the PIRLS
    inner steps.
    """
    if design.p != 0 or design.J != 1:
        return None
    b = design.blocks[0]
    if b.kind != "kernel" or b.coef_transform is not None:
        return None
    if b.kernel_block is None or b.kernel_block.plan.method != "none":
        return None
    return b.Z


def _full_kernel_solve(K, z, w, lam):
    """Solve (KᵀWK + λK)α = KᵀWz without squaring the condition number."""
    sw = np.sqrt(w)
    A = (sw[:, None] * K) * sw[None, :]
    A[np.diag_indices_from(A)] += float(lam)
    factor = safe_cholesky(A)
    return sw * factor.solve(sw * z)


def _weighted_solve(design, z, w, lam, gram=None):
    """One penalized WLS solve; returns (theta, H, factor)."""
    D = design.stacked()
    if gram is not None:
        H = gram.copy()
        b = D.T @ (w * z)
    else:
        Dw = D * w[:, None]
        H = D.T @ Dw
        b = Dw.T @ z
    design.add_penalty(H, lam)
    try:
        factor = safe_cholesky(H)
    except np.linalg.LinAlgError as err:
        raise SolverError(f"penalized system is singular: {err}") from None
    K = full_kernel(design)
    if K is not None:
        theta = _full_kernel_solve(K, z, w, lam[0])
    else:
        theta = factor.solve(b)
    return theta, H, factor


def solve_penalized(
    design: AssembledDesign,
    y: np.ndarray,
    weights: np.ndarray = None,
    lambdas=None,
    family="gaussian",
    gram: np.ndarray = None,
) -> PenalizedFit:
    """Solve the penalized system for a gaussian family (single pass).

    ``gram`` optionally supplies a precomputed ``DᵀWD`` (without penalty) so
    repeated solves at different λ avoid the N×(p+q)² product. Non-gaussian
    families should call :func:`pirls`.
    """
    fam = get_family(family)
    if fam.name != "gaussian":
        return pirls(design, y, lambdas, fam, weights=weights)
    y = np.asarray(y, dtype=float).ravel()
    n = design.N
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    lam = _check_lambdas(design, lambdas)

    theta, H, factor = _weighted_solve(design, y, w, lam, gram=gram)
    D = design.stacked()
    eta = D @ theta
    beta, alphas = design.split_coef(theta)
    dev = float(np.sum(w * (y - eta) ** 2))
    pen = design.penalty_quad(theta, lam)
    notes = list(factor.notes)
    return PenalizedFit(
        beta=beta,
        alphas=alphas,
        coef=theta,
        eta=eta,
        mu=eta,
        working_weights=w,
        H=H,
        H_factor=factor,
        deviance=dev,
        penalty=pen,
        iterations=1,
        converged=True,
        lambdas=lam,
        family=fam,
        design=design,
        y=y,
        prior_weights=w,
        deviance_trace=[dev + pen],
        notes=notes,
    )


def pirls(
    design: AssembledDesign,
    y: np.ndarray,
    lambdas=None,
    family="binomial_logit",
    weights: np.ndarray = None,
    max_iter: int = 100,
    tol: float = 1e-8,
    max_halvings: int = 30,
) -> PenalizedFit:
    """Penalized iteratively reweighted least squares.

    Iterates working-response solves until the relative change in penalized
    deviance drops below ``tol``, halving steps (up to ``max_halvings``)
    whenever an update increases the penalized deviance. The returned fit
    carries the working weights and penalized Hessian evaluated at the
    solution.
    """
    fam = get_family(family)
    y = np.asarray(y, dtype=float).ravel()
    fam.validate_y(y)
    n = design.N
    w0 = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    lam = _check_lambdas(design, lambdas)
    if fam.name == "gaussian":
        return solve_penalized(design, y, weights=w0, lambdas=lam, family=fam)

    D = design.stacked()
    notes = []
    n_clamped_total = 0

    # The per-observation GLM initialization only seeds the first weighted
    # solve; it is not a point in the parameter space, so the descent
    # reference below is the actual model point theta = 0.
    eta_work, nc = fam.clamp_eta(fam.initial_eta(y))
    n_clamped_total += nc
    mu_work = fam.linkinv(eta_work)

    theta = np.zeros(D.shape[1])
    eta, _ = fam.clamp_eta(np.zeros(n))
    mu = fam.linkinv(eta)
    pdev = fam.deviance(y, mu, w0)  # theta=0 penalty is 0
    trace = [pdev]
    converged = False
    iters = 0

    for it in range(1, max_iter + 1):
        iters = it
        dmu = fam.mu_eta(eta_work)
        var = fam.variance(mu_work)
        w_work = w0 * dmu * dmu / var
        z = eta_work + (y - mu_work) / dmu

        theta_new, _, _ = _weighted_solve(design, z, w_work, lam)

        # The seed working set is not a parameter-space point, so the first
        # direction carries no descent guarantee: take the classical
        # unconditional first step (guarding only against non-finite values).
        # Later directions are Fisher steps at the current point, and descent
        # is enforced by halving.
        ref = pdev if it > 1 else np.inf
        step = 1.0
        for _ in range(max_halvings + 1):
            cand = theta + step * (theta_new - theta)
            eta_c, nc = fam.clamp_eta(D @ cand)
            mu_c = fam.linkinv(eta_c)
            pdev_c = fam.deviance(y, mu_c, w0) + design.penalty_quad(cand, lam)
            if np.isfinite(pdev_c) and pdev_c <= ref + 1e-10 * (abs(ref) + 1.0):
                break
            step *= 0.5
        else:
            if np.isfinite(pdev_c) and abs(pdev_c - pdev) < tol * (abs(pdev) + 0.1):
                # no descent left anywhere along the ray: stationary point
                converged = True
            else:
                notes.append(f"step halving exhausted at iteration {it}")
                converged = False
            break

        n_clamped_total += nc
        theta, eta, mu = cand, eta_c, mu_c
        eta_work, mu_work = eta, mu
        delta = abs(pdev - pdev_c)
        pdev = pdev_c
        trace.append(pdev)
        if delta < tol * (abs(pdev) + 0.1):
            converged = True
            break

    if n_clamped_total > 0:
        notes.append(
            f"linear predictor clamped on {n_clamped_total} row-evaluations"
        )
    if not converged and iters == max_iter:
        notes.append(f"PIRLS did not converge in {max_iter} iterations")

    # final working weights and Hessian at the solution
    dmu = fam.mu_eta(eta)
    var = fam.variance(mu)
    w_work = w0 * dmu * dmu / var
    Dw = D * w_work[:, None]
    H = D.T @ Dw
    design.add_penalty(H, lam)
    try:
        factor = safe_cholesky(H)
    except np.linalg.LinAlgError as err:
        raise SolverError(f"penalized Hessian singular at solution: {err}") from None
    notes.extend(factor.notes)

    beta, alphas = design.split_coef(theta)
    dev = fam.deviance(y, mu, w0)
    pen = design.penalty_quad(theta, lam)
    return PenalizedFit(
        beta=beta,
        alphas=alphas,
        coef=theta,
        eta=eta,
        mu=mu,
        working_weights=w_work,
        H=H,
        H_factor=factor,
        deviance=dev,
        penalty=pen,
        iterations=iters,
        converged=converged,
        lambdas=lam,
        family=fam,
        design=design,
        y=y,
        prior_weights=w0,
        deviance_trace=trace,
        notes=notes,
    )


def predict(fit: PenalizedFit, rows: np.ndarray, scale: str = "response") -> np.ndarray:
    """Predictions for stacked design rows aligned with the fit layout."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != fit.coef.shape[0]:
        raise SolverError(
            f"design rows have {rows.shape[1]} columns; fit has "
            f"{fit.coef.shape[0]} coefficients"
        )
    eta = rows @ fit.coef
    if scale == "link":
        return eta
    if scale == "response":
        return fit.family.linkinv(eta)
    raise ValueError(f"scale must be 'link' or 'response', got {scale!r}")
