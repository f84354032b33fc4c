"""Outcome families for the penalized solver.

Each family bundles the link functions, variance function, deviance, and
log-likelihood needed by iteratively reweighted least squares and by the
smoothing criterion. Three families are supported: ``gaussian`` (identity
link), ``binomial_logit``, and ``poisson_log``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln

__all__ = ["Family", "get_family", "FAMILIES"]

# Linear predictors outside this band are clamped for the logit link so the
# mean never reaches exactly 0 or 1 in floating point.
ETA_CLAMP_LOGIT = 30.0
# Overflow guard for exp() on the log link.
ETA_CLAMP_LOG = 300.0


@dataclass(frozen=True)
class Family:
    """A GLM family: link, variance, deviance, likelihood, initialization.

    Attributes
    ----------
    name : str
        Identifier used in specs, CLI flags and artifacts.
    has_scale : bool
        True when the family carries a free scale parameter (gaussian);
        binomial and poisson fix the scale at 1.
    """

    name: str
    has_scale: bool
    linkinv: Callable[[np.ndarray], np.ndarray]
    # dmu/deta evaluated at eta
    mu_eta: Callable[[np.ndarray], np.ndarray]
    # variance function V(mu)
    variance: Callable[[np.ndarray], np.ndarray]

    def clamp_eta(self, eta: np.ndarray):
        """Clamp the linear predictor to the family's safe band.

        Returns ``(eta_clamped, n_clamped)``.
        """
        if self.name == "binomial_logit":
            lim = ETA_CLAMP_LOGIT
        elif self.name == "poisson_log":
            lim = ETA_CLAMP_LOG
        else:
            return eta, 0
        clipped = np.clip(eta, -lim, lim)
        return clipped, int(np.count_nonzero(clipped != eta))

    def initial_eta(self, y: np.ndarray) -> np.ndarray:
        """Starting linear predictor for IRLS."""
        if self.name == "gaussian":
            return y.astype(float).copy()
        if self.name == "binomial_logit":
            p0 = (y + 0.5) / 2.0
            return np.log(p0 / (1.0 - p0))
        # poisson_log
        return np.log(y + 0.1)

    def validate_y(self, y: np.ndarray) -> None:
        """Raise ValueError when the outcome is outside the family's support."""
        if self.name == "binomial_logit":
            if np.any((y < 0) | (y > 1)):
                raise ValueError("binomial_logit outcome must lie in [0, 1]")
        elif self.name == "poisson_log":
            if np.any(y < 0):
                raise ValueError("poisson_log outcome must be non-negative")

    def deviance(self, y, mu, weights) -> float:
        """Family deviance, summed over observations."""
        if self.name == "gaussian":
            return float(np.sum(weights * (y - mu) ** 2))
        if self.name == "binomial_logit":
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
                t0 = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
            return float(2.0 * np.sum(weights * (t1 + t0)))
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(weights * (ylogy - (y - mu))))

    def loglik(self, y, mu, weights, scale: float = 1.0) -> float:
        """Exact log-likelihood (including normalizing constants)."""
        if self.name == "gaussian":
            n = y.size
            rss = float(np.sum(weights * (y - mu) ** 2))
            return (
                -0.5 * n * np.log(2.0 * np.pi * scale)
                + 0.5 * float(np.sum(np.log(weights)))
                - 0.5 * rss / scale
            )
        if self.name == "binomial_logit":
            mu = np.clip(mu, 1e-300, 1 - 1e-16)
            return float(
                np.sum(weights * (y * np.log(mu) + (1 - y) * np.log(1 - mu)))
            )
        mu = np.clip(mu, 1e-300, None)
        return float(
            np.sum(weights * (y * np.log(mu) - mu - gammaln(y + 1.0)))
        )


def _identity(eta):
    return eta


def _ones_like(x):
    return np.ones_like(x, dtype=float)


def _logit_mu_eta(eta):
    p = expit(eta)
    return p * (1.0 - p)


def _binom_var(mu):
    return mu * (1.0 - mu)


FAMILIES = {
    "gaussian": Family(
        name="gaussian",
        has_scale=True,
        linkinv=_identity,
        mu_eta=_ones_like,
        variance=_ones_like,
    ),
    "binomial_logit": Family(
        name="binomial_logit",
        has_scale=False,
        linkinv=expit,
        mu_eta=_logit_mu_eta,
        variance=_binom_var,
    ),
    "poisson_log": Family(
        name="poisson_log",
        has_scale=False,
        linkinv=np.exp,
        mu_eta=np.exp,
        variance=np.exp,
    ),
}

# Convenience aliases accepted on input.
_ALIASES = {
    "normal": "gaussian",
    "binomial": "binomial_logit",
    "logit": "binomial_logit",
    "poisson": "poisson_log",
}


def get_family(name) -> Family:
    """Look up a family by name (accepting common aliases)."""
    if isinstance(name, Family):
        return name
    key = str(name).lower()
    key = _ALIASES.get(key, key)
    if key not in FAMILIES:
        raise ValueError(
            f"unknown family {name!r}; expected one of {sorted(FAMILIES)}"
        )
    return FAMILIES[key]
