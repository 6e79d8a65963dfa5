"""Observation models and their Gaussian-marginal expectations.

Each likelihood provides, for scalar latent f with marginal N(m, v):

* ``log_density(y, f)``               exact pointwise log p(y | f),
* ``expectations(y, m, v)``           (E[log p], E[d_f log p], E[-d_ff log p]),
* ``predictive_log_density(y, m, v)`` log of the marginalized density.

The Gaussian likelihood is handled in closed form; the Bernoulli-probit
likelihood uses Gauss-Hermite quadrature. Quadrature node tables are
computed once per order and shared read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, logsumexp

__all__ = [
    "GaussianLikelihood",
    "BernoulliProbitLikelihood",
    "SiteGradient",
    "site_natgrad",
    "gauss_hermite",
]

LOG_2PI = float(np.log(2.0 * np.pi))

#: lower clip for the precision-form site gradient g2 = E[-d_ff log p];
#: keeps tied-site updates PSD under quadrature round-off.
BETA_FLOOR = 1e-10

DEFAULT_QUADRATURE_ORDER = 20


@lru_cache(maxsize=None)
def gauss_hermite(order: int):
    """Physicists' Gauss-Hermite nodes/weights, cached per order."""
    if order < 2:
        raise ValueError("quadrature_order must be >= 2")
    x, w = np.polynomial.hermite.hermgauss(order)
    return x, w


@dataclass(frozen=True)
class SiteGradient:
    """Natural gradient of the expected log-likelihood, precision form.

    g1 = beta * m + alpha, g2 = beta (clipped below at BETA_FLOOR),
    plus the expected log-likelihood for ELBO assembly.
    """

    g1: np.ndarray
    g2: np.ndarray
    ell: np.ndarray


def site_natgrad(alpha: np.ndarray, beta: np.ndarray, m: np.ndarray,
                 ell: np.ndarray | None = None) -> SiteGradient:
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    g2 = np.maximum(beta, BETA_FLOOR)
    g1 = beta * m + alpha
    if ell is None:
        ell = np.full_like(g1, np.nan)
    return SiteGradient(g1, g2, np.asarray(ell, dtype=float))


def _check_variance(v):
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("marginal variance must be positive")
    return v


@dataclass(frozen=True)
class GaussianLikelihood:
    """N(y; f, noise) observation model; noise kept in log-space."""

    log_noise: float = 0.0
    quadrature_order: int = DEFAULT_QUADRATURE_ORDER

    @classmethod
    def create(cls, noise: float = 1.0, quadrature_order: int = DEFAULT_QUADRATURE_ORDER):
        if noise <= 0:
            raise ValueError("noise variance must be positive")
        return cls(float(np.log(noise)), quadrature_order)

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    def with_log_noise(self, log_noise: float) -> "GaussianLikelihood":
        return GaussianLikelihood(float(log_noise), self.quadrature_order)

    def log_density(self, y, f):
        y = np.asarray(y, dtype=float)
        f = np.asarray(f, dtype=float)
        s2 = self.noise
        return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (y - f) ** 2 / s2

    def expectations(self, y, m, v):
        """Closed form: the integrands are at most quadratic in f."""
        y = np.asarray(y, dtype=float)
        m = np.asarray(m, dtype=float)
        v = _check_variance(v)
        s2 = self.noise
        ell = -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * ((y - m) ** 2 + v) / s2
        alpha = (y - m) / s2
        beta = np.full(np.broadcast(y, m, v).shape, 1.0 / s2)
        return ell, alpha, beta

    def predictive_log_density(self, y, m, v):
        y = np.asarray(y, dtype=float)
        m = np.asarray(m, dtype=float)
        v = _check_variance(v)
        tot = v + self.noise
        return -0.5 * (LOG_2PI + np.log(tot)) - 0.5 * (y - m) ** 2 / tot


def _probit_sign(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("Bernoulli-probit labels must be in {0, 1}")
    return 2.0 * y - 1.0


def _phi_over_cdf(z):
    # exp(log pdf - log cdf); stable for large negative z via log_ndtr
    logpdf = -0.5 * (LOG_2PI + z**2)
    return np.exp(logpdf - log_ndtr(z))


@dataclass(frozen=True)
class BernoulliProbitLikelihood:
    """Bernoulli observation with probit link p(y=1 | f) = Phi(f)."""

    quadrature_order: int = DEFAULT_QUADRATURE_ORDER

    def log_density(self, y, f):
        s = _probit_sign(y)
        f = np.asarray(f, dtype=float)
        return log_ndtr(s * f)

    def expectations(self, y, m, v):
        s = _probit_sign(y)
        m = np.asarray(m, dtype=float)
        v = _check_variance(v)
        x, w = gauss_hermite(self.quadrature_order)
        # f_j = m + sqrt(2 v) x_j; E[g] = sum_j w_j g(f_j) / sqrt(pi)
        f = m[..., None] + np.sqrt(2.0 * v)[..., None] * x
        z = s[..., None] * f
        ratio = _phi_over_cdf(z)
        wn = w / np.sqrt(np.pi)
        ell = np.sum(wn * log_ndtr(z), axis=-1)
        alpha = np.sum(wn * s[..., None] * ratio, axis=-1)
        # -d_ff log Phi(s f) = ratio * (z + ratio), positive by log-concavity
        beta = np.sum(wn * ratio * (z + ratio), axis=-1)
        return ell, alpha, beta

    def predictive_log_density(self, y, m, v):
        s = _probit_sign(y)
        m = np.asarray(m, dtype=float)
        v = _check_variance(v)
        x, w = gauss_hermite(self.quadrature_order)
        f = m[..., None] + np.sqrt(2.0 * v)[..., None] * x
        z = s[..., None] * f
        return logsumexp(log_ndtr(z), axis=-1, b=w / np.sqrt(np.pi))
