"""Full (non-sparse) dual-parameterized variational GP.

State is one 2-vector of site parameters per datapoint, in natural
convention (lambda1_i, lambda2_i) with lambda2_i < 0. The E-step is a
convex combination of the current sites with the natural gradient of the
expected log-likelihood; the M-step objective is a Gaussian log-partition
over pseudo-targets plus a correction that vanishes exactly for the
conjugate (Gaussian-likelihood) case.

An exact conjugate GP oracle (log marginal likelihood, predictive
mean/variance, analytic log-space gradients) lives here as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gaussmath import GaussianMoments, jittered_cholesky, kl_gaussian
from .kernels import KernelSpec, eval_diag, eval_grad, eval_matrix
from .likelihoods import BETA_FLOOR, LOG_2PI, site_natgrad

__all__ = [
    "SiteParams",
    "PseudoTargets",
    "zero_sites",
    "tvgp_posterior",
    "tvgp_marginals",
    "tvgp_estep",
    "tvgp_elbo",
    "tvgp_logZ",
    "tvgp_mstep_objective",
    "exact_gp_logml",
    "exact_gp_logml_grad",
    "gp_regression_predict",
]

#: sites start at lambda2 = -BETA_FLOOR/2, i.e. the clip floor of g2
LAMBDA2_CEIL = -0.5 * BETA_FLOOR


@dataclass(frozen=True)
class SiteParams:
    """Per-datapoint dual parameters, natural convention (lambda2 <= 0)."""

    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        l1 = np.atleast_1d(np.asarray(self.lambda1, dtype=float))
        l2 = np.atleast_1d(np.asarray(self.lambda2, dtype=float))
        if l1.shape != l2.shape:
            raise ValueError("lambda1 and lambda2 must have equal length")
        if np.any(l2 > LAMBDA2_CEIL * (1.0 - 1e-9)):
            raise ValueError("lambda2 entries must stay at or below the clip ceiling")
        object.__setattr__(self, "lambda1", l1)
        object.__setattr__(self, "lambda2", l2)

    @property
    def n(self) -> int:
        return self.lambda1.shape[0]


@dataclass(frozen=True)
class PseudoTargets:
    """Pseudo-data view of sites: y_tilde = -lambda1/(2 lambda2), beta = -2 lambda2."""

    y_tilde: np.ndarray
    beta: np.ndarray

    @classmethod
    def from_sites(cls, sites: SiteParams) -> "PseudoTargets":
        beta = -2.0 * sites.lambda2
        if np.any(beta <= 0):
            raise ValueError("pseudo-target precision beta must be strictly positive")
        return cls(-0.5 * sites.lambda1 / sites.lambda2, beta)


def zero_sites(n: int) -> SiteParams:
    """Empty-history initialization: q equals the prior up to the clip floor."""
    return SiteParams(np.zeros(n), np.full(n, LAMBDA2_CEIL))


def _sites_from_gradient(g1: np.ndarray, g2: np.ndarray) -> SiteParams:
    # precision-form gradient (g1, g2) -> natural convention (g1, -g2/2)
    return SiteParams(g1, -0.5 * g2)


# -- posterior reconstruction --------------------------------------------------


def tvgp_posterior(sites: SiteParams, kernel: KernelSpec, X: np.ndarray) -> GaussianMoments:
    """Posterior N(m, S) with S = (K^-1 + diag(beta))^-1 and S^-1 m = lambda1.

    Evaluated in the inversion-free form S = K - K (K + diag(1/beta))^-1 K,
    m = S lambda1 (zero-mean prior).
    """
    pt = PseudoTargets.from_sites(sites)
    K = eval_matrix(kernel, X)
    W = K + np.diag(1.0 / pt.beta)
    L, _ = jittered_cholesky(W)
    S = K - K @ cho_solve((L, True), K)
    S = 0.5 * (S + S.T)
    m = S @ sites.lambda1
    return GaussianMoments(m, S)


def tvgp_marginals(sites: SiteParams, kernel: KernelSpec, X: np.ndarray):
    """Per-datapoint marginal means and variances of the posterior."""
    post = tvgp_posterior(sites, kernel, X)
    return post.mean, np.diag(post.cov).copy()


# -- E-step ---------------------------------------------------------------------


def tvgp_estep(
    sites: SiteParams,
    X: np.ndarray,
    y: np.ndarray,
    lik,
    kernel: KernelSpec,
    r: float,
    iters: int,
    tol: float | None = None,
) -> SiteParams:
    """Natural-gradient site updates lambda <- (1-r) lambda + r g at fixed kernel.

    Stops early once the max absolute site change drops below ``tol``.
    """
    if not (0.0 <= r <= 1.0):
        raise ValueError("step size r must lie in (0, 1]")
    y = np.asarray(y, dtype=float)
    for _ in range(iters):
        m, v = tvgp_marginals(sites, kernel, X)
        _, alpha, beta = lik.expectations(y, m, v)
        g = site_natgrad(alpha, beta, m)
        new_l1 = (1.0 - r) * sites.lambda1 + r * g.g1
        new_l2 = (1.0 - r) * sites.lambda2 + r * (-0.5 * g.g2)
        delta = max(
            float(np.max(np.abs(new_l1 - sites.lambda1))),
            float(np.max(np.abs(new_l2 - sites.lambda2))),
        )
        sites = SiteParams(new_l1, new_l2)
        if tol is not None and delta < tol:
            break
    return sites


def tvgp_elbo(sites: SiteParams, X: np.ndarray, y: np.ndarray, lik, kernel: KernelSpec) -> float:
    """Standard ELBO: sum of variational expectations minus KL to the prior."""
    y = np.asarray(y, dtype=float)
    post = tvgp_posterior(sites, kernel, X)
    m, v = post.mean, np.diag(post.cov)
    ell, _, _ = lik.expectations(y, m, v)
    K = eval_matrix(kernel, X)
    Lk, applied = jittered_cholesky(K)
    prior = GaussianMoments(np.zeros(post.dim), K + applied * np.eye(post.dim))
    return float(np.sum(ell)) - kl_gaussian(post, prior)


# -- M-step objective -----------------------------------------------------------


def tvgp_logZ(sites: SiteParams, kernel: KernelSpec, X: np.ndarray) -> float:
    """Log-partition in pseudo-data form.

    -n/2 ln(2 pi) - 1/2 ln|diag(1/beta) + K| - 1/2 yt^T [diag(1/beta) + K]^-1 yt,
    which recovers the exact log marginal likelihood in the conjugate case.
    """
    if np.any(sites.lambda2 >= 0):
        raise ValueError("all lambda2 must be strictly negative")
    pt = PseudoTargets.from_sites(sites)
    K = eval_matrix(kernel, X)
    W = K + np.diag(1.0 / pt.beta)
    L, _ = jittered_cholesky(W)
    n = sites.n
    w = solve_triangular(L, pt.y_tilde, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * n * LOG_2PI - 0.5 * logdet - 0.5 * float(w @ w)


def _site_pseudo_loglik(sites: SiteParams, m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """E_q[log N(y_tilde_i; f_i, 1/beta_i)] under marginals N(m_i, v_i).

    The sites are interpreted as normalized Gaussian pseudo-likelihoods;
    this is the normalization that makes logZ + c equal the ELBO of the
    kernel-dependent reconstruction, with c = 0 exactly in the conjugate case.
    """
    pt = PseudoTargets.from_sites(sites)
    return -0.5 * (LOG_2PI - np.log(pt.beta)) - 0.5 * pt.beta * ((pt.y_tilde - m) ** 2 + v)


def tvgp_mstep_objective(
    sites: SiteParams, X: np.ndarray, y: np.ndarray, lik, kernel: KernelSpec
) -> float:
    """Dual-form objective logZ(theta) + c(theta) with sites held fixed.

    c(theta) sums E_q[log p(y_i|f_i) - log N(y_tilde_i; f_i, 1/beta_i)]
    under the kernel-dependent posterior reconstruction; it vanishes
    identically for the Gaussian likelihood.
    """
    y = np.asarray(y, dtype=float)
    m, v = tvgp_marginals(sites, kernel, X)
    ell, _, _ = lik.expectations(y, m, v)
    c = float(np.sum(ell - _site_pseudo_loglik(sites, m, v)))
    return tvgp_logZ(sites, kernel, X) + c


# -- exact conjugate oracle ------------------------------------------------------


def _noisy_chol(kernel: KernelSpec, X: np.ndarray, sigma2: float):
    K = eval_matrix(kernel, X)
    Ky = K + sigma2 * np.eye(K.shape[0])
    L, _ = jittered_cholesky(Ky)
    return Ky, L


def exact_gp_logml(X: np.ndarray, y: np.ndarray, kernel: KernelSpec, sigma2: float) -> float:
    """Exact GP-regression log marginal likelihood (zero-mean prior)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    _, L = _noisy_chol(kernel, X, sigma2)
    w = solve_triangular(L, y, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * float(w @ w) - 0.5 * logdet - 0.5 * n * LOG_2PI


def exact_gp_logml_grad(X: np.ndarray, y: np.ndarray, kernel: KernelSpec, sigma2: float) -> np.ndarray:
    """Analytic gradient of the log marginal likelihood.

    Coordinates: (log lengthscale, log variance, log noise), using
    dL/dtheta = 1/2 tr((aa^T - Ky^-1) dKy/dtheta) with a = Ky^-1 y.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    _, L = _noisy_chol(kernel, X, sigma2)
    a = cho_solve((L, True), y)
    Kinv = cho_solve((L, True), np.eye(n))
    inner = np.outer(a, a) - Kinv
    grads = []
    for param in ("log_lengthscale", "log_variance"):
        dK = eval_grad(kernel, X, X, param)
        grads.append(0.5 * float(np.sum(inner * dK)))
    grads.append(0.5 * float(np.trace(inner)) * sigma2)  # d Ky / d log(sigma2) = sigma2 I
    return np.array(grads)


def gp_regression_predict(
    X: np.ndarray, y: np.ndarray, kernel: KernelSpec, sigma2: float, Xstar: np.ndarray
):
    """Direct Cholesky evaluation of the conjugate GP predictive (mean, var)."""
    y = np.asarray(y, dtype=float)
    _, L = _noisy_chol(kernel, X, sigma2)
    Ks = eval_matrix(kernel, X, Xstar)
    a = cho_solve((L, True), y)
    mean = Ks.T @ a
    V = solve_triangular(L, Ks, lower=True)
    kss = eval_diag(kernel, Xstar)
    var = kss - np.sum(V**2, axis=0)
    return mean, var
