"""Sparse dual-parameterized SVGP with tied sites.

The n per-datapoint sites are compressed through kernel projections into a
single m-vector lambda_bar1 and an m x m PSD matrix Lambda_bar2 (precision
form, aggregating g2 = beta >= 0). With R = K_uu + Lambda_bar2, moment
recovery, prediction, the ELBO's KL term, and the log-partition M-step
objective all reduce to solves against R and K_uu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gaussmath import GaussianMoments, jittered_cholesky, kl_gaussian
from .kernels import InducingInputs, KernelSpec, as_points, eval_diag, eval_matrix
from .likelihoods import LOG_2PI, site_natgrad

__all__ = [
    "TiedSites",
    "SparseState",
    "ZeroTiedStateError",
    "zero_tied",
    "tied_from_untied",
    "tsvgp_moments",
    "tsvgp_marginals",
    "tsvgp_estep_step",
    "tsvgp_elbo",
    "tsvgp_logZ",
    "tsvgp_mstep_objective",
    "sparse_fixed_q_elbo",
]

#: relative regularizer applied to Lambda_bar2 inside the M-step objective only
MSTEP_LAMBDA2_EPS = 1e-8

#: marginal variances more negative than this indicate a broken PSD invariant
NEG_VAR_TOL = -1e-10

VAR_CLAMP = 1e-12


class ZeroTiedStateError(ValueError):
    """The M-step objective is undefined at the zero tied state."""


@dataclass(frozen=True)
class TiedSites:
    """Tied dual state: lambda_bar1 (m,) and PSD Lambda_bar2 (m, m)."""

    lambda_bar1: np.ndarray
    Lambda_bar2: np.ndarray

    def __post_init__(self):
        l1 = np.atleast_1d(np.asarray(self.lambda_bar1, dtype=float))
        L2 = np.atleast_2d(np.asarray(self.Lambda_bar2, dtype=float))
        if L2.shape != (l1.shape[0], l1.shape[0]):
            raise ValueError("Lambda_bar2 shape must match lambda_bar1 length")
        if np.max(np.abs(L2 - L2.T)) > 1e-12 * max(1.0, float(np.max(np.abs(L2)))):
            raise ValueError("Lambda_bar2 must be symmetric within 1e-12")
        object.__setattr__(self, "lambda_bar1", l1)
        object.__setattr__(self, "Lambda_bar2", 0.5 * (L2 + L2.T))

    @property
    def m(self) -> int:
        return self.lambda_bar1.shape[0]


def zero_tied(m: int) -> TiedSites:
    return TiedSites(np.zeros(m), np.zeros((m, m)))


def tied_from_untied(lambda1: np.ndarray, beta: np.ndarray, Kuf: np.ndarray) -> TiedSites:
    """Aggregate per-point sites through kernel projections (linearity of tying)."""
    lam1 = Kuf @ np.asarray(lambda1, dtype=float)
    L2 = Kuf @ (np.asarray(beta, dtype=float)[:, None] * Kuf.T)
    return TiedSites(lam1, 0.5 * (L2 + L2.T))


@dataclass(frozen=True)
class SparseState:
    """Inducing inputs plus tied sites, with per-kernel factor caches.

    The cache maps a KernelSpec to (chol K_uu, chol R); it is keyed by the
    kernel so changing hyperparameters can never serve stale factors, and a
    fresh state (hence fresh cache) is returned by every update.
    """

    inducing: InducingInputs
    tied: TiedSites
    #: kernel at which the tied sites were formed (set by the E-step);
    #: the M-step objective needs it to hold the sites fixed in u-space
    #: while the trial kernel moves.
    site_kernel: KernelSpec | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.tied.m != self.inducing.m:
            raise ValueError("tied state dimension must match inducing count")

    def factors(self, kernel: KernelSpec):
        """(chol K_uu, chol R) with R = K_uu + Lambda_bar2, memoized per kernel."""
        hit = self._cache.get(kernel)
        if hit is None:
            Kuu = eval_matrix(kernel, self.inducing.Z)
            Lk, _ = jittered_cholesky(Kuu)
            R = Kuu + self.tied.Lambda_bar2
            Lr, _ = jittered_cholesky(R)
            hit = (Kuu, Lk, Lr)
            self._cache[kernel] = hit
        return hit


def tsvgp_moments(state: SparseState, kernel: KernelSpec) -> GaussianMoments:
    """Recovered q(u): S_u = K_uu R^-1 K_uu, m_u = K_uu R^-1 lambda_bar1."""
    Kuu, _, Lr = state.factors(kernel)
    Su = Kuu @ cho_solve((Lr, True), Kuu)
    Su = 0.5 * (Su + Su.T)
    mu = Kuu @ cho_solve((Lr, True), state.tied.lambda_bar1)
    return GaussianMoments(mu, Su)


def tsvgp_marginals(state: SparseState, kernel: KernelSpec, Xstar: np.ndarray):
    """Per-point predictive (mean, variance) in the R-form.

    mean = K_*u R^-1 lambda_bar1;
    var  = K_** - K_*u K_uu^-1 K_u* + K_*u R^-1 K_u*  (diagonal only).
    """
    _, Lk, Lr = state.factors(kernel)
    Ksu = eval_matrix(kernel, Xstar, state.inducing.Z)
    mean = Ksu @ cho_solve((Lr, True), state.tied.lambda_bar1)
    kss = eval_diag(kernel, Xstar)
    A = solve_triangular(Lk, Ksu.T, lower=True)
    B = solve_triangular(Lr, Ksu.T, lower=True)
    var = kss - np.sum(A**2, axis=0) + np.sum(B**2, axis=0)
    if np.any(var < NEG_VAR_TOL):
        raise FloatingPointError(
            f"negative predictive variance {float(np.min(var)):.3e}: PSD invariant broken"
        )
    return mean, np.maximum(var, VAR_CLAMP)


def tsvgp_estep_step(
    state: SparseState,
    X: np.ndarray,
    y: np.ndarray,
    lik,
    kernel: KernelSpec,
    batch: np.ndarray,
    r: float,
) -> SparseState:
    """One tied natural-gradient step on a (mini)batch.

    lambda_bar1 <- (1-r) lambda_bar1 + r sum_i k_ui g1_i
    Lambda_bar2 <- (1-r) Lambda_bar2 + r sum_i k_ui g2_i k_ui^T

    Batch sums are not rescaled by n/|batch|; the (1-r) decay performs
    the implicit averaging.
    """
    if not (0.0 <= r <= 1.0):
        raise ValueError("step size r must lie in (0, 1]")
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=float)
    Xb, yb = as_points(X)[batch], y[batch]
    m, v = tsvgp_marginals(state, kernel, Xb)
    _, alpha, beta = lik.expectations(yb, m, v)
    g = site_natgrad(alpha, beta, m)
    Kub = eval_matrix(kernel, state.inducing.Z, Xb)
    new_l1 = (1.0 - r) * state.tied.lambda_bar1 + r * (Kub @ g.g1)
    new_L2 = (1.0 - r) * state.tied.Lambda_bar2 + r * (Kub @ (g.g2[:, None] * Kub.T))
    return SparseState(state.inducing, TiedSites(new_l1, 0.5 * (new_L2 + new_L2.T)), kernel)


def _tied_kl(state: SparseState, kernel: KernelSpec) -> float:
    """KL(q(u) || p(u)) in the R-form closed expression.

    1/2 (tr(K_uu R^-1) - m + l1^T R^-1 K_uu R^-1 l1 - ln|K_uu| + ln|R|)
    """
    Kuu, Lk, Lr = state.factors(kernel)
    m = state.tied.m
    Rinv_l1 = cho_solve((Lr, True), state.tied.lambda_bar1)
    trace = float(np.trace(cho_solve((Lr, True), Kuu)))
    quad = float(Rinv_l1 @ (Kuu @ Rinv_l1))
    logdet = 2.0 * float(np.sum(np.log(np.diag(Lr))) - np.sum(np.log(np.diag(Lk))))
    return 0.5 * (trace - m + quad + logdet)


def tsvgp_elbo(state: SparseState, X: np.ndarray, y: np.ndarray, lik, kernel: KernelSpec) -> float:
    """Sparse ELBO: quadrature expectations at the marginals minus the tied KL."""
    y = np.asarray(y, dtype=float)
    m, v = tsvgp_marginals(state, kernel, X)
    ell, _, _ = lik.expectations(y, m, v)
    return float(np.sum(ell)) - _tied_kl(state, kernel)


def tsvgp_logZ(state: SparseState, kernel: KernelSpec) -> float:
    """Log-partition of prior times tied site, in a stable rewritten form.

    With L2e = Lambda_bar2 + eps*I (relative regularizer, the raw matrix can
    be singular), the direct expression
        -(m/2) ln(2 pi) - 1/2 ln|K L2e^-1 K + K|
        - 1/2 y_tilde^T (K L2e^-1 K + K)^-1 y_tilde,
    y_tilde = K L2e^-1 lambda_bar1, is rewritten through
    |K L2e^-1 K + K| = |K| |K + L2e| / |L2e| and the matching quadratic
        lambda_bar1^T L2e^-1 K (K + L2e)^-1 lambda_bar1,
    avoiding the m x m inverse of the badly scaled middle matrix.
    """
    tied = state.tied
    mdim = tied.m
    tr = float(np.trace(tied.Lambda_bar2))
    if tr <= 0.0:
        raise ZeroTiedStateError("log-partition requires a non-zero Lambda_bar2")
    eps = MSTEP_LAMBDA2_EPS * tr / mdim
    L2e = tied.Lambda_bar2 + eps * np.eye(mdim)

    Kuu = eval_matrix(kernel, state.inducing.Z)
    Lk, _ = jittered_cholesky(Kuu)
    Lr, _ = jittered_cholesky(Kuu + L2e)
    Ll = np.linalg.cholesky(L2e)

    logdet_K = 2.0 * float(np.sum(np.log(np.diag(Lk))))
    logdet_L2e = 2.0 * float(np.sum(np.log(np.diag(Ll))))
    logdet_R = 2.0 * float(np.sum(np.log(np.diag(Lr))))

    l1 = tied.lambda_bar1
    quad = float(cho_solve((Ll, True), l1) @ (Kuu @ cho_solve((Lr, True), l1)))
    return -0.5 * mdim * LOG_2PI - 0.5 * (logdet_K - logdet_L2e + logdet_R) - 0.5 * quad


def tsvgp_mstep_objective(
    state: SparseState,
    X: np.ndarray,
    y: np.ndarray,
    lik,
    kernel: KernelSpec,
    batch: np.ndarray | None = None,
) -> float:
    """Dual-form M-step objective logZ(theta) + c(theta), tied state fixed.

    The tied site is held fixed as a function of u: its natural parameters
    are (Kt^-1 lambda_bar1, -Kt^-1 Lambda_bar2 Kt^-1 / 2) where Kt is the
    kernel matrix the E-step formed the sites with (``state.site_kernel``;
    the trial kernel itself when absent). The reconstruction at trial theta,

        S_u = Kt Rt^-1 Kt,  m_u = Kt Rt^-1 lambda_bar1,
        Rt  = Kt K(theta)^-1 Kt + Lambda_bar2,

    then moves with theta only through the prior, and logZ + c (normalized
    pseudo-likelihood site reading) collapses analytically to the ELBO of
    that reconstruction: every Lambda_bar2 inverse cancels, the value is
    exact without the eps regularizer, and the conjugate Z=X case recovers
    the exact log marginal likelihood at every theta.

    In minibatch mode the data-fit sum is taken over ``batch`` only.
    """
    tied = state.tied
    mdim = tied.m
    if float(np.trace(tied.Lambda_bar2)) <= 0.0:
        raise ZeroTiedStateError("M-step objective requires a non-zero Lambda_bar2")
    kt = state.site_kernel if state.site_kernel is not None else kernel
    Z = state.inducing.Z

    Kt = eval_matrix(kt, Z)
    Kth = eval_matrix(kernel, Z)
    Lth, _ = jittered_cholesky(Kth)
    Ltk, _ = jittered_cholesky(Kt)

    M = Kt @ cho_solve((Lth, True), Kt)
    M = 0.5 * (M + M.T)
    Rt = M + tied.Lambda_bar2
    Lr, _ = jittered_cholesky(Rt)

    l1 = tied.lambda_bar1
    Rinv_l1 = cho_solve((Lr, True), l1)
    mu = Kt @ Rinv_l1

    # KL(qhat || N(0, K_theta)) without factorizing S_u itself:
    #   tr(Kth^-1 S_u) = tr(Rt^-1 M); ln|S_u| = 2 ln|Kt| - ln|Rt|.
    trace = float(np.trace(cho_solve((Lr, True), M)))
    quad = float(mu @ cho_solve((Lth, True), mu))
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(Lth)))
        - 2.0 * np.sum(np.log(np.diag(Ltk)))
        + np.sum(np.log(np.diag(Lr)))
    )
    kl = 0.5 * (trace + quad - mdim + logdet)

    y = np.asarray(y, dtype=float)
    idx = np.arange(y.shape[0]) if batch is None else np.asarray(batch, dtype=int)
    Xb = as_points(X)[idx]
    Kuf = eval_matrix(kernel, Z, Xb)
    W = cho_solve((Lth, True), Kuf)  # columns a_i
    mean = W.T @ mu
    kff = eval_diag(kernel, Xb)
    T = solve_triangular(Lr, Kt @ W, lower=True)
    var = kff - np.sum(Kuf * W, axis=0) + np.sum(T**2, axis=0)
    var = np.maximum(var, VAR_CLAMP)
    ell, _, _ = lik.expectations(y[idx], mean, var)
    return float(np.sum(ell)) - kl


def sparse_fixed_q_elbo(
    mu: np.ndarray,
    Su: np.ndarray,
    Z: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    lik,
    kernel: KernelSpec,
) -> float:
    """Standard M-step objective: the ELBO with q(u) = N(mu, Su) held fixed.

    Only the projections a_i and the KL's prior depend on the trial kernel.
    """
    y = np.asarray(y, dtype=float)
    Kuu = eval_matrix(kernel, Z)
    Lk, jit = jittered_cholesky(Kuu)
    Kuf = eval_matrix(kernel, Z, X)
    A = cho_solve((Lk, True), Kuf)  # columns are a_i
    mf = A.T @ mu
    kff = eval_diag(kernel, X)
    vf = kff - np.sum(A * ((Kuu - Su) @ A), axis=0)
    vf = np.maximum(vf, VAR_CLAMP)
    ell, _, _ = lik.expectations(y, mf, vf)

    mdim = Kuu.shape[0]
    prior = GaussianMoments(np.zeros(mdim), Kuu + jit * np.eye(mdim))
    q = GaussianMoments(mu, Su)
    return float(np.sum(ell)) - kl_gaussian(q, prior)
