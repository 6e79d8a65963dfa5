"""Standard-parameterization SVGP baseline with natural-gradient E-steps.

The natural-gradient update is taken directly in eta-space using the
identity grad_mu KL(q || p) = eta - eta0, so one step reads

    eta <- (1 - rho) * eta + rho * (eta0 + G)

where G embeds the per-point site natural gradients through the
projections a_i = K_uu^-1 k_ui. This is mathematically identical to the
Jacobian chain-rule formulation and needs no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .gaussmath import (
    DegenerateGaussianError,
    GaussianNatural,
    jittered_cholesky,
    natural_to_moments,
)
from .kernels import InducingInputs, KernelSpec, as_points, eval_diag, eval_matrix
from .likelihoods import site_natgrad
from .tsvgp import VAR_CLAMP, sparse_fixed_q_elbo

__all__ = ["QState", "StepOvershootError", "prior_qstate", "qsvgp_marginals",
           "qsvgp_estep_step", "qsvgp_standard_mstep_objective"]


class StepOvershootError(ValueError):
    """The eta-space step left the valid Gaussian cone; reduce rho."""


@dataclass(frozen=True)
class QState:
    eta: GaussianNatural
    inducing: InducingInputs

    def __post_init__(self):
        if self.eta.dim != self.inducing.m:
            raise ValueError("eta dimension must match inducing count")


def _prior_natural(kernel: KernelSpec, Z: np.ndarray):
    Kuu = eval_matrix(kernel, Z)
    Lk, _ = jittered_cholesky(Kuu)
    Kinv = cho_solve((Lk, True), np.eye(Kuu.shape[0]))
    Kinv = 0.5 * (Kinv + Kinv.T)
    return Kuu, Lk, Kinv


def prior_qstate(inducing: InducingInputs, kernel: KernelSpec) -> QState:
    """q(u) initialized at the prior N(0, K_uu)."""
    _, _, Kinv = _prior_natural(kernel, inducing.Z)
    return QState(GaussianNatural(np.zeros(inducing.m), -0.5 * Kinv), inducing)


def qsvgp_marginals(qstate: QState, kernel: KernelSpec, Xstar: np.ndarray):
    """Per-point (mean, variance) of the SVGP marginals at Xstar."""
    mom = natural_to_moments(qstate.eta)
    Kuu, Lk, _ = _prior_natural(kernel, qstate.inducing.Z)
    Kus = eval_matrix(kernel, qstate.inducing.Z, Xstar)
    A = cho_solve((Lk, True), Kus)  # columns a_i
    mean = A.T @ mom.mean
    kss = eval_diag(kernel, Xstar)
    var = kss - np.sum(A * ((Kuu - mom.cov) @ A), axis=0)
    return mean, np.maximum(var, VAR_CLAMP)


def qsvgp_estep_step(
    qstate: QState,
    X: np.ndarray,
    y: np.ndarray,
    lik,
    kernel: KernelSpec,
    batch: np.ndarray,
    rho: float,
) -> QState:
    """One natural-gradient step in eta-space on a (mini)batch."""
    if not (0.0 <= rho <= 1.0):
        raise ValueError("step size rho must lie in (0, 1]")
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=float)
    Xb, yb = as_points(X)[batch], y[batch]

    m, v = qsvgp_marginals(qstate, kernel, Xb)
    _, alpha, beta = lik.expectations(yb, m, v)
    g = site_natgrad(alpha, beta, m)

    _, Lk, Kinv = _prior_natural(kernel, qstate.inducing.Z)
    Kub = eval_matrix(kernel, qstate.inducing.Z, Xb)
    A = cho_solve((Lk, True), Kub)
    G1 = A @ g.g1
    G2 = -0.5 * (A @ (g.g2[:, None] * A.T))

    new_eta1 = (1.0 - rho) * qstate.eta.eta1 + rho * G1
    new_eta2 = (1.0 - rho) * qstate.eta.eta2 + rho * (-0.5 * Kinv + G2)
    new_eta2 = 0.5 * (new_eta2 + new_eta2.T)
    try:
        eta = GaussianNatural(new_eta1, new_eta2)
    except DegenerateGaussianError as err:
        raise StepOvershootError(f"step overshoot: {err}") from err
    return QState(eta, qstate.inducing)


def qsvgp_standard_mstep_objective(
    qstate: QState, X: np.ndarray, y: np.ndarray, lik, kernel: KernelSpec
) -> float:
    """ELBO with q(u) frozen; only projections and the KL prior see the trial kernel."""
    mom = natural_to_moments(qstate.eta)
    return sparse_fixed_q_elbo(mom.mean, mom.cov, qstate.inducing.Z, X, y, lik, kernel)
