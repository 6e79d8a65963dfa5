"""Covariance functions with analytic log-space hyperparameter gradients.

Two isotropic families are supported: squared-exponential and Matern-5/2.
Hyperparameters are stored in log-space so positivity holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

__all__ = ["KernelSpec", "InducingInputs", "eval_matrix", "eval_diag", "eval_grad",
           "as_points"]

SQUARED_EXPONENTIAL = "sqexp"
MATERN52 = "matern52"
FAMILIES = (SQUARED_EXPONENTIAL, MATERN52)

GRAD_PARAMS = ("log_lengthscale", "log_variance")


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic kernel: family plus (log) lengthscale and magnitude."""

    family: str
    log_lengthscale: float = 0.0
    log_variance: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")

    @classmethod
    def create(cls, family: str, lengthscale: float = 1.0, variance: float = 1.0):
        if lengthscale <= 0 or variance <= 0:
            raise ValueError("lengthscale and variance must be positive")
        return cls(family, float(np.log(lengthscale)), float(np.log(variance)))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    def with_logs(self, log_lengthscale=None, log_variance=None) -> "KernelSpec":
        return KernelSpec(
            self.family,
            self.log_lengthscale if log_lengthscale is None else float(log_lengthscale),
            self.log_variance if log_variance is None else float(log_variance),
        )


@dataclass(frozen=True)
class InducingInputs:
    """Inducing locations Z (m x d); duplicate rows are rejected."""

    Z: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if Z.shape[0] > 1:
            D = cdist(Z, Z)
            np.fill_diagonal(D, np.inf)
            if np.min(D) <= 1e-12:
                raise ValueError("duplicate inducing inputs within 1e-12")
        object.__setattr__(self, "Z", Z)

    @property
    def m(self) -> int:
        return self.Z.shape[0]


def as_points(A: np.ndarray) -> np.ndarray:
    """Coerce to an (n, d) point array; 1-D input is read as n points in 1-D."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    return A


def _distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A, B = as_points(A), as_points(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(
            f"input dimension mismatch: {A.shape[1]} vs {B.shape[1]}"
        )
    return cdist(A, B)


def eval_matrix(k: KernelSpec, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Cross-covariance matrix with entries kappa(a_i, b_j)."""
    if B is None:
        B = A
    r = _distances(A, B)
    ell, var = k.lengthscale, k.variance
    if k.family == SQUARED_EXPONENTIAL:
        return var * np.exp(-0.5 * (r / ell) ** 2)
    s = np.sqrt(5.0) * r / ell
    return var * (1.0 + s + s**2 / 3.0) * np.exp(-s)


def eval_diag(k: KernelSpec, A: np.ndarray) -> np.ndarray:
    """Diagonal of eval_matrix(k, A); constant for these stationary families."""
    return np.full(as_points(A).shape[0], k.variance)


def eval_grad(k: KernelSpec, A: np.ndarray, B: np.ndarray | None, param: str) -> np.ndarray:
    """Entrywise derivative of eval_matrix w.r.t. a log-space parameter."""
    if param not in GRAD_PARAMS:
        raise ValueError(f"unknown parameter {param!r}; expected one of {GRAD_PARAMS}")
    if param == "log_variance":
        # kernel is linear in the magnitude, so d/dlog(var) is the value itself
        return eval_matrix(k, A, B)
    if B is None:
        B = A
    r = _distances(A, B)
    ell, var = k.lengthscale, k.variance
    if k.family == SQUARED_EXPONENTIAL:
        return var * np.exp(-0.5 * (r / ell) ** 2) * (r / ell) ** 2
    s = np.sqrt(5.0) * r / ell
    # d kappa / d log(ell) = var * (s^2 / 3) * (1 + s) * exp(-s)
    return var * (s**2 / 3.0) * (1.0 + s) * np.exp(-s)
