"""Multivariate-Gaussian coordinate systems and linear-algebra helpers.

A Gaussian can be carried in three interchangeable coordinate systems:

* moments        (m, S)                   -- mean and covariance,
* natural        (S^-1 m, -S^-1 / 2)      -- exponential-family coordinates,
* expectation    (m, S + m m^T)           -- moments of sufficient statistics.

All values here are immutable after construction; every operation is a
pure function, so instances are safe to share between threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "GaussianMoments",
    "GaussianNatural",
    "GaussianExpectation",
    "DegenerateGaussianError",
    "SeverelyIndefiniteError",
    "convert",
    "moments_to_natural",
    "moments_to_expectation",
    "natural_to_moments",
    "expectation_to_moments",
    "natural_to_expectation",
    "expectation_to_natural",
    "kl_gaussian",
    "jittered_cholesky",
    "record_jitter",
]

#: diagonal inflation ladder tried in order; the applied jitter is
#: eps * scale * mean(diag(A)) for the first eps that factorizes.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class DegenerateGaussianError(ValueError):
    """A matrix that must be positive definite is not.

    Carries the index of the offending eigendirection (the most negative
    eigenvalue of the matrix that failed to factorize).
    """

    def __init__(self, name: str, eigen_index: int, eigenvalue: float):
        self.eigen_index = eigen_index
        self.eigenvalue = eigenvalue
        super().__init__(
            f"degenerate Gaussian: {name} is not positive definite "
            f"(eigendirection {eigen_index}, eigenvalue {eigenvalue:.6e})"
        )


class SeverelyIndefiniteError(np.linalg.LinAlgError):
    """All jitter levels failed to make the matrix factorizable."""


# -- jitter bookkeeping -------------------------------------------------------

_jitter_sinks: list[list[float]] = []


@contextmanager
def record_jitter():
    """Collect the maximum jitter applied inside the block.

    Yields a single-element list whose entry holds the running maximum.
    """
    sink = [0.0]
    _jitter_sinks.append(sink)
    try:
        yield sink
    finally:
        _jitter_sinks.remove(sink)


def _note_jitter(applied: float) -> None:
    for sink in _jitter_sinks:
        if applied > sink[0]:
            sink[0] = applied


def jittered_cholesky(A: np.ndarray, scale: float = 1.0):
    """Lower Cholesky factor of A + eps*scale*mean(diag(A))*I.

    Tries the ladder ``JITTER_LADDER`` in order and returns
    ``(L, applied)`` for the smallest level that succeeds, where
    ``applied`` is the actual diagonal inflation.

    Raises ``SeverelyIndefiniteError`` if every level fails.
    """
    A = np.asarray(A, dtype=float)
    base = float(np.mean(np.diag(A)))
    if base <= 0.0:
        base = 1.0
    n = A.shape[0]
    for eps in JITTER_LADDER:
        applied = eps * scale * base
        try:
            L = np.linalg.cholesky(A + applied * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        _note_jitter(applied)
        return L, applied
    raise SeverelyIndefiniteError("severely indefinite matrix")


def _chol_or_degenerate(M: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(M)
        idx = int(np.argmin(w))
        raise DegenerateGaussianError(name, idx, float(w[idx])) from None


def _check_symmetric(M: np.ndarray, name: str, rtol: float = 1e-12) -> None:
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > rtol * scale:
        raise ValueError(f"{name} is not symmetric within {rtol:g} relative tolerance")


# -- parameterizations --------------------------------------------------------


@dataclass(frozen=True)
class GaussianMoments:
    """Mean-covariance coordinates with a cached lower Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        _check_symmetric(cov, "cov")
        if np.any(np.diag(cov) <= 0.0):
            idx = int(np.argmin(np.diag(cov)))
            raise DegenerateGaussianError("cov", idx, float(np.diag(cov)[idx]))
        chol = _chol_or_degenerate(cov, "cov")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianNatural:
    """Natural coordinates eta1 = S^-1 m, eta2 = -S^-1 / 2."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        eta1 = np.atleast_1d(np.asarray(self.eta1, dtype=float))
        eta2 = np.atleast_2d(np.asarray(self.eta2, dtype=float))
        _check_symmetric(eta2, "eta2")
        _chol_or_degenerate(-2.0 * eta2, "-2*eta2")
        object.__setattr__(self, "eta1", eta1)
        object.__setattr__(self, "eta2", eta2)

    @property
    def dim(self) -> int:
        return self.eta1.shape[0]


@dataclass(frozen=True)
class GaussianExpectation:
    """Expectation coordinates mu1 = m, mu2 = S + m m^T."""

    mu1: np.ndarray
    mu2: np.ndarray

    def __post_init__(self):
        mu1 = np.atleast_1d(np.asarray(self.mu1, dtype=float))
        mu2 = np.atleast_2d(np.asarray(self.mu2, dtype=float))
        _check_symmetric(mu2, "mu2")
        _chol_or_degenerate(mu2 - np.outer(mu1, mu1), "mu2 - mu1 mu1^T")
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "mu2", mu2)

    @property
    def dim(self) -> int:
        return self.mu1.shape[0]


# -- conversions --------------------------------------------------------------


def moments_to_natural(g: GaussianMoments) -> GaussianNatural:
    prec = cho_solve((g.chol, True), np.eye(g.dim))
    prec = 0.5 * (prec + prec.T)
    return GaussianNatural(prec @ g.mean, -0.5 * prec)


def natural_to_moments(g: GaussianNatural) -> GaussianMoments:
    prec = -2.0 * g.eta2
    L = _chol_or_degenerate(prec, "-2*eta2")
    cov = cho_solve((L, True), np.eye(g.dim))
    cov = 0.5 * (cov + cov.T)
    mean = cho_solve((L, True), g.eta1)
    return GaussianMoments(mean, cov)


def moments_to_expectation(g: GaussianMoments) -> GaussianExpectation:
    return GaussianExpectation(g.mean.copy(), g.cov + np.outer(g.mean, g.mean))


def expectation_to_moments(g: GaussianExpectation) -> GaussianMoments:
    return GaussianMoments(g.mu1.copy(), g.mu2 - np.outer(g.mu1, g.mu1))


def natural_to_expectation(g: GaussianNatural) -> GaussianExpectation:
    return moments_to_expectation(natural_to_moments(g))


def expectation_to_natural(g: GaussianExpectation) -> GaussianNatural:
    return moments_to_natural(expectation_to_moments(g))


_CONVERTERS = {
    (GaussianMoments, "natural"): moments_to_natural,
    (GaussianMoments, "expectation"): moments_to_expectation,
    (GaussianMoments, "moments"): lambda g: g,
    (GaussianNatural, "moments"): natural_to_moments,
    (GaussianNatural, "expectation"): natural_to_expectation,
    (GaussianNatural, "natural"): lambda g: g,
    (GaussianExpectation, "moments"): expectation_to_moments,
    (GaussianExpectation, "natural"): expectation_to_natural,
    (GaussianExpectation, "expectation"): lambda g: g,
}


def convert(src, target: str):
    """Convert between the three Gaussian coordinate systems.

    ``target`` is one of ``"moments"``, ``"natural"``, ``"expectation"``.
    """
    try:
        fn = _CONVERTERS[(type(src), target)]
    except KeyError:
        raise ValueError(f"cannot convert {type(src).__name__} to {target!r}") from None
    return fn(src)


# -- divergences --------------------------------------------------------------


def kl_gaussian(q: GaussianMoments, p: GaussianMoments) -> float:
    """KL(q || p) between two Gaussians of the same dimension.

    0.5 * (tr(Sp^-1 Sq) + (mp-mq)^T Sp^-1 (mp-mq) - k + ln|Sp|/|Sq|)
    """
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    k = q.dim
    Lp, Lq = p.chol, q.chol
    # tr(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    M = solve_triangular(Lp, Lq, lower=True)
    trace_term = float(np.sum(M**2))
    d = p.mean - q.mean
    w = solve_triangular(Lp, d, lower=True)
    maha = float(w @ w)
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.diag(Lq)))
    )
    return 0.5 * (trace_term + maha - k + logdet)
