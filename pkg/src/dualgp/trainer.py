"""Variational EM driver: natural-gradient E-steps, Adam M-steps on
log-hyperparameters with central finite-difference gradients, and
per-iteration trace recording.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import qsvgp, tsvgp, tvgp
from .data import CLASSIFICATION, Dataset, REGRESSION, choose_inducing
from .gaussmath import (
    DegenerateGaussianError,
    SeverelyIndefiniteError,
    kl_gaussian,
    record_jitter,
)
from .gaussmath import GaussianMoments
from .kernels import InducingInputs, KernelSpec, MATERN52
from .likelihoods import BernoulliProbitLikelihood, GaussianLikelihood

__all__ = [
    "TrainConfig",
    "ModelSetup",
    "Trace",
    "TraceRow",
    "run_em",
    "run_em_full",
    "FitResult",
    "converge_estep",
    "adam_step",
    "AdamState",
    "fd_gradient",
    "nlpd",
]

PROPOSED = "proposed"
STANDARD = "standard"

_STEP_ERRORS = (
    qsvgp.StepOvershootError,
    SeverelyIndefiniteError,
    DegenerateGaussianError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


@dataclass(frozen=True)
class TrainConfig:
    e_steps: int = 4
    m_steps: int = 1
    outer_iters: int = 20
    e_rate: float = 0.7
    m_rate: float = 0.2
    batch_size: int | str = "full"
    mstep_objective: str = PROPOSED
    fd_step: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    quadrature_order: int = 20
    e_converge: bool = False
    e_tol: float = 1e-8
    e_max: int = 500
    m_converge: bool = False
    m_tol: float = 1e-9
    optimize: tuple | None = None  # theta names to optimize; None = all

    def __post_init__(self):
        if not (0.0 < self.e_rate <= 1.0):
            raise ValueError("e_rate must lie in (0, 1]")
        if self.m_rate <= 0:
            raise ValueError("m_rate must be positive")
        if self.mstep_objective not in (PROPOSED, STANDARD):
            raise ValueError(f"unknown mstep_objective {self.mstep_objective!r}")


@dataclass(frozen=True)
class ModelSetup:
    kind: str  # tvgp | tsvgp | qsvgp
    kernel_family: str = MATERN52
    init_lengthscale: float = 1.0
    init_variance: float = 1.0
    init_noise: float = 1.0
    num_inducing: int | None = None
    inducing: np.ndarray | None = None
    inducing_method: str = "kmeans"

    def __post_init__(self):
        if self.kind not in ("tvgp", "tsvgp", "qsvgp"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass
class TraceRow:
    iter: int
    elbo: float
    objective: float
    nlpd_train: float
    nlpd_test: float
    theta: np.ndarray
    seconds: float
    jitter_max: float
    failed: bool = False


@dataclass
class Trace:
    theta_names: tuple
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow):
        self.rows.append(row)

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.rows])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["iter", "elbo", "objective", "nlpd_train", "nlpd_test"]
            header += [f"theta_{i}" for i in range(len(self.theta_names))]
            header += ["seconds", "jitter_max"]
            writer.writerow(header)
            for r in self.rows:
                writer.writerow(
                    [r.iter, repr(r.elbo), repr(r.objective), repr(r.nlpd_train),
                     repr(r.nlpd_test)]
                    + [repr(float(t)) for t in r.theta]
                    + [repr(r.seconds), repr(r.jitter_max)]
                )


# -- optimizer helpers ---------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "AdamState":
        return cls(np.zeros(k), np.zeros(k))


def adam_step(params, grad, state: AdamState, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam ascent step; pure function of its inputs."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        return np.asarray(params, dtype=float).copy(), state
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad**2
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    new = np.asarray(params, dtype=float) + lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m, v)


def fd_gradient(fn, theta: np.ndarray, h_scale: float) -> np.ndarray:
    """Central differences with per-coordinate step h_i = h_scale*(1+|theta_i|).

    Coordinates where either evaluation is non-finite come back as NaN.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = h_scale * (1.0 + abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        try:
            fu, fd = fn(up), fn(dn)
        except _STEP_ERRORS:
            grad[i] = np.nan
            continue
        grad[i] = (fu - fd) / (2.0 * h) if np.isfinite(fu) and np.isfinite(fd) else np.nan
    return grad


def nlpd(lik, y: np.ndarray, mean: np.ndarray, var: np.ndarray) -> float:
    """Average negative log predictive density over the given points."""
    return -float(np.mean(lik.predictive_log_density(y, mean, var)))


# -- model adapters --------------------------------------------------------------


class _Adapter:
    """Maps a flat log-hyperparameter vector onto kernel/likelihood objects."""

    def __init__(self, setup: ModelSetup, data: Dataset, config: TrainConfig):
        self.setup = setup
        self.X = data.X
        self.y = data.y
        self.task = data.task
        names = ["log_lengthscale", "log_variance"]
        if data.task == REGRESSION:
            names.append("log_noise")
        self.theta_names = tuple(names)
        self.theta0 = np.array(
            [np.log(setup.init_lengthscale), np.log(setup.init_variance)]
            + ([np.log(setup.init_noise)] if data.task == REGRESSION else [])
        )
        self.quadrature_order = config.quadrature_order

    def kernel(self, theta) -> KernelSpec:
        return KernelSpec(self.setup.kernel_family, float(theta[0]), float(theta[1]))

    def likelihood(self, theta):
        if self.task == REGRESSION:
            return GaussianLikelihood(float(theta[2]), self.quadrature_order)
        return BernoulliProbitLikelihood(self.quadrature_order)


class _TVGPAdapter(_Adapter):
    kind = "tvgp"

    def init_state(self, seed: int):
        return tvgp.zero_sites(self.y.shape[0])

    def estep_step(self, state, theta, batch, r):
        if batch.size != self.y.shape[0]:
            raise ValueError("t-VGP E-steps are full-batch only")
        return tvgp.tvgp_estep(state, self.X, self.y, self.likelihood(theta),
                               self.kernel(theta), r, iters=1)

    def elbo(self, state, theta):
        return tvgp.tvgp_elbo(state, self.X, self.y, self.likelihood(theta),
                              self.kernel(theta))

    def proposed_objective(self, state, theta):
        return tvgp.tvgp_mstep_objective(state, self.X, self.y,
                                         self.likelihood(theta), self.kernel(theta))

    def frozen_q(self, state, theta):
        post = tvgp.tvgp_posterior(state, self.kernel(theta), self.X)
        return post

    def standard_objective(self, frozen, theta):
        m, v = frozen.mean, np.diag(frozen.cov)
        ell, _, _ = self.likelihood(theta).expectations(self.y, m, v)
        from .gaussmath import jittered_cholesky
        from .kernels import eval_matrix

        K = eval_matrix(self.kernel(theta), self.X)
        _, jit = jittered_cholesky(K)
        prior = GaussianMoments(np.zeros(frozen.dim), K + jit * np.eye(frozen.dim))
        return float(np.sum(ell)) - kl_gaussian(frozen, prior)

    def marginals(self, state, theta, Xq):
        post_m, post_v = tvgp.tvgp_marginals(state, self.kernel(theta), self.X)
        if Xq is self.X:
            return post_m, post_v
        # held-out marginals through the pseudo-data GP regression form
        pt = tvgp.PseudoTargets.from_sites(state)
        return _pseudo_predict(self.X, pt, self.kernel(theta), Xq)

    def state_delta(self, old, new) -> float:
        return max(
            float(np.max(np.abs(new.lambda1 - old.lambda1))),
            float(np.max(np.abs(new.lambda2 - old.lambda2))),
        )


def _pseudo_predict(X, pt, kernel, Xq):
    """GP-regression predictive with heteroscedastic pseudo-noise 1/beta."""
    from scipy.linalg import cho_solve, solve_triangular

    from .gaussmath import jittered_cholesky
    from .kernels import eval_diag, eval_matrix

    K = eval_matrix(kernel, X)
    W = K + np.diag(1.0 / pt.beta)
    L, _ = jittered_cholesky(W)
    Ks = eval_matrix(kernel, X, Xq)
    mean = Ks.T @ cho_solve((L, True), pt.y_tilde)
    V = solve_triangular(L, Ks, lower=True)
    var = eval_diag(kernel, Xq) - np.sum(V**2, axis=0)
    return mean, np.maximum(var, tsvgp.VAR_CLAMP)


class _TSVGPAdapter(_Adapter):
    kind = "tsvgp"

    def __init__(self, setup, data, config):
        super().__init__(setup, data, config)
        if setup.inducing is not None:
            Z = np.asarray(setup.inducing, dtype=float)
        else:
            if setup.num_inducing is None:
                raise ValueError("sparse models need num_inducing or explicit inducing")
            Z = choose_inducing(data.X, setup.num_inducing, config.seed,
                                setup.inducing_method)
        self.inducing = InducingInputs(Z)

    def init_state(self, seed: int):
        return tsvgp.SparseState(self.inducing, tsvgp.zero_tied(self.inducing.m))

    def estep_step(self, state, theta, batch, r):
        return tsvgp.tsvgp_estep_step(state, self.X, self.y, self.likelihood(theta),
                                      self.kernel(theta), batch, r)

    def elbo(self, state, theta):
        return tsvgp.tsvgp_elbo(state, self.X, self.y, self.likelihood(theta),
                                self.kernel(theta))

    def proposed_objective(self, state, theta):
        return tsvgp.tsvgp_mstep_objective(state, self.X, self.y,
                                           self.likelihood(theta), self.kernel(theta))

    def frozen_q(self, state, theta):
        return tsvgp.tsvgp_moments(state, self.kernel(theta))

    def standard_objective(self, frozen, theta):
        return tsvgp.sparse_fixed_q_elbo(frozen.mean, frozen.cov, self.inducing.Z,
                                         self.X, self.y, self.likelihood(theta),
                                         self.kernel(theta))

    def marginals(self, state, theta, Xq):
        return tsvgp.tsvgp_marginals(state, self.kernel(theta), Xq)

    def state_delta(self, old, new) -> float:
        return max(
            float(np.max(np.abs(new.tied.lambda_bar1 - old.tied.lambda_bar1))),
            float(np.max(np.abs(new.tied.Lambda_bar2 - old.tied.Lambda_bar2))),
        )


class _QSVGPAdapter(_TSVGPAdapter):
    kind = "qsvgp"

    def init_state(self, seed: int):
        return qsvgp.prior_qstate(self.inducing, self.kernel(self.theta0))

    def estep_step(self, state, theta, batch, r):
        return qsvgp.qsvgp_estep_step(state, self.X, self.y, self.likelihood(theta),
                                      self.kernel(theta), batch, r)

    def elbo(self, state, theta):
        mom = _qmoments(state)
        return tsvgp.sparse_fixed_q_elbo(mom.mean, mom.cov, self.inducing.Z,
                                         self.X, self.y, self.likelihood(theta),
                                         self.kernel(theta))

    def proposed_objective(self, state, theta):
        raise ValueError("the q-SVGP baseline has no dual-form M-step objective")

    def frozen_q(self, state, theta):
        return _qmoments(state)

    def marginals(self, state, theta, Xq):
        return qsvgp.qsvgp_marginals(state, self.kernel(theta), Xq)

    def state_delta(self, old, new) -> float:
        return max(
            float(np.max(np.abs(new.eta.eta1 - old.eta.eta1))),
            float(np.max(np.abs(new.eta.eta2 - old.eta.eta2))),
        )


def _qmoments(state):
    from .gaussmath import natural_to_moments

    return natural_to_moments(state.eta)


_ADAPTERS = {"tvgp": _TVGPAdapter, "tsvgp": _TSVGPAdapter, "qsvgp": _QSVGPAdapter}


def make_adapter(setup: ModelSetup, data: Dataset, config: TrainConfig):
    return _ADAPTERS[setup.kind](setup, data, config)


# -- the EM loop -----------------------------------------------------------------


class _BatchStream:
    """Seeded minibatch index stream; reshuffles each epoch."""

    def __init__(self, n: int, batch_size, seed: int):
        self.n = n
        self.rng = np.random.default_rng(seed)
        if batch_size == "full" or batch_size is None or int(batch_size) >= n:
            self.size = n
        else:
            self.size = int(batch_size)
            if self.size < 1:
                raise ValueError("batch_size must be >= 1")
        self._queue = []

    def next(self) -> np.ndarray:
        if self.size == self.n:
            return np.arange(self.n)
        if len(self._queue) < self.size:
            self._queue = list(self.rng.permutation(self.n))
        out = np.array(self._queue[: self.size])
        del self._queue[: self.size]
        return out


@dataclass
class FitResult:
    trace: Trace
    state: object
    theta: np.ndarray
    adapter: object


def run_em(setup: ModelSetup, data: Dataset, config: TrainConfig,
           test: Dataset | None = None) -> Trace:
    """Alternate natural-gradient E-steps with Adam M-steps and record a trace.

    Deterministic given config.seed; E-step failures halve the rate up to
    five times before the outer iteration is abandoned (and flagged).
    """
    return run_em_full(setup, data, config, test).trace


def run_em_full(setup: ModelSetup, data: Dataset, config: TrainConfig,
                test: Dataset | None = None) -> FitResult:
    """run_em, but also returning the final variational state and theta."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    if setup.kind == "qsvgp" and config.mstep_objective == PROPOSED:
        raise ValueError("q-SVGP supports only the standard M-step objective")
    adapter = make_adapter(setup, data, config)
    mask = _optimize_mask(adapter.theta_names, config.optimize)

    theta = adapter.theta0.copy()
    state = adapter.init_state(config.seed)
    stream = _BatchStream(data.n, config.batch_size, config.seed)
    trace = Trace(adapter.theta_names)
    start = time.perf_counter()

    def record(i: int, jitter: float, failed: bool = False):
        lik = adapter.likelihood(theta)
        elbo = adapter.elbo(state, theta)
        try:
            obj = (adapter.proposed_objective(state, theta)
                   if config.mstep_objective == PROPOSED
                   else adapter.standard_objective(adapter.frozen_q(state, theta), theta))
        except (tsvgp.ZeroTiedStateError, ValueError):
            obj = float("nan")
        mtr, vtr = adapter.marginals(state, theta, data.X)
        nl_train = nlpd(lik, data.y, mtr, vtr)
        if test is not None:
            mte, vte = adapter.marginals(state, theta, test.X)
            nl_test = nlpd(lik, test.y, mte, vte)
        else:
            nl_test = float("nan")
        trace.append(TraceRow(i, elbo, obj, nl_train, nl_test, theta.copy(),
                              time.perf_counter() - start, jitter, failed))

    with record_jitter() as jit0:
        record(0, jit0[0])

    # Adam moments persist across outer iterations so the hyperparameter
    # path behaves like one continuous optimization run
    adam = AdamState.zeros(int(np.sum(mask)))
    adam_t = 0
    for it in range(1, config.outer_iters + 1):
        failed = False
        with record_jitter() as jit:
            # ---- E-step
            if config.e_steps > 0 or config.e_converge:
                state, failed = _run_estep(adapter, state, theta, config, stream)
            # ---- M-step
            if config.m_steps > 0 and np.any(mask) and not failed:
                theta, adam, adam_t = _run_mstep(adapter, state, theta, config,
                                                 mask, adam, adam_t)
        record(it, jit[0], failed)
    return FitResult(trace, state, theta, adapter)


def converge_estep(adapter, state, theta, r: float = 0.7,
                   tol: float = 1e-10, max_iter: int = 2000):
    """Full-batch natural-gradient E-steps until the site change drops below tol."""
    n = adapter.y.shape[0]
    batch = np.arange(n)
    for _ in range(max_iter):
        new_state = adapter.estep_step(state, theta, batch, r)
        delta = adapter.state_delta(state, new_state)
        state = new_state
        if delta < tol:
            break
    return state


def _optimize_mask(names, optimize):
    if optimize is None:
        return np.ones(len(names), dtype=bool)
    unknown = set(optimize) - set(names)
    if unknown:
        raise ValueError(f"unknown hyperparameters to optimize: {sorted(unknown)}")
    return np.array([n in optimize for n in names])


def _run_estep(adapter, state, theta, config, stream):
    steps = config.e_max if config.e_converge else config.e_steps
    rate = config.e_rate
    for _ in range(steps):
        batch = stream.next()
        for attempt in range(6):
            try:
                new_state = adapter.estep_step(state, theta, batch, rate)
                break
            except _STEP_ERRORS:
                rate *= 0.5
        else:
            return state, True
        delta = adapter.state_delta(state, new_state)
        state = new_state
        if config.e_converge and delta < config.e_tol:
            break
    return state, False


def _run_mstep(adapter, state, theta, config, mask, adam, adam_t):
    if config.mstep_objective == PROPOSED:
        def objective(tv):
            return adapter.proposed_objective(state, tv)
    else:
        frozen = adapter.frozen_q(state, theta)

        def objective(tv):
            return adapter.standard_objective(frozen, tv)

    opt = theta[mask].copy()
    prev_val = None
    for _ in range(config.m_steps):
        def masked_obj(x):
            full = theta.copy()
            full[mask] = x
            return objective(full)

        grad = fd_gradient(masked_obj, opt, config.fd_step)
        adam_t += 1
        opt, adam = adam_step(opt, grad, adam, config.m_rate, adam_t,
                              config.adam_beta1, config.adam_beta2, config.adam_eps)
        if config.m_converge:
            val = masked_obj(opt)
            if prev_val is not None and abs(val - prev_val) < config.m_tol:
                break
            prev_val = val
    out = theta.copy()
    out[mask] = opt
    return out, adam, adam_t
