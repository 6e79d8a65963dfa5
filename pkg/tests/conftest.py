"""Shared fixtures: synthetic datasets and converged states used across tests."""

import numpy as np
import pytest

import dualgp as dg
from dualgp.kernels import eval_matrix


def make_regression(n=30, seed=0, lengthscale=0.8, variance=1.3, noise=0.1):
    """1-D conjugate regression sample drawn from the model itself."""
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(-3.0, 3.0, n))[:, None]
    kernel = dg.KernelSpec.create(dg.MATERN52, lengthscale, variance)
    K = eval_matrix(kernel, X)
    L = np.linalg.cholesky(K + 1e-12 * np.eye(n))
    y = L @ rng.standard_normal(n) + np.sqrt(noise) * rng.standard_normal(n)
    return X, y, kernel, noise


def random_spd(k, rng, scale=1.0):
    A = rng.standard_normal((k, k))
    return scale * (A @ A.T + k * np.eye(k))


def converge_tied(state, X, y, lik, kernel, r=0.7, tol=1e-13, max_iter=5000):
    batch = np.arange(np.atleast_1d(y).shape[0])
    for _ in range(max_iter):
        new = dg.tsvgp_estep_step(state, X, y, lik, kernel, batch, r)
        delta = max(
            float(np.max(np.abs(new.tied.lambda_bar1 - state.tied.lambda_bar1))),
            float(np.max(np.abs(new.tied.Lambda_bar2 - state.tied.Lambda_bar2))),
        )
        state = new
        if delta < tol:
            break
    return state


@pytest.fixture(scope="session")
def toy_task():
    """Noisy-sinc binary task with a grid of 10 inducing points."""
    data = dg.gen_sinc_classification(100, 0)
    kernel = dg.KernelSpec.create(dg.MATERN52, 0.5, 1.0)
    lik = dg.BernoulliProbitLikelihood()
    Z = dg.choose_inducing(data.X, 10, 0, "grid")
    return data, kernel, lik, Z


@pytest.fixture(scope="session")
def toy_converged_tied(toy_task):
    data, kernel, lik, Z = toy_task
    state = dg.SparseState(dg.InducingInputs(Z), dg.zero_tied(Z.shape[0]))
    return converge_tied(state, data.X, data.y, lik, kernel)


@pytest.fixture(scope="session")
def toy_converged_sites(toy_task):
    data, kernel, lik, _ = toy_task
    return dg.tvgp_estep(dg.zero_sites(data.n), data.X, data.y, lik, kernel,
                         r=0.7, iters=5000, tol=1e-13)
