import numpy as np
import pytest

import dualgp as dg
from dualgp.gaussmath import moments_to_natural
from dualgp.kernels import eval_matrix
from dualgp.likelihoods import LOG_2PI, site_natgrad
from dualgp.tvgp import PseudoTargets, SiteParams

from conftest import make_regression


def conjugate_sites(y, noise):
    y = np.asarray(y, dtype=float)
    return SiteParams(y / noise, np.full(y.shape[0], -0.5 / noise))


class TestPosterior:
    def test_zero_sites_recover_prior(self):
        X, y, kernel, _ = make_regression(n=12)
        post = dg.tvgp_posterior(dg.zero_sites(12), kernel, X)
        K = eval_matrix(kernel, X)
        assert np.max(np.abs(post.mean)) < 1e-6
        assert np.max(np.abs(post.cov - K)) < 1e-6

    def test_conjugate_sites_match_gp_regression(self):
        X, y, kernel, noise = make_regression(n=20)
        post = dg.tvgp_posterior(conjugate_sites(y, noise), kernel, X)
        K = eval_matrix(kernel, X)
        Ky = K + noise * np.eye(20)
        mean = K @ np.linalg.solve(Ky, y)
        cov = K - K @ np.linalg.solve(Ky, K)
        assert np.max(np.abs(post.mean - mean)) < 1e-8
        assert np.max(np.abs(post.cov - cov)) < 1e-8

    def test_scalar_site_algebra(self):
        kappa, beta, lam1 = 1.7, 2.3, 0.9
        kernel = dg.KernelSpec.create(dg.MATERN52, 1.0, kappa)
        sites = SiteParams(np.array([lam1]), np.array([-0.5 * beta]))
        post = dg.tvgp_posterior(sites, kernel, np.array([[0.0]]))
        S = 1.0 / (1.0 / kappa + beta)
        assert np.isclose(post.cov[0, 0], S)
        assert np.isclose(post.mean[0], S * lam1)

    def test_additive_natural_structure(self):
        # posterior natural parameters = prior natural parameters + diag sites
        X, y, kernel, _ = make_regression(n=8)
        sites = SiteParams(np.linspace(-1, 1, 8), -np.linspace(0.5, 2.0, 8))
        post = dg.tvgp_posterior(sites, kernel, X)
        nat = moments_to_natural(post)
        K = eval_matrix(kernel, X)
        prior_prec = np.linalg.inv(K)
        assert np.max(np.abs(nat.eta1 - sites.lambda1)) < 1e-8
        assert np.max(np.abs(nat.eta2 - (-0.5 * prior_prec + np.diag(sites.lambda2)))) < 1e-8


class TestEstep:
    def test_one_full_step_conjugate(self):
        X, y, kernel, noise = make_regression(n=15)
        lik = dg.GaussianLikelihood.create(noise)
        sites = dg.tvgp_estep(dg.zero_sites(15), X, y, lik, kernel, r=1.0, iters=1)
        assert np.max(np.abs(sites.lambda1 - y / noise)) < 1e-10
        assert np.max(np.abs(sites.lambda2 + 0.5 / noise)) < 1e-10

    def test_zero_rate_is_identity(self):
        X, y, kernel, noise = make_regression(n=10)
        lik = dg.GaussianLikelihood.create(noise)
        start = SiteParams(y.copy(), np.full(10, -1.0))
        out = dg.tvgp_estep(start, X, y, lik, kernel, r=0.0, iters=3)
        assert np.array_equal(out.lambda1, start.lambda1)
        assert np.array_equal(out.lambda2, start.lambda2)

    def test_fixed_point_on_toy_task(self, toy_task, toy_converged_sites):
        data, kernel, lik, _ = toy_task
        sites = toy_converged_sites
        m, v = dg.tvgp_marginals(sites, kernel, data.X)
        _, alpha, beta = lik.expectations(data.y, m, v)
        g = site_natgrad(alpha, beta, m)
        residual = max(
            float(np.max(np.abs(sites.lambda1 - g.g1))),
            float(np.max(np.abs(sites.lambda2 + 0.5 * g.g2))),
        )
        assert residual < 1e-6

    def test_monotone_elbo_at_small_rate(self, toy_task):
        data, kernel, lik, _ = toy_task
        sites = dg.zero_sites(data.n)
        prev = dg.tvgp_elbo(sites, data.X, data.y, lik, kernel)
        for _ in range(40):
            sites = dg.tvgp_estep(sites, data.X, data.y, lik, kernel, r=0.5, iters=1)
            cur = dg.tvgp_elbo(sites, data.X, data.y, lik, kernel)
            assert cur >= prev - 1e-9
            prev = cur


class TestLogZ:
    def test_conjugate_grid_matches_exact(self):
        X, y, kernel, noise = make_regression(n=20)
        sites = conjugate_sites(y, noise)
        for g in np.linspace(0.3, 3.0, 20):
            k2 = kernel.with_logs(log_variance=float(np.log(g)))
            assert abs(dg.tvgp_logZ(sites, k2, X)
                       - dg.exact_gp_logml(X, y, k2, noise)) < 1e-8

    def test_scalar_value(self):
        # beta=1, y_tilde=0, kappa=1 -> -(1/2)ln(2 pi) - (1/2)ln 2
        kernel = dg.KernelSpec.create(dg.MATERN52, 1.0, 1.0)
        sites = SiteParams(np.array([0.0]), np.array([-0.5]))
        val = dg.tvgp_logZ(sites, kernel, np.array([[0.0]]))
        assert np.isclose(val, -0.5 * LOG_2PI - 0.5 * np.log(2.0))

    def test_against_monte_carlo_integral(self):
        # logZ = log integral of prior times the normalized pseudo-likelihoods
        rng = np.random.default_rng(4)
        kernel = dg.KernelSpec.create(dg.SQUARED_EXPONENTIAL, 1.0, 1.0)
        X = np.array([[0.0], [0.7]])
        sites = SiteParams(np.array([0.8, -0.5]), np.array([-0.6, -0.9]))
        pt = PseudoTargets.from_sites(sites)
        K = eval_matrix(kernel, X)
        L = np.linalg.cholesky(K + 1e-12 * np.eye(2))
        n = 2_000_000
        f = (L @ rng.standard_normal((2, n))).T
        log_site = np.sum(
            -0.5 * (LOG_2PI - np.log(pt.beta)) - 0.5 * pt.beta * (pt.y_tilde - f) ** 2,
            axis=1,
        )
        w = np.exp(log_site)
        est = np.log(w.mean())
        se_log = w.std(ddof=1) / (w.mean() * np.sqrt(n))
        assert abs(dg.tvgp_logZ(sites, kernel, X) - est) < 3 * se_log

    def test_rejects_nonnegative_lambda2(self):
        kernel = dg.KernelSpec.create(dg.MATERN52, 1.0, 1.0)
        with pytest.raises(ValueError):
            SiteParams(np.array([0.0]), np.array([0.1]))


class TestMstepObjective:
    def test_conjugate_correction_vanishes(self):
        X, y, kernel, noise = make_regression(n=15)
        lik = dg.GaussianLikelihood.create(noise)
        sites = conjugate_sites(y, noise)
        for g in (0.4, 1.0, 2.7):
            k2 = kernel.with_logs(log_variance=float(np.log(g)))
            c = (dg.tvgp_mstep_objective(sites, X, y, lik, k2)
                 - dg.tvgp_logZ(sites, k2, X))
            assert abs(c) < 1e-10

    def test_matches_elbo_and_gradient_at_fit_theta(self, toy_task, toy_converged_sites):
        data, kernel, lik, _ = toy_task
        sites = toy_converged_sites
        elbo = dg.tvgp_elbo(sites, data.X, data.y, lik, kernel)
        obj = dg.tvgp_mstep_objective(sites, data.X, data.y, lik, kernel)
        assert abs(obj - elbo) < 1e-6

        post = dg.tvgp_posterior(sites, kernel, data.X)
        h = 1e-5

        def standard(lv):
            k2 = kernel.with_logs(log_variance=lv)
            m, v = post.mean, np.diag(post.cov)
            ell, _, _ = lik.expectations(data.y, m, v)
            K = eval_matrix(k2, data.X)
            _, applied = dg.jittered_cholesky(K)
            prior = dg.GaussianMoments(np.zeros(data.n), K + applied * np.eye(data.n))
            return float(np.sum(ell)) - dg.kl_gaussian(post, prior)

        def proposed(lv):
            return dg.tvgp_mstep_objective(sites, data.X, data.y, lik,
                                           kernel.with_logs(log_variance=lv))

        gp = (proposed(h) - proposed(-h)) / (2 * h)
        gs = (standard(h) - standard(-h)) / (2 * h)
        assert abs(gp - gs) / max(1e-12, abs(gs)) < 1e-4

    def test_finite_on_theta_grid(self, toy_task, toy_converged_sites):
        data, kernel, lik, _ = toy_task
        for g in np.linspace(0.25, 4.0, 25):
            val = dg.tvgp_mstep_objective(
                toy_converged_sites, data.X, data.y, lik,
                kernel.with_logs(log_variance=float(np.log(g))))
            assert np.isfinite(val)


class TestExactOracle:
    def test_scalar_standard_normal(self):
        kernel = dg.KernelSpec.create(dg.MATERN52, 1.0, 0.5)
        val = dg.exact_gp_logml(np.array([[0.0]]), np.array([0.0]), kernel, 0.5)
        assert np.isclose(val, -0.5 * LOG_2PI)

    def test_two_point_hand_algebra(self):
        kernel = dg.KernelSpec.create(dg.SQUARED_EXPONENTIAL, 1.0, 1.0)
        X = np.array([[0.0], [1.0]])
        y = np.array([0.5, -0.3])
        s2 = 0.2
        k01 = np.exp(-0.5)
        Ky = np.array([[1.0 + s2, k01], [k01, 1.0 + s2]])
        det = Ky[0, 0] * Ky[1, 1] - k01**2
        Kinv = np.array([[Ky[1, 1], -k01], [-k01, Ky[0, 0]]]) / det
        expected = -0.5 * y @ Kinv @ y - 0.5 * np.log(det) - LOG_2PI
        assert np.isclose(dg.exact_gp_logml(X, y, kernel, s2), expected, atol=1e-12)

    def test_analytic_gradient_matches_fd(self):
        X, y, kernel, noise = make_regression(n=10)
        grad = dg.exact_gp_logml_grad(X, y, kernel, noise)
        h = 1e-6
        fd = []
        for i, bump in enumerate(("log_lengthscale", "log_variance", "log_noise")):
            if bump == "log_noise":
                up = dg.exact_gp_logml(X, y, kernel, noise * np.exp(h))
                dn = dg.exact_gp_logml(X, y, kernel, noise * np.exp(-h))
            else:
                up = dg.exact_gp_logml(X, y, kernel.with_logs(**{bump: getattr(kernel, bump) + h}), noise)
                dn = dg.exact_gp_logml(X, y, kernel.with_logs(**{bump: getattr(kernel, bump) - h}), noise)
            fd.append((up - dn) / (2 * h))
        fd = np.array(fd)
        assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-5

    def test_predictive_against_posterior_reconstruction(self):
        X, y, kernel, noise = make_regression(n=20)
        Xs = np.linspace(-2.5, 2.5, 20)[:, None]
        pm, pv = dg.gp_regression_predict(X, y, kernel, noise, Xs)
        sites = conjugate_sites(y, noise)
        from dualgp.trainer import _pseudo_predict
        m2, v2 = _pseudo_predict(X, PseudoTargets.from_sites(sites), kernel, Xs)
        assert np.max(np.abs(pm - m2)) < 1e-8
        assert np.max(np.abs(pv - v2)) < 1e-8
