import math

import numpy as np
import pytest
from scipy import integrate, stats

from mixbps.vb import (
    DirichletState,
    FitError,
    NIWState,
    digamma,
    fit_dirichlet,
    fit_niw,
    kl_objective_check,
    niw_n_equation,
    niw_prior,
    solve_niw_n,
    trigamma,
)

EULER = 0.5772156649015329


def test_digamma_values():
    assert digamma(1.0) == pytest.approx(-EULER, rel=1e-12)
    x = np.random.default_rng(0).uniform(0.1, 50, 20)
    np.testing.assert_allclose(digamma(x + 1), digamma(x) + 1 / x, rtol=1e-12)
    ref = -EULER - 2 * math.log(2) + sum(1 / (0.5 + k) for k in range(10))
    assert digamma(10.5) == pytest.approx(ref, rel=1e-12)
    assert trigamma(1.0) == pytest.approx(math.pi**2 / 6, rel=1e-12)
    with pytest.raises(ValueError):
        digamma(0.0)


TRUE = NIWState(np.array([0.5, -0.2, 0.1]), 1.0, 15.0, np.array([[1.0, 0.3, 0.1], [0.3, 0.8, 0.2], [0.1, 0.2, 1.2]]))


def test_niw_sampler_moments():
    beta, sigma, prec = TRUE.sample(100_000, seed=1)
    # E[Sigma^{-1}] = S^{-1} (n + J - 1) / n under the scale convention
    np.testing.assert_allclose(prec.mean(axis=0), np.linalg.inv(TRUE.S) * 17 / 15, rtol=0.02, atol=0.01)
    np.testing.assert_allclose(beta.mean(axis=0), TRUE.b, atol=0.02)
    np.testing.assert_allclose(np.einsum("nij,njk->nik", sigma[:10], prec[:10]), np.broadcast_to(np.eye(3), (10, 3, 3)), atol=1e-10)


def test_fit_niw_recovers_generator():
    beta, sigma, _ = TRUE.sample(100_000, seed=2)
    fit = fit_niw(beta, sigma)
    se = beta.std(axis=0) / math.sqrt(len(beta))
    assert np.all(np.abs(fit.b - TRUE.b) < 3 * se)
    assert fit.c == pytest.approx(1.0, rel=0.05)
    assert fit.n == pytest.approx(15.0, rel=0.10)
    np.testing.assert_allclose(fit.S, TRUE.S, rtol=0.05, atol=0.05 * np.abs(TRUE.S).max())


def test_fit_niw_invariants_and_order():
    beta, sigma, _ = TRUE.sample(2000, seed=3)
    fit = fit_niw(beta, sigma)
    assert fit.c > 0 and fit.n > 4
    np.linalg.cholesky(fit.S)
    perm = np.random.default_rng(0).permutation(len(beta))
    fit2 = fit_niw(beta[perm], sigma[perm])
    np.testing.assert_allclose(fit2.S, fit.S, rtol=1e-10)
    assert fit2.n == pytest.approx(fit.n, rel=1e-10)


def test_niw_degenerate_draws_rejected():
    beta = np.zeros((200, 2))
    sigma = np.broadcast_to(np.eye(2), (200, 2, 2)).copy()
    with pytest.raises(FitError):
        fit_niw(beta, sigma)
    with pytest.raises(FitError):
        fit_niw(beta[:10], sigma[:10])


def test_n_equation_one_dimension_quadrature():
    n, S = 9.0, 1.7
    ig = stats.invgamma(a=n / 2, scale=n * S / 2)
    e_log, _ = integrate.quad(lambda s: math.log(s) * ig.pdf(s), 0, np.inf, epsabs=1e-13)
    e_inv, _ = integrate.quad(lambda s: ig.pdf(s) / s, 0, np.inf, epsabs=1e-13)
    spread = e_log + math.log(e_inv)
    assert solve_niw_n(spread, 1) == pytest.approx(n, rel=1e-7)
    assert niw_n_equation(n, 1, spread) == pytest.approx(0.0, abs=1e-8)


def test_n_equation_residual_small():
    beta, sigma, _ = TRUE.sample(5000, seed=4)
    fit = fit_niw(beta, sigma)
    logdet = np.linalg.slogdet(sigma)[1]
    pbar = np.linalg.inv(sigma).mean(axis=0)
    spread = logdet.mean() + np.linalg.slogdet(pbar)[1]
    assert abs(niw_n_equation(fit.n, 3, spread)) < 1e-8


def test_fit_dirichlet_recovers():
    draws = DirichletState([2.0, 5.0]).sample(100_000, seed=5)
    fit = fit_dirichlet(draws)
    np.testing.assert_allclose(fit.u, [2.0, 5.0], rtol=0.05)
    # the analytic log moments are what the fit matches
    assert digamma(2.0) - digamma(7.0) == pytest.approx(np.log(draws[:, 0]).mean(), abs=0.01)
    resid = digamma(fit.u) - digamma(fit.u.sum()) - np.log(draws).mean(axis=0)
    assert np.max(np.abs(resid)) < 1e-8


def test_fit_dirichlet_symmetric():
    draws = DirichletState([1.0, 1.0]).sample(20_000, seed=6)
    fit = fit_dirichlet(draws)
    # sd of the fitted u under this sample size is about 0.015
    assert abs(fit.u[0] - fit.u[1]) < 3 * 0.015 * math.sqrt(2)


def test_fit_dirichlet_errors():
    with pytest.raises(FitError):
        fit_dirichlet(np.tile([0.3, 0.7], (200, 1)))
    bad = DirichletState([1.0, 1.0, 1.0]).sample(200, seed=0)
    bad[5] = [0.0, 0.5, 0.5]
    with pytest.raises(FitError, match=r"\[0\]"):
        fit_dirichlet(bad)


def test_dirichlet_fit_order_invariant():
    draws = DirichletState([1.5, 0.7, 3.0]).sample(3000, seed=7)
    a = fit_dirichlet(draws).u
    b = fit_dirichlet(draws[::-1]).u
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_kl_check_dirichlet():
    draws = DirichletState([2.0, 5.0, 1.0]).sample(20_000, seed=8)
    fit = fit_dirichlet(draws)
    chk = kl_objective_check(fit, draws, seed=0)
    assert chk.is_local_optimum and np.all(chk.objective > chk.perturbed)
    tie = kl_objective_check(fit, draws, size=0.0, seed=0)
    np.testing.assert_allclose(tie.perturbed, tie.objective, rtol=1e-14)


def test_kl_objective_approaches_negative_entropy():
    u = np.array([2.0, 5.0, 1.0])
    draws = DirichletState(u).sample(200_000, seed=9)
    chk = kl_objective_check(fit_dirichlet(draws), draws, seed=0)
    assert chk.objective == pytest.approx(-stats.dirichlet(u).entropy(), abs=0.01)


def test_kl_check_niw():
    beta, sigma, _ = TRUE.sample(5000, seed=10)
    fit = fit_niw(beta, sigma)
    assert kl_objective_check(fit, (beta, sigma), seed=1).is_local_optimum


def test_niw_logpdf_normalised_one_dimension():
    st = NIWState([0.2], 0.5, 6.0, [[1.3]])
    b = np.linspace(-6, 6, 241)
    s = np.geomspace(1e-3, 1e4, 4000)
    B, Sg = np.meshgrid(b, s, indexing="ij")
    dens = np.exp(st.logpdf(B.reshape(-1, 1), Sg.reshape(-1, 1, 1))).reshape(B.shape)
    assert np.trapezoid(np.trapezoid(dens, s, axis=1), b) == pytest.approx(1.0, abs=2e-3)


def test_state_validation():
    with pytest.raises(ValueError):
        NIWState([0.0, 0.0], 1.0, 2.5, np.eye(2))
    with pytest.raises(ValueError):
        NIWState([0.0], -1.0, 5.0, [[1.0]])
    with pytest.raises(ValueError):
        DirichletState([1.0, 0.0])
    p = niw_prior(3, 2.0, corr=0.5)
    assert p.S[0, 1] == pytest.approx(1.0) and p.S[0, 0] == pytest.approx(2.0)
