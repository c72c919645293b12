import numpy as np
import pytest

from mixbps.densities import AgentPanel, GaussianDensity, MixtureDensity
from mixbps.gibbs import GibbsConfig
from mixbps.multi_agent import SynthesisConfig, Tuning, mc_posterior
from mixbps.timeseries import (
    FilterConfig,
    FilterState,
    SynthesizedDensity,
    evolve,
    initial_state,
    observe_step,
    run_filter,
    synthesize_step,
)
from mixbps.vb import DirichletState, NIWState

BASE = GaussianDensity(0.0, 1.0)
PANEL = AgentPanel(BASE, (GaussianDensity(0.4, 0.8), GaussianDensity(-0.2, 1.5)))
EX6 = Tuning.from_r3(18.0337, 0.180337, d=0.5)


def test_evolve_identity():
    s = initial_state(2, 1.0, discount_sigma=1.0, discount_beta=1.0, discount_q=1.0)
    e = evolve(s)
    assert e.niw.n == s.niw.n and e.niw.c == s.niw.c
    np.testing.assert_array_equal(e.dirichlet.u, s.dirichlet.u)
    np.testing.assert_array_equal(e.niw.S, s.niw.S)


def test_evolve_discounts():
    s = initial_state(2, 1.0, n0=15.0, c0=1.0, u0=1.0)
    e = evolve(s)
    assert e.niw.n == pytest.approx(14.85)
    assert e.niw.c == pytest.approx(1 / 0.975)
    np.testing.assert_allclose(e.dirichlet.u, 0.99)
    for _ in range(1000):
        e = evolve(e)
    assert e.niw.n == 4.0
    np.testing.assert_allclose(e.dirichlet.u, 0.01)


def test_state_validation():
    with pytest.raises(ValueError):
        initial_state(2, 1.0, discount_q=0.5)
    with pytest.raises(ValueError):
        FilterState(initial_state(2, 1.0).niw, DirichletState([1.0, 1.0]))


def test_base_only_prior_gives_base_density():
    s = initial_state(2, 1.0)
    s = FilterState(s.niw, DirichletState([1e8, 1e-8, 1e-8]), tuning=EX6)
    fc = synthesize_step(s, PANEL, 0.0, n_param=50, seed=0)
    np.testing.assert_allclose(fc.values, BASE.pdf(fc.grid), atol=1e-7)


def test_single_flat_draw_is_linear_pool():
    q = np.array([[0.2, 0.3, 0.5]])
    beta = np.array([[0.1, -0.3]])
    fc = SynthesizedDensity(PANEL, 0.0, Tuning(flat=True), beta, np.eye(2)[None], q)
    ref = 0.2 * BASE.pdf(fc.grid) + 0.3 * PANEL.agents[0].pdf(fc.grid + 0.1) + 0.5 * PANEL.agents[1].pdf(fc.grid - 0.3)
    np.testing.assert_allclose(fc.values, ref, rtol=1e-12)


def test_conditional_matches_monte_carlo_synthesis():
    beta = np.array([0.2, -0.1])
    Sigma = np.array([[0.6, 0.3], [0.3, 0.9]])
    q = np.array([0.3, 0.4, 0.3])
    f0 = 0.1
    fc = SynthesizedDensity(PANEL, f0, EX6, beta[None], np.linalg.inv(Sigma)[None], q[None])
    cfg = SynthesisConfig(q[1:], f0 + beta, Sigma, BASE, r1=EX6.r1, r2=EX6.r2, d=EX6.d, beta=beta)
    mc = mc_posterior(cfg, PANEL, n_draws=20_000, seed=1, grid=fc.grid)
    assert np.all(np.abs(fc.values - mc.density) <= 4 * mc.density_se + 1e-9)
    assert abs(fc.a0[0] - mc.a0) < 4 * mc.a0_se + 1e-5


def test_non_gaussian_path_agrees_with_closed_form():
    wrapped = AgentPanel(BASE, tuple(MixtureDensity((1.0,), (a,)) for a in PANEL.agents))
    s = FilterState(initial_state(2, 1.0).niw, DirichletState([1.0, 1.0, 1.0]), tuning=EX6)
    a = synthesize_step(s, PANEL, 0.0, n_param=20, seed=2)
    b = synthesize_step(s, wrapped, 0.0, n_param=20, n_x=20_000, seed=2, grid=a.grid)
    assert np.max(np.abs(a.values - b.values)) < 0.01


def test_synthesis_reproducible_and_normalised(monkeypatch):
    s = initial_state(2, 1.0, tuning=EX6)
    a = synthesize_step(s, PANEL, 0.0, seed=3)
    b = synthesize_step(s, PANEL, 0.0, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.integral() == pytest.approx(1.0, abs=1e-4)
    qs = a.quantiles()
    assert np.all(np.diff(qs) > 0) and qs[0] < a.mean < qs[-1]
    monkeypatch.setenv("BPS_NUM_THREADS", "3")
    c = synthesize_step(s, PANEL, 0.0, seed=3)
    np.testing.assert_allclose(c.values, a.values, rtol=1e-12)
    monkeypatch.setenv("BPS_NUM_THREADS", "zero")
    with pytest.raises(ValueError):
        synthesize_step(s, PANEL, 0.0, seed=3)


def test_observe_without_agent_weight_keeps_prior():
    prior = NIWState([0.1, -0.2], 1.0, 15.0, [[1.0, 0.5], [0.5, 1.0]])
    s = FilterState(prior, DirichletState([1e6, 1e-3, 1e-3]), tuning=EX6)
    new, rec = observe_step(s, PANEL, 0.0, 0.3, GibbsConfig(n_iter=3000, burn_in=100, seed=4))
    assert rec.status == "ok"
    assert np.all(np.abs(new.niw.b - prior.b) < 0.1)
    assert new.niw.n == pytest.approx(15.0, rel=0.15)
    assert new.niw.c == pytest.approx(1.0, rel=0.1)
    np.testing.assert_allclose(new.niw.S, prior.S, atol=0.1)


def test_observe_failure_carries_state():
    s = initial_state(3, 1.0)
    new, rec = observe_step(s, PANEL, 0.0, 0.3, GibbsConfig(n_iter=20, burn_in=0, seed=0))
    assert rec.failed and new is s and rec.message


def make_stream(n=14, seed=0):
    rng = np.random.default_rng(seed)
    y = 1.0 + 0.3 * rng.standard_normal(n)
    panels = [None, None] + [
        (AgentPanel(GaussianDensity(1.0, 0.2), (GaussianDensity(1.1, 0.1), GaussianDensity(0.9, 0.15))), 1.0)
        for _ in range(n - 2)
    ]
    return y, panels


CFG = FilterConfig(gibbs=GibbsConfig(n_iter=250, burn_in=50), n_param=40, seed=5)


def test_filter_records_and_invariants():
    y, panels = make_stream()
    res = run_filter(y, panels, CFG)
    assert [r.status for r in res.records[:2]] == ["warmup", "warmup"]
    act = res.active()
    assert len(act) == 12
    for r in act:
        assert r.status == "ok"
        np.linalg.cholesky(r.niw.S)
        assert np.all(np.abs(r.correlations) <= 1)
        assert np.all(r.q_mean > 0) and r.q_mean.sum() == pytest.approx(1.0)
        assert np.all(np.diff(r.forecast.quantiles) > 0)
        assert r.forecast.quantiles[0] < r.forecast.mean < r.forecast.quantiles[-1]
        assert set(r.scores) == {"BPS", "BMA", "POOL"}
        assert r.agent_forecasts.shape == (3, 2)
        # forecasts concentrate around the constant level
        assert abs(r.forecast.mean - 1.0) < 0.3


def test_filter_deterministic():
    y, panels = make_stream()
    a = run_filter(y, panels, CFG)
    b = run_filter(y, panels, CFG)
    for ra, rb in zip(a.active(), b.active()):
        np.testing.assert_array_equal(ra.b, rb.b)
        np.testing.assert_array_equal(ra.q_mean, rb.q_mean)
        assert ra.forecast == rb.forecast


def test_filter_input_checks():
    y, panels = make_stream()
    with pytest.raises(ValueError):
        run_filter(y[:9], panels[:9], CFG)
    with pytest.raises(ValueError):
        run_filter(y, panels[:-1], CFG)
