"""One test per acceptance criterion; a PASS/FAIL line per criterion is
printed in the terminal summary."""
import math
import time

import numpy as np
import pytest

from conftest import batch_means_se
from oracles import flat_z_posterior, importance_z_posterior
from mixbps import fixtures
from mixbps.agents import panels_from_columns
from mixbps.baselines import MethodForecasts, score_table
from mixbps.cli import main
from mixbps.densities import AgentPanel, GaussianDensity
from mixbps.gibbs import GibbsConfig, run_gibbs
from mixbps.multi_agent import (
    SynthesisConfig,
    Tuning,
    expectation_latent,
    mc_posterior,
    prior_density,
    weight_of_residual,
    well_geometry,
)
from mixbps.single_agent import SingleAgentConfig, posterior_quadrature, posterior_update
from mixbps.single_agent import prior_density as single_prior
from mixbps.timeseries import FilterConfig, run_filter
from mixbps.vb import DirichletState, NIWState, digamma, fit_dirichlet, fit_niw, niw_n_equation


def test_criterion_1_closed_form_fidelity(record_property):
    rng = np.random.default_rng(1)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(100):
        cfg = SingleAgentConfig(
            q=rng.uniform(0.05, 0.95), base=GaussianDensity(rng.normal(), rng.uniform(0.5, 4)),
            mu=rng.normal(), sigma2=rng.uniform(0.2, 3), r=rng.uniform(0.2, 20), beta=rng.normal(scale=0.5),
        )
        h = GaussianDensity(rng.normal(scale=2), rng.uniform(0.05, 3))
        closed = posterior_update(cfg, h)
        quad = posterior_quadrature(cfg, h)
        worst = max(
            worst,
            abs(closed.weight - quad.weight),
            float(np.max(np.abs(closed.reweighted.pdf(quad.grid) - quad.reweighted))),
        )
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 5.0
    record_property("detail", f"max abs error {worst:.2e} (tol 1e-8), {elapsed:.2f} s (limit 5 s)")
    assert ok


def _grid_search(r1, r2, d, delta):
    # e >= 0 suffices by symmetry; beyond 4 sqrt(r1 delta) the weight only decays
    e = np.arange(0.0, 4 * math.sqrt(r1 * delta), 1e-5)
    w = np.exp(-e * e / (2 * r1 * delta)) - d * np.exp(-e * e / (2 * r2 * delta))
    i = int(np.argmax(w))
    return e[i], w[i]


def test_criterion_2_well_geometry(record_property):
    rng = np.random.default_rng(2)
    worst_off = worst_max = 0.0
    for _ in range(200):
        r1 = rng.uniform(2, 20)
        d = rng.uniform(0.2, 1.0)
        r2 = d * r1 * rng.uniform(0.02, 0.9)
        delta = rng.uniform(0.25, 2.0)
        g = well_geometry(r1, r2, d, delta)
        off, peak = _grid_search(r1, r2, d, delta)
        assert g.is_bimodal
        worst_off = max(worst_off, abs(g.offset - off))
        worst_max = max(worst_max, abs(g.max_value - peak))
    # weight w at n conditional sd means r = -n^2 / (2 log w)
    r1_exact = -(5.0**2) / (2 * math.log(0.5))
    r3_exact = -(0.5**2) / (2 * math.log(0.5))
    half = weight_of_residual(5.0, 1.0, 18.0337, 1e-9, 0.0)
    t = Tuning.from_r3(18.0337, 0.180337, d=0.5)
    well_factor = 1 - 0.5 * math.exp(-0.25 / (2 * 0.180337))
    full = weight_of_residual(0.5, 1.0, t.r1, t.r2, t.d) / math.exp(-0.25 / (2 * t.r1))
    stated = (
        round(r1_exact, 4) == 18.0337
        and round(r3_exact, 6) == 0.180337
        and abs(half - 0.5) < 1e-6
        and abs(well_factor - 0.75) < 1e-6
        and abs(full - 0.75) < 1e-6
        and weight_of_residual(0.0, 1.0, t.r1, t.r2, t.d) == pytest.approx(0.5, abs=1e-15)
    )
    ok = worst_off < 1e-4 and worst_max < 1e-4 and stated
    record_property(
        "detail",
        f"argmax err {worst_off:.1e}, max err {worst_max:.1e} (tol 1e-4); "
        f"r1 = {r1_exact:.6f}, r3 = {r3_exact:.8f}, weight at 5 sd {half:.7f}, well factor at 0.5 sd {well_factor:.7f}",
    )
    assert ok


def test_criterion_3_jeffrey_coherence(record_property):
    rng = np.random.default_rng(3)
    quad_worst = 0.0
    for _ in range(50):
        cfg = SingleAgentConfig(
            q=rng.uniform(0.05, 0.95), base=GaussianDensity(rng.normal(), rng.uniform(0.5, 4)),
            mu=rng.normal(), sigma2=rng.uniform(0.2, 3), r=rng.uniform(0.2, 20),
        )
        post = posterior_quadrature(cfg, cfg.expectation)
        prior, _ = single_prior(cfg)
        quad_worst = max(quad_worst, float(np.max(np.abs(post.density - prior.pdf(post.grid)))))
    mc_fail = 0
    z_max = 0.0
    for k in range(50):
        J = int(rng.integers(2, 5))
        A = rng.normal(size=(J, J))
        S = A @ A.T / J + 0.3 * np.eye(J)
        d = rng.uniform(0, 1)
        r1 = rng.uniform(2, 40)
        r2 = r1 * rng.uniform(0.005, 0.2)
        peak = well_geometry(r1, r2, d).max_value
        q = rng.dirichlet(np.ones(J + 1))[1:] * min(1.0, 1.0 / peak) * 0.999
        base = GaussianDensity(rng.normal(), rng.uniform(0.5, 3))
        cfg = SynthesisConfig(q, rng.normal(size=J), S, base, r1=r1, r2=r2, d=d, beta=rng.normal(scale=0.3, size=J))
        lo = min(base.mean - 8 * math.sqrt(base.var), float(np.min(cfg.mu - cfg.beta - 8 * np.sqrt(np.diag(S)))))
        hi = max(base.mean + 8 * math.sqrt(base.var), float(np.max(cfg.mu - cfg.beta + 8 * np.sqrt(np.diag(S)))))
        grid = np.linspace(lo, hi, 401)
        post = mc_posterior(cfg, expectation_latent(cfg), n_draws=10_000, seed=k, grid=grid)
        dev = np.abs(post.density - prior_density(cfg, grid))
        mc_fail += int(dev.max() > 3 * post.density_se.max())
        z_max = max(z_max, float(np.max(dev / np.maximum(post.density_se, 1e-300))))
    ok = quad_worst <= 1e-6 and mc_fail == 0
    record_property(
        "detail",
        f"quadrature sup-norm {quad_worst:.1e} (tol 1e-6); MC sup deviation beyond 3 sup-SE in "
        f"{mc_fail}/50 configs (largest pointwise z {z_max:.2f})",
    )
    assert ok


def test_criterion_4_linear_pool(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        J = int(rng.integers(1, 6))
        q = rng.dirichlet(np.ones(J))
        hs = tuple(GaussianDensity(rng.normal(), rng.uniform(0.1, 3)) for _ in range(J))
        cfg = SynthesisConfig(q, np.zeros(J), np.eye(J), GaussianDensity(0, 1), flat=True)
        post = mc_posterior(cfg, AgentPanel(GaussianDensity(0, 1), hs), seed=0)
        ref = sum(qj * h.pdf(post.grid) for qj, h in zip(q, hs))
        worst = max(worst, float(np.max(np.abs(post.density - ref))))
    record_property("detail", f"max pointwise error {worst:.1e} (tol 1e-12)")
    assert worst <= 1e-12


def test_criterion_5_gibbs_correctness(record_property):
    base = GaussianDensity(0.0, 1.0)
    means, variances = [0.6, -0.3], [0.8, 1.2]
    panel = AgentPanel(base, tuple(GaussianDensity(m, v) for m, v in zip(means, variances)))
    niw = NIWState([0.1, -0.1], 1.0, 15.0, [[0.5, 0.2], [0.2, 0.5]])
    dirichlet = DirichletState([1.0, 1.0, 1.0])
    y = 0.4
    ex6 = Tuning.from_r3(18.0337, 0.180337, d=0.5)

    start = time.perf_counter()
    flat = run_gibbs(panel, y, 0.0, niw, dirichlet, Tuning(flat=True), GibbsConfig(n_iter=100_500, burn_in=500, seed=1))
    weighted = run_gibbs(panel, y, 0.0, niw, dirichlet, ex6, GibbsConfig(n_iter=100_500, burn_in=500, seed=2))
    elapsed = time.perf_counter() - start

    exact = flat_z_posterior(y, means, variances, base, niw.b, niw.c, niw.n, niw.S, dirichlet.u)
    se_flat = batch_means_se(np.eye(3)[flat.z])
    flat_ok = bool(np.all(np.abs(flat.z_frequencies() - exact) <= 3 * se_flat))

    draws = niw.sample(20_000, seed=3)[:2]
    oracle, se_oracle = importance_z_posterior(
        y, 0.0, means, variances, base.pdf(y), draws, dirichlet.u, ex6.r1, ex6.r2, ex6.d, seed=4
    )
    se_w = batch_means_se(np.eye(3)[weighted.z])
    se_tot = np.sqrt(se_w**2 + se_oracle**2)
    weighted_ok = bool(np.all(np.abs(weighted.z_frequencies() - oracle) <= 3 * se_tot))

    ok = flat_ok and weighted_ok and elapsed < 120
    fmt = lambda a: "[" + ", ".join(f"{v:.4f}" for v in a) + "]"
    record_property(
        "detail",
        f"flat {fmt(flat.z_frequencies())} vs {fmt(exact)} (3 SE {fmt(3 * se_flat)}); "
        f"weighted {fmt(weighted.z_frequencies())} vs {fmt(oracle)} (3 SE {fmt(3 * se_tot)}); "
        f"Gibbs time {elapsed:.0f} s (limit 120 s)",
    )
    assert ok


def test_criterion_6_vb_recovery(record_property):
    start = time.perf_counter()
    S = np.array([[1.0, 0.3, 0.1], [0.3, 0.8, 0.2], [0.1, 0.2, 1.2]])
    truth = NIWState(np.array([0.5, -0.2, 0.1]), 1.0, 15.0, S)
    beta, sigma, _ = truth.sample(100_000, seed=6)
    fit = fit_niw(beta, sigma)
    u = np.array([2.0, 5.0, 1.0])
    q = DirichletState(u).sample(100_000, seed=7)
    dfit = fit_dirichlet(q)
    elapsed = time.perf_counter() - start

    se_b = beta.std(axis=0) / math.sqrt(len(beta))
    b_ok = bool(np.all(np.abs(fit.b - truth.b) < 3 * se_b))
    c_err = abs(fit.c - 1.0)
    n_err = abs(fit.n - 15.0) / 15.0
    s_err = float(np.max(np.abs(fit.S - S) / np.abs(S)))
    u_err = float(np.max(np.abs(dfit.u - u) / u))
    resid_d = float(np.max(np.abs(digamma(dfit.u) - digamma(dfit.u.sum()) - np.log(q).mean(axis=0))))
    logdet = np.linalg.slogdet(sigma)[1]
    spread = logdet.mean() + np.linalg.slogdet(np.linalg.inv(sigma).mean(axis=0))[1]
    resid_n = abs(niw_n_equation(fit.n, 3, spread))
    ok = b_ok and c_err < 0.05 and n_err < 0.10 and s_err < 0.05 and u_err < 0.05 and max(resid_d, resid_n) < 1e-8 and elapsed < 30
    record_property(
        "detail",
        f"b within 3 SE: {b_ok}; c err {c_err:.3f}, n rel err {n_err:.3f}, S max rel err {s_err:.3f}, "
        f"u max rel err {u_err:.3f}; residuals {max(resid_d, resid_n):.1e}; {elapsed:.1f} s",
    )
    assert ok


RUN_CFG = FilterConfig(gibbs=GibbsConfig(n_iter=1000, burn_in=200), seed=0)
_RUNS = {}


def filter_run(kind):
    if kind not in _RUNS:
        fx = fixtures.generate(kind, 0)
        panels = panels_from_columns(fx.means, fx.variances)
        _RUNS[kind] = (fx, run_filter(fx.values, panels, RUN_CFG))
    return _RUNS[kind]


def test_criterion_7_sequential_bias(record_property):
    fx, res = filter_run("biased_agents")
    recs = res.active()
    b1 = np.array([r.b[0] for r in recs[-20:]]).mean()
    spd = all(np.all(np.linalg.eigvalsh(r.niw.S) > 0) for r in recs)
    interior = all(np.all(r.q_mean > 0) and np.all(r.q_mean < 1) for r in recs)
    failed = sum(r.failed for r in recs)
    ok = 0.2 <= b1 <= 0.8 and spd and interior
    record_property(
        "detail",
        f"mean b1 over last 20 steps {b1:.3f} (band [0.2, 0.8], planted +0.5); S SPD: {spd}; "
        f"Dirichlet means interior: {interior}; failed steps {failed}/{len(recs)}",
    )
    assert ok


def test_criterion_8_baseline_contrast(record_property):
    fx, res = filter_run("ar1")
    recs = res.active()
    bma_final = recs[-1].bma_weights
    bps_max = max(float(r.q_mean.max()) for r in recs)
    true_agent = fx.metadata["true_agent"]
    ok = bma_final.max() > 0.9 and bps_max < 0.9
    record_property(
        "detail",
        f"BMA final max weight {bma_final.max():.3f} on model {int(np.argmax(bma_final))} "
        f"(generator is model {true_agent}); largest BPS Dirichlet mean over all steps {bps_max:.3f}",
    )
    assert ok


def test_criterion_9_score_table(record_property):
    parts = []
    ok = True
    start = time.perf_counter()
    for kind in ("biased_agents", "ar1"):
        fx, res = filter_run(kind)
        recs = res.active()
        y = np.array([r.y for r in recs])
        methods = {
            m: MethodForecasts(np.array([r.scores[m].point for r in recs]), np.array([r.scores[m].log_score for r in recs]))
            for m in ("BPS", "BMA", "POOL")
        }
        rows = {r.method: r for r in score_table(y, methods)}
        best = min(rows["BMA"].rmse, rows["POOL"].rmse)
        ratio = rows["BPS"].rmse / best
        ok = ok and 0.9 <= ratio <= 1.1
        parts.append(f"{kind}: BPS/best RMSE {ratio:.3f} (BMA {rows['BMA'].rmse_ratio:.3f}, POOL {rows['POOL'].rmse_ratio:.3f} of BPS)")
    record_property("detail", "; ".join(parts))
    assert ok


def test_criterion_10_determinism(tmp_path, record_property):
    cfg = tmp_path / "fast.ini"
    cfg.write_text("[gibbs]\nn_iter = 200\nburn_in = 50\n[synthesis]\nn_param = 30\n")
    same = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["fixtures", "biased_agents", "--seed", "5", "--n", "30", "--out-dir", str(d / "fx")]) == 0
        assert main(["fit", "--config", str(cfg), "--data", str(d / "fx" / "biased_agents.csv"),
                     "--out-dir", str(d / "fit"), "--density-grids", "--seed", "9"]) == 0
        assert main(["synthesize", "--out-dir", str(d / "syn"), "--seed", "9"]) == 0
    files = sorted(p.relative_to(tmp_path / "run0") for p in (tmp_path / "run0").rglob("*") if p.is_file())
    for f in files:
        same.append((tmp_path / "run0" / f).read_bytes() == (tmp_path / "run1" / f).read_bytes())
    ok = len(files) == 8 and all(same)
    record_property("detail", f"{sum(same)}/{len(files)} output files byte-identical across two runs")
    assert ok
