"""Sequential one-step-ahead synthesis: evolve, synthesize, observe, refit.

At each time t the decision maker holds an NIW belief over (beta_t, Sigma_t)
and a Dirichlet belief over q_t = (q_0, ..., q_J).  A step

1. discounts the previous posterior into the time-t prior (``evolve``),
2. forms the predictive density by averaging the conditional synthesis over
   parameter draws from the prior (``synthesize_step``),
3. runs the Gibbs sampler at the realised y_t and refits NIW and Dirichlet
   states to the retained draws (``observe_step``).

The expectation mean is mu_t = f_t0 + beta_t with f_t0 the base point forecast.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .baselines import BMAState, bma_density, bma_update, equal_pool
from .densities import AgentPanel, GaussianDensity, GriddedDensity, SeedLike
from .gibbs import GibbsConfig, RejectionStall, run_gibbs
from .multi_agent import Tuning
from .vb import DirichletState, FitError, NIWState, correlations, fit_dirichlet, fit_niw, niw_prior

log = logging.getLogger(__name__)

THREADS_ENV = "BPS_NUM_THREADS"
QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)
GRID_HALF_WIDTH = 8.0
U_FLOOR = 0.01


def _check_discount(name: str, v: float):
    if not 0.8 < v <= 1.0:
        raise ValueError(f"{name} must lie in (0.8, 1], got {v}")


@dataclass(frozen=True)
class FilterState:
    niw: NIWState
    dirichlet: DirichletState
    discount_sigma: float = 0.99
    discount_beta: float = 0.975
    discount_q: float = 0.99
    tuning: Tuning = Tuning.from_r3(18.0337, 0.180337, d=0.5)

    def __post_init__(self):
        _check_discount("discount_sigma", self.discount_sigma)
        _check_discount("discount_beta", self.discount_beta)
        _check_discount("discount_q", self.discount_q)
        if len(self.dirichlet.u) != self.niw.dim + 1:
            raise ValueError("the Dirichlet state must have J + 1 components")

    @property
    def n_agents(self) -> int:
        return self.niw.dim


def evolve(state: FilterState) -> FilterState:
    """Discount the time t-1 posterior into the time t prior."""
    niw = state.niw
    J = niw.dim
    n = max(state.discount_sigma * niw.n, J + 2.0)
    c = niw.c / state.discount_beta
    u = np.maximum(state.discount_q * state.dirichlet.u, U_FLOOR)
    return replace(state, niw=NIWState(niw.b, c, n, niw.S), dirichlet=DirichletState(u))


def initial_state(
    J: int,
    base_variance: float,
    n0: float = 15.0,
    c0: float = 1.0,
    prior_corr: float = 0.5,
    u0: float = 1.0,
    discount_sigma: float = 0.99,
    discount_beta: float = 0.975,
    discount_q: float = 0.99,
    tuning: Tuning = Tuning.from_r3(18.0337, 0.180337, d=0.5),
) -> FilterState:
    """Exchangeable prior: S_0 has diagonal ``base_variance`` and common correlation."""
    return FilterState(
        niw_prior(J, base_variance, n0=n0, c0=c0, corr=prior_corr),
        DirichletState(np.full(J + 1, float(u0))),
        discount_sigma,
        discount_beta,
        discount_q,
        tuning,
    )


def _num_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _kernel(mean_e, var_e, r: float, delta):
    rd = r * delta
    return np.sqrt(rd / (rd + var_e)) * np.exp(-(mean_e**2) / (2.0 * (rd + var_e)))


class SynthesizedDensity:
    """Predictive density averaged over K parameter draws.

    For draw k the conditional density is
    a0_k pi_0(y) + sum_j q_kj h_j(y + beta_kj) A_kj(y), with A_kj(y) the
    expectation of alpha_j given x_j = y + beta_kj.  For Gaussian agents A_kj
    and a0_k are exact; otherwise they average over shared x draws.
    """

    def __init__(self, panel: AgentPanel, f0: float, tuning: Tuning, beta, prec, q,
                 x_draws: Optional[np.ndarray] = None, grid: Optional[np.ndarray] = None,
                 grid_points: int = 801, threads: int = 1):
        self.panel = panel
        self.f0 = float(f0)
        self.tuning = tuning
        self.beta = np.asarray(beta, dtype=float)
        self.prec = np.asarray(prec, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.threads = threads
        K, J = self.beta.shape
        if self.prec.shape != (K, J, J) or self.q.shape != (K, J + 1) or panel.n_agents != J:
            raise ValueError("parameter draws and panel dimensions disagree")
        self.gaussian = all(isinstance(a, GaussianDensity) for a in panel.agents)
        if not self.gaussian and not tuning.flat and x_draws is None:
            raise ValueError("non-Gaussian agents need x draws")
        self.x_draws = x_draws
        self._prepare()
        self.grid = self._default_grid(grid_points) if grid is None else np.asarray(grid, dtype=float)
        per_draw = self.conditional(self.grid)
        self.values = per_draw.mean(axis=0)
        self.values_se = per_draw.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.zeros_like(self.grid)
        self.gridded = GriddedDensity(self.grid, np.maximum(self.values, 0.0))

    @property
    def n_draws(self) -> int:
        return len(self.beta)

    def _prepare(self):
        J = self.panel.n_agents
        pdiag = np.diagonal(self.prec, axis1=1, axis2=2)  # (K, J)
        self.deltas = 1.0 / pdiag
        self.W = self.prec / pdiag[:, :, None]  # row j: P_j. / P_jj
        mu = self.f0 + self.beta
        if self.tuning.flat:
            self.a0 = self.q[:, 0].copy()
            return
        t = self.tuning
        if self.gaussian:
            m = self.panel.agent_means()
            s = self.panel.agent_vars()
            Dm = m - mu  # (K, J)
            mean_full = np.einsum("kji,ki->kj", self.W, Dm)
            var_full = np.einsum("kji,i->kj", self.W**2, s)
            self.c_mean = mean_full - Dm
            self.c_var = np.maximum(var_full - s, 0.0)
            ea = _kernel(mean_full, var_full, t.r1, self.deltas)
            if t.d:
                ea = ea - t.d * _kernel(mean_full, var_full, t.r2, self.deltas)
        else:
            X = self.x_draws
            D = X[None, :, :] - mu[:, None, :]  # (K, N, J)
            full = np.einsum("kni,kji->knj", D, self.W)
            self.c_draws = full - D  # (K, N, J)
            e2 = full**2 * pdiag[:, None, :]
            a = np.exp(-e2 / (2 * t.r1))
            if t.d:
                a -= t.d * np.exp(-e2 / (2 * t.r2))
            ea = a.mean(axis=1)
        self.a0 = 1.0 - np.einsum("kj,kj->k", self.q[:, 1:], ea)
        if J and np.any(self.a0 < -1e-12):
            raise AssertionError("base weight became negative")

    def agent_weights(self, y, ks: slice = slice(None)) -> np.ndarray:
        """A_kj(y) for the draws in ``ks``, shape (k, J, len(y))."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        beta = self.beta[ks]
        K, J = beta.shape
        if self.tuning.flat:
            return np.ones((K, J, len(y)))
        t = self.tuning
        u = y - self.f0
        deltas = self.deltas[ks]
        if self.gaussian:
            mean_e = u[None, None, :] + self.c_mean[ks][:, :, None]
            var_e = self.c_var[ks][:, :, None]
            dl = deltas[:, :, None]
            out = _kernel(mean_e, var_e, t.r1, dl)
            if t.d:
                out -= t.d * _kernel(mean_e, var_e, t.r2, dl)
            return out
        pd = 1.0 / deltas
        c_draws = self.c_draws[ks]
        out = np.empty((K, J, len(y)))
        for k in range(K):
            e = u[None, None, :] + c_draws[k][:, :, None]  # (N, J, G)
            e2 = e * e * pd[k][None, :, None]
            a = np.exp(-e2 / (2 * t.r1))
            if t.d:
                a -= t.d * np.exp(-e2 / (2 * t.r2))
            out[k] = a.mean(axis=0)
        return out

    def _conditional_block(self, y: np.ndarray, ks: slice) -> np.ndarray:
        A = self.agent_weights(y, ks)
        v = y[None, None, :] + self.beta[ks][:, :, None]  # (k, J, G)
        h = np.stack([a.pdf(v[:, j, :]) for j, a in enumerate(self.panel.agents)], axis=1)
        agent = np.einsum("kj,kjg->kg", self.q[ks, 1:], h * A)
        return self.a0[ks, None] * self.panel.base.pdf(y)[None, :] + agent

    def conditional(self, y) -> np.ndarray:
        """Per-draw conditional densities, shape (K, len(y))."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        K = self.n_draws
        if self.threads <= 1 or K < 2 * self.threads:
            return self._conditional_block(y, slice(0, K))
        bounds = np.linspace(0, K, self.threads + 1).astype(int)
        blocks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(self.threads) as ex:
            parts = list(ex.map(lambda s: self._conditional_block(y, s), blocks))
        return np.vstack(parts)

    def pdf(self, y):
        out = self.conditional(y).mean(axis=0)
        return float(out[0]) if np.ndim(y) == 0 else out

    def pdf_se(self, y):
        c = self.conditional(y)
        out = c.std(axis=0, ddof=1) / math.sqrt(len(c)) if len(c) > 1 else np.zeros(c.shape[1])
        return float(out[0]) if np.ndim(y) == 0 else out

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    @property
    def mean(self) -> float:
        return self.gridded.mean

    @property
    def var(self) -> float:
        return self.gridded.var

    def quantiles(self, levels=QUANTILE_LEVELS) -> np.ndarray:
        return np.asarray(self.gridded.quantile(np.asarray(levels, dtype=float)))

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def _default_grid(self, n: int) -> np.ndarray:
        base = self.panel.base
        lo = base.mean - GRID_HALF_WIDTH * math.sqrt(base.var)
        hi = base.mean + GRID_HALF_WIDTH * math.sqrt(base.var)
        for j, a in enumerate(self.panel.agents):
            sd = math.sqrt(a.var) if np.isfinite(a.var) else math.sqrt(a.scale) * 10
            shifted = a.mean - self.beta[:, j]
            lo = min(lo, float(shifted.min()) - GRID_HALF_WIDTH * sd)
            hi = max(hi, float(shifted.max()) + GRID_HALF_WIDTH * sd)
        return np.linspace(lo, hi, n)


def synthesize_step(
    state: FilterState,
    panel: AgentPanel,
    f0: float,
    n_param: int = 200,
    n_x: int = 500,
    seed: SeedLike = None,
    grid: Optional[np.ndarray] = None,
    grid_points: int = 801,
) -> SynthesizedDensity:
    """Predictive density with (beta, Sigma, q) marginalised over the current prior."""
    if panel.n_agents != state.n_agents:
        raise ValueError(f"panel has {panel.n_agents} agents, state has {state.n_agents}")
    if n_param < 1 or n_x < 1:
        raise ValueError("n_param and n_x must be >= 1")
    rng = np.random.default_rng(seed)
    beta, _, prec = state.niw.sample(n_param, rng)
    q = state.dirichlet.sample(n_param, rng)
    x = None
    if not all(isinstance(a, GaussianDensity) for a in panel.agents):
        x = np.column_stack([a.sample(n_x, rng) for a in panel.agents])
    return SynthesizedDensity(panel, f0, state.tuning, beta, prec, q, x, grid, grid_points, _num_threads())


@dataclass(frozen=True)
class ForecastSummary:
    mean: float
    var: float
    quantiles: tuple
    levels: tuple = QUANTILE_LEVELS


@dataclass(frozen=True)
class MethodScore:
    point: float
    log_score: float


@dataclass
class StepRecord:
    t: int
    y: float
    status: str
    forecast: Optional[ForecastSummary] = None
    agent_forecasts: Optional[np.ndarray] = None  # (J + 1, 2): base first, (mean, var)
    niw: Optional[NIWState] = None
    dirichlet: Optional[DirichletState] = None
    correlations: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    q_mean: Optional[np.ndarray] = None
    scores: dict = field(default_factory=dict)
    bma_weights: Optional[np.ndarray] = None
    acceptance: dict = field(default_factory=dict)
    message: str = ""
    grid: Optional[np.ndarray] = None
    density: Optional[np.ndarray] = None

    @property
    def failed(self) -> bool:
        return self.status == "failed"


def summarize(fc: SynthesizedDensity) -> ForecastSummary:
    return ForecastSummary(fc.mean, fc.var, tuple(float(v) for v in fc.quantiles()))


def observe_step(
    state: FilterState,
    panel: AgentPanel,
    f0: float,
    y: float,
    gibbs_cfg: GibbsConfig = GibbsConfig(),
    t: int = 0,
):
    """Gibbs at y, then KL refits.  Returns (state', StepRecord).

    A sampler or refit failure carries ``state`` forward unchanged and marks
    the record as failed.
    """
    if not np.isfinite(y):
        raise ValueError(f"y must be finite, got {y}")
    agent_fc = np.array([[d.mean, d.var] for d in panel.all_densities()])
    try:
        draws = run_gibbs(panel, y, f0, state.niw, state.dirichlet, state.tuning, gibbs_cfg)
        niw = fit_niw(draws.beta, draws.Sigma)
        dirichlet = fit_dirichlet(draws.q)
    except (RejectionStall, FitError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("step %d failed: %s", t, exc)
        rec = StepRecord(
            t, float(y), "failed", agent_forecasts=agent_fc, niw=state.niw, dirichlet=state.dirichlet,
            correlations=state.niw.correlations, b=state.niw.b.copy(), q_mean=state.dirichlet.mean.copy(),
            message=str(exc),
        )
        return state, rec
    new = replace(state, niw=niw, dirichlet=dirichlet)
    rec = StepRecord(
        t, float(y), "ok", agent_forecasts=agent_fc, niw=niw, dirichlet=dirichlet,
        correlations=niw.correlations, b=niw.b.copy(), q_mean=dirichlet.mean.copy(),
        acceptance=draws.acceptance,
    )
    return new, rec


@dataclass(frozen=True)
class FilterConfig:
    tuning: Tuning = Tuning.from_r3(18.0337, 0.180337, d=0.5)
    n0: float = 15.0
    c0: float = 1.0
    prior_corr: float = 0.5
    u0: float = 1.0
    discount_sigma: float = 0.99
    discount_beta: float = 0.975
    discount_q: float = 0.99
    gibbs: GibbsConfig = GibbsConfig()
    n_param: int = 200
    n_x: int = 500
    grid_points: int = 801
    keep_grids: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("discount_sigma", "discount_beta", "discount_q"):
            _check_discount(name, getattr(self, name))
        if not -1.0 < self.prior_corr < 1.0:
            raise ValueError("prior_corr must lie in (-1, 1)")


@dataclass
class FilterResult:
    records: list
    final_state: Optional[FilterState]

    def active(self) -> list:
        return [r for r in self.records if r.status != "warmup"]


def run_filter(series, panels: Sequence, config: FilterConfig = FilterConfig()) -> FilterResult:
    """Full sequential loop over ``series``.

    ``panels[t]`` is None during warmup, otherwise ``(AgentPanel, f0)`` with
    the forecasts for y_t made before y_t was seen (see
    :func:`mixbps.agents.forecast_panels`).  Warmup steps produce records
    with status ``"warmup"``.
    """
    y = np.asarray(series, dtype=float)
    if len(y) < 10:
        raise ValueError("series must have at least 10 observations")
    if len(panels) != len(y):
        raise ValueError("need one panel entry per observation")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    root = np.random.SeedSequence(config.seed)
    step_seeds = root.spawn(len(y))
    state: Optional[FilterState] = None
    bma: Optional[BMAState] = None
    records = []
    for t, (yt, entry) in enumerate(zip(y, panels)):
        if entry is None:
            records.append(StepRecord(t, float(yt), "warmup"))
            continue
        panel, f0 = entry
        if state is None:
            J = panel.n_agents
            state = initial_state(
                J, panel.base.var, config.n0, config.c0, config.prior_corr, config.u0,
                config.discount_sigma, config.discount_beta, config.discount_q, config.tuning,
            )
            bma = BMAState.uniform(J + 1)
        else:
            state = evolve(state)
        s_synth, s_gibbs = step_seeds[t].spawn(2)
        fc = synthesize_step(state, panel, f0, config.n_param, config.n_x, s_synth, grid_points=config.grid_points)
        pool = equal_pool(panel)
        bma_mix = bma_density(bma, panel)
        scores = {
            "BPS": MethodScore(fc.mean, float(fc.logpdf(yt))),
            "BMA": MethodScore(bma_mix.mean, float(bma_mix.logpdf(yt))),
            "POOL": MethodScore(pool.mean, float(pool.logpdf(yt))),
        }
        gcfg = replace(config.gibbs, seed=s_gibbs)
        state, rec = observe_step(state, panel, f0, yt, gcfg, t)
        at_y = np.array([float(d.pdf(yt)) for d in panel.all_densities()])
        try:
            bma = bma_update(bma, at_y)
        except ValueError as exc:
            log.warning("step %d: BMA weights kept: %s", t, exc)
        rec.forecast = summarize(fc)
        rec.scores = scores
        rec.bma_weights = bma.weights.copy()
        if config.keep_grids:
            rec.grid = fc.grid
            rec.density = fc.values
        records.append(rec)
    return FilterResult(records, state)
