"""Mixture synthesis for J agents with consensus/herding weights.

Agent j's weight is built from the residual of its latent forecast about the
conditional expectation implied by the decision maker's Gaussian expectation
m(x) = N(mu, Sigma):

    e_j = x_j - mu_j - gamma_j'(x_{-j} - mu_{-j})
    alpha_j(x) = exp{-e_j^2 / (2 r1 delta_j)} - d exp{-e_j^2 / (2 r2 delta_j)}

With the precision matrix P = Sigma^{-1} this is e_j = (P (x - mu))_j / P_jj
and delta_j = 1 / P_jj, which is how everything is vectorised below.

Indices are 0-based: agent ``j`` is ``panel.agents[j]``.  ``mu`` lives on the
latent-state scale, so with bias vector beta the agent density enters the
posterior as h_j(y + beta_j).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .densities import AgentPanel, GaussianDensity, SeedLike, as_generator

DEFAULT_GRID_POINTS = 2001
GRID_HALF_WIDTH = 8.0
# probability-space midpoint nodes used to integrate alpha_j over x_j
N_MARGINAL_NODES = 1024


def r3_from_r2(r1: float, r2: float) -> float:
    if not (r1 > 0 and r2 > 0):
        raise ValueError("r1 and r2 must be positive")
    if not r1 > r2:
        raise ValueError(f"need r1 > r2, got r1={r1}, r2={r2}")
    return r1 * r2 / (r1 - r2)


def r2_from_r3(r1: float, r3: float) -> float:
    if not (r1 > 0 and r3 > 0):
        raise ValueError("r1 and r3 must be positive")
    return r1 * r3 / (r1 + r3)


def _check_spd(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("Sigma must be a square matrix")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-14):
        raise ValueError("Sigma must be symmetric")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("Sigma must be positive definite") from None
    return sigma


@dataclass(frozen=True)
class ConditionalMoments:
    j: int
    gamma: np.ndarray
    delta: float
    mu: np.ndarray

    def cond_mean(self, x_minus_j) -> float:
        """E[x_j | x_{-j}] under N(mu, Sigma)."""
        rest = np.delete(self.mu, self.j)
        return float(self.mu[self.j] + self.gamma @ (np.asarray(x_minus_j, dtype=float) - rest))


def conditional_moments(sigma, mu, j: int) -> ConditionalMoments:
    """Regression vector and conditional variance of x_j given x_{-j}."""
    sigma = _check_spd(sigma)
    mu = np.asarray(mu, dtype=float)
    J = sigma.shape[0]
    if not 0 <= j < J:
        raise IndexError(f"agent index {j} out of range for J={J}")
    rest = [i for i in range(J) if i != j]
    s_rr = sigma[np.ix_(rest, rest)]
    s_jr = sigma[j, rest]
    gamma = np.linalg.solve(s_rr, s_jr) if rest else np.zeros(0)
    delta = float(sigma[j, j] - gamma @ s_jr)
    if not delta > 0:
        raise ValueError("conditional variance is not positive; Sigma is near singular")
    return ConditionalMoments(j, gamma, delta, mu)


@dataclass(frozen=True)
class WellGeometry:
    is_bimodal: bool
    offset: float
    max_value: float

    @property
    def argmax(self) -> tuple:
        """Residual values e at which the weight peaks."""
        return (-self.offset, self.offset) if self.is_bimodal else (0.0,)


def well_geometry(r1: float, r2: float, d: float, delta: float = 1.0) -> WellGeometry:
    """Peak location(s) and peak value of the weight as a function of e_j."""
    if not (r1 > r2 > 0):
        raise ValueError(f"need r1 > r2 > 0, got r1={r1}, r2={r2}")
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"d must lie in [0, 1], got {d}")
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    ratio = d * r1 / r2
    if ratio <= 1.0:
        return WellGeometry(False, 0.0, 1.0 - d)
    offset = math.sqrt(2.0 * r1 * r2 * delta / (r1 - r2) * math.log(ratio))
    peak = ratio ** (-r2 / (r1 - r2)) * (1.0 - r2 / r1)
    return WellGeometry(True, offset, peak)


def weight_of_residual(e, delta, r1: float, r2: float, d: float):
    """alpha as a function of residual e and conditional variance delta."""
    e2 = np.asarray(e, dtype=float) ** 2 / np.asarray(delta, dtype=float)
    out = np.exp(-e2 / (2.0 * r1))
    if d:
        out = out - d * np.exp(-e2 / (2.0 * r2))
    return out


@dataclass(frozen=True)
class Tuning:
    """Shape of the agent weight functions: r1 > r2 > 0, d in [0, 1]."""

    r1: float = 18.0337
    r2: float = 0.178551
    d: float = 0.0
    flat: bool = False

    def __post_init__(self):
        if not (self.r1 > self.r2 > 0):
            raise ValueError(f"need r1 > r2 > 0, got r1={self.r1}, r2={self.r2}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must lie in [0, 1], got {self.d}")

    @classmethod
    def from_r3(cls, r1: float, r3: float, d: float = 0.0, flat: bool = False) -> "Tuning":
        return cls(r1, r2_from_r3(r1, r3), d, flat)

    @property
    def r3(self) -> float:
        return r3_from_r2(self.r1, self.r2)

    @property
    def peak(self) -> float:
        return 1.0 if self.flat else well_geometry(self.r1, self.r2, self.d).max_value


@dataclass(frozen=True)
class SynthesisConfig:
    """Decision maker inputs for J-agent synthesis.

    ``q`` holds the agent weights q_1..q_J; q_0 = 1 - sum(q).  Set
    ``flat=True`` for alpha_j = 1 (the linear-pool case).
    """

    q: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    base: object
    r1: float = 18.0337
    r2: float = 0.178551
    d: float = 0.0
    beta: Optional[np.ndarray] = None
    flat: bool = False
    precision: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = _check_spd(np.atleast_2d(self.Sigma))
        J = len(q)
        beta = np.zeros(J) if self.beta is None else np.atleast_1d(np.asarray(self.beta, dtype=float))
        if mu.shape != (J,) or sigma.shape != (J, J) or beta.shape != (J,):
            raise ValueError("q, mu, beta and Sigma dimensions disagree")
        if np.any(q < 0):
            raise ValueError("q_j must be non-negative")
        if not (self.r1 > self.r2 > 0):
            raise ValueError(f"need r1 > r2 > 0, got r1={self.r1}, r2={self.r2}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must lie in [0, 1], got {self.d}")
        peak = 1.0 if self.flat else well_geometry(self.r1, self.r2, self.d).max_value
        if q.sum() * peak > 1.0 + 1e-12:
            raise ValueError(
                f"sum_j q_j alpha_j can exceed 1: sum(q) * max(alpha) = {q.sum() * peak:.6g}"
            )
        for name, val in (("q", q), ("mu", mu), ("Sigma", sigma), ("beta", beta)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        prec = np.linalg.inv(sigma)
        prec = 0.5 * (prec + prec.T)
        prec.setflags(write=False)
        object.__setattr__(self, "precision", prec)

    @classmethod
    def from_r3(cls, q, mu, Sigma, base, r1: float, r3: float, **kw) -> "SynthesisConfig":
        return cls(q, mu, Sigma, base, r1=r1, r2=r2_from_r3(r1, r3), **kw)

    @property
    def n_agents(self) -> int:
        return len(self.q)

    @property
    def r3(self) -> float:
        return r3_from_r2(self.r1, self.r2)

    @property
    def q0(self) -> float:
        return float(1.0 - self.q.sum())

    @property
    def deltas(self) -> np.ndarray:
        return 1.0 / np.diag(self.precision)

    def residuals(self, x) -> np.ndarray:
        """e_j for every agent; ``x`` has shape (..., J)."""
        x = np.asarray(x, dtype=float)
        return ((x - self.mu) @ self.precision) / np.diag(self.precision)


def alpha_all(cfg: SynthesisConfig, x) -> np.ndarray:
    """(alpha_1(x), ..., alpha_J(x)) for x of shape (..., J)."""
    x = np.asarray(x, dtype=float)
    if cfg.flat:
        return np.ones(x.shape)
    return weight_of_residual(cfg.residuals(x), cfg.deltas, cfg.r1, cfg.r2, cfg.d)


def alpha_j(cfg: SynthesisConfig, x, j: int):
    out = alpha_all(cfg, x)[..., j]
    return float(out) if np.ndim(out) == 0 else out


def alpha_0(cfg: SynthesisConfig, x):
    out = 1.0 - alpha_all(cfg, x) @ cfg.q
    return float(out) if np.ndim(out) == 0 else out


def default_grid(densities, n: int = DEFAULT_GRID_POINTS, half_width: float = GRID_HALF_WIDTH) -> np.ndarray:
    """Union of mean +/- half_width sd over the given densities."""
    lo = min(d.mean - half_width * math.sqrt(d.var) for d in densities)
    hi = max(d.mean + half_width * math.sqrt(d.var) for d in densities)
    return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class GaussianLatent:
    """A joint Gaussian over the latent agent states, e.g. the expectation m(x)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", _check_spd(np.atleast_2d(self.cov)))

    def marginal(self, j: int) -> GaussianDensity:
        return GaussianDensity(float(self.mean[j]), float(self.cov[j, j]))


def _marginals(latent, J: int) -> list:
    if isinstance(latent, AgentPanel):
        return list(latent.agents)
    return [latent.marginal(j) for j in range(J)]


def _residual_structure(cfg: SynthesisConfig, latent, n: int, rng: np.random.Generator):
    """Slopes s_j and offsets c_jk so that, given x_j = v, e_j = s_j (v - mu_j) - c_jk.

    For independent agents x_{-j} does not depend on x_j and s_j = 1.  For a
    joint Gaussian latent x_{-j} is drawn from its conditional given x_j.
    """
    J = cfg.n_agents
    P = cfg.precision
    pdiag = np.diag(P)
    slopes = np.ones(J)
    offsets = np.zeros((J, n))
    if J == 1:
        return slopes, offsets
    if isinstance(latent, AgentPanel):
        X = np.column_stack([a.sample(n, rng) for a in latent.agents])
        # e_j = (x_j - mu_j) + sum_{i != j} P_ji (x_i - mu_i) / P_jj
        D = X - cfg.mu
        full = (D @ P) / pdiag
        offsets = (D - full).T
        return slopes, offsets
    m, C = latent.mean, latent.cov
    Z = rng.standard_normal((n, J - 1))
    for j in range(J):
        rest = [i for i in range(J) if i != j]
        b = C[rest, j] / C[j, j]
        cond_cov = C[np.ix_(rest, rest)] - np.outer(C[rest, j], C[j, rest]) / C[j, j]
        L = np.linalg.cholesky(0.5 * (cond_cov + cond_cov.T))
        w = P[j, rest] / P[j, j]
        # x_rest - mu_rest = (m_rest - mu_rest) + b (v - m_j) + L z
        # e_j = (v - mu_j) + w . (x_rest - mu_rest)
        slopes[j] = 1.0 + w @ b
        const = w @ (m[rest] - cfg.mu[rest]) + (w @ b) * (cfg.mu[j] - m[j])
        offsets[j] = -(const + Z @ (L.T @ w))
    return slopes, offsets


def _marginal_nodes(density, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    if hasattr(density, "ppf"):
        return np.asarray(density.ppf((np.arange(n_nodes) + 0.5) / n_nodes), dtype=float)
    return density.sample(n_nodes, rng)


def _expected_weight(density, slope, mu_j, offsets, delta, cfg, nodes) -> np.ndarray:
    """E over x_j ~ density of alpha_j, one value per offset draw.

    Exact for Gaussian marginals; otherwise averaged over quantile nodes.
    """
    if isinstance(density, GaussianDensity):
        mean_e = slope * (density.mean - mu_j) - offsets
        var_e = slope**2 * density.var
        out = _expected_kernel(mean_e, var_e, cfg.r1, delta)
        if cfg.d:
            out = out - cfg.d * _expected_kernel(mean_e, var_e, cfg.r2, delta)
        return out
    e = slope * (nodes - mu_j)[None, :] - offsets[:, None]
    return weight_of_residual(e, delta, cfg.r1, cfg.r2, cfg.d).mean(axis=1)


@dataclass(frozen=True)
class MCPosterior:
    """Gridded posterior pi(y|H) with outcome-dependent weights.

    ``a[j]`` is the weight multiplying h_j(y + beta_j) (it includes q_j);
    ``a0`` multiplies pi_0(y).  ``component_probs[0]`` and
    ``component_probs[1:]`` are the pointwise shares of base and agents.
    """

    grid: np.ndarray
    density: np.ndarray
    density_se: np.ndarray
    a: np.ndarray
    a_se: np.ndarray
    a0: float
    a0_se: float
    base_values: np.ndarray
    agent_values: np.ndarray
    n_draws: int

    @property
    def component_probs(self) -> np.ndarray:
        parts = np.vstack([self.a0 * self.base_values, self.a * self.agent_values])
        tot = parts.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, parts / tot, np.nan)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def agent_mass(self) -> np.ndarray:
        """Posterior probability carried by each agent component."""
        return np.trapezoid(self.a * self.agent_values, self.grid, axis=1)


def _accumulate(cfg, latent, grid, n_draws, rng, chunk):
    J = cfg.n_agents
    marg = _marginals(latent, J)
    v = grid[None, :] + cfg.beta[:, None]  # (J, G) latent value at which x_j = y + beta_j
    agent_values = np.vstack([marg[j].pdf(v[j]) for j in range(J)])
    deltas = cfg.deltas
    nodes = [_marginal_nodes(marg[j], N_MARGINAL_NODES, rng) for j in range(J)]

    a_sum = np.zeros((J, len(grid)))
    a_sq = np.zeros((J, len(grid)))
    d_sum = np.zeros(len(grid))
    d_sq = np.zeros(len(grid))
    a0_sum = 0.0
    a0_sq = 0.0
    base_values = cfg.base.pdf(grid)
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        slopes, offsets = _residual_structure(cfg, latent, m, rng)
        dens_k = np.zeros((m, len(grid)))
        mass_k = np.zeros(m)
        for j in range(J):
            c = offsets[j][:, None]
            w_grid = weight_of_residual(slopes[j] * (v[j] - cfg.mu[j])[None, :] - c, deltas[j], cfg.r1, cfg.r2, cfg.d)
            mass_k += cfg.q[j] * _expected_weight(marg[j], slopes[j], cfg.mu[j], offsets[j], deltas[j], cfg, nodes[j])
            qa = cfg.q[j] * w_grid
            a_sum[j] += qa.sum(axis=0)
            a_sq[j] += (qa**2).sum(axis=0)
            dens_k += qa * agent_values[j]
        a0_k = 1.0 - mass_k
        dens_k += a0_k[:, None] * base_values
        d_sum += dens_k.sum(axis=0)
        d_sq += (dens_k**2).sum(axis=0)
        a0_sum += a0_k.sum()
        a0_sq += (a0_k**2).sum()
        done += m

    def mean_se(s, sq):
        mean = s / n_draws
        var = np.maximum(sq / n_draws - mean**2, 0.0)
        return mean, np.sqrt(var / max(n_draws - 1, 1))

    a, a_se = mean_se(a_sum, a_sq)
    dens, dens_se = mean_se(d_sum, d_sq)
    a0, a0_se = mean_se(a0_sum, a0_sq)
    return a, a_se, float(a0), float(a0_se), dens, dens_se, base_values, agent_values


def mc_posterior(
    cfg: SynthesisConfig,
    panel,
    n_draws: int = 10_000,
    seed: SeedLike = None,
    grid: Optional[np.ndarray] = None,
    chunk: int = 500,
) -> MCPosterior:
    """Monte Carlo posterior pi(y|H) = a0 pi_0(y) + sum_j a_j(y) h_j(y + beta_j).

    ``panel`` is an :class:`AgentPanel` (independent agent densities) or a
    :class:`GaussianLatent`, the latter giving the prior when it equals the
    expectation m(x).  a_j(y) averages q_j alpha_j(y + beta_j, x_{-j}) over
    draws of x_{-j}; a0 averages alpha_0(x) over full draws of x.
    """
    if n_draws < 1000:
        raise ValueError("n_draws must be at least 1000")
    J = cfg.n_agents
    marg = _marginals(panel, J)
    if len(marg) != J:
        raise ValueError(f"panel has {len(marg)} agents but the config has {J}")
    if grid is None:
        shifted = [m.translate(-b) for m, b in zip(marg, cfg.beta)]
        grid = default_grid([cfg.base, *shifted])
    grid = np.asarray(grid, dtype=float)

    if cfg.flat:
        v = grid[None, :] + cfg.beta[:, None]
        agent_values = np.vstack([marg[j].pdf(v[j]) for j in range(J)])
        a = np.repeat(cfg.q[:, None], len(grid), axis=1)
        base_values = cfg.base.pdf(grid)
        dens = cfg.q0 * base_values + (a * agent_values).sum(axis=0)
        zeros = np.zeros_like(grid)
        return MCPosterior(grid, dens, zeros, a, np.zeros_like(a), cfg.q0, 0.0, base_values, agent_values, 0)

    rng = as_generator(seed)
    a, a_se, a0, a0_se, dens, dens_se, base_values, agent_values = _accumulate(
        cfg, panel, grid, n_draws, rng, chunk
    )
    return MCPosterior(grid, dens, dens_se, a, a_se, a0, a0_se, base_values, agent_values, n_draws)


def _expected_kernel(mean_e, var_e, r: float, delta: float):
    """E[exp{-e^2 / (2 r delta)}] for e ~ N(mean_e, var_e)."""
    rd = r * delta
    return np.sqrt(rd / (rd + var_e)) * np.exp(-(mean_e**2) / (2.0 * (rd + var_e)))


def prior_density(cfg: SynthesisConfig, grid: np.ndarray) -> np.ndarray:
    """Closed-form prior pi(y) = int alpha(y|x) m(x) dx with m = N(mu, Sigma).

    Given x_j = v, the residual e_j is N(delta_j (v - mu_j) / Sigma_jj,
    delta_j - delta_j^2 / Sigma_jj), so every term integrates exactly.
    """
    grid = np.asarray(grid, dtype=float)
    S = cfg.Sigma
    out = np.zeros_like(grid)
    base_mass = 1.0
    for j in range(cfg.n_agents):
        v = grid + cfg.beta[j]
        mj = GaussianDensity(float(cfg.mu[j]), float(S[j, j]))
        if cfg.flat:
            w = np.ones_like(v)
            mass = 1.0
        else:
            dj = float(cfg.deltas[j])
            mean_e = dj * (v - cfg.mu[j]) / S[j, j]
            var_e = max(dj - dj**2 / S[j, j], 0.0)
            w = _expected_kernel(mean_e, var_e, cfg.r1, dj) - cfg.d * _expected_kernel(mean_e, var_e, cfg.r2, dj)
            mass = math.sqrt(cfg.r1 / (cfg.r1 + 1.0)) - cfg.d * math.sqrt(cfg.r2 / (cfg.r2 + 1.0))
        out += cfg.q[j] * w * mj.pdf(v)
        base_mass -= cfg.q[j] * mass
    return out + base_mass * cfg.base.pdf(grid)


def expectation_latent(cfg: SynthesisConfig) -> GaussianLatent:
    return GaussianLatent(cfg.mu, cfg.Sigma)


def panel_from_expectation(cfg: SynthesisConfig) -> Optional[AgentPanel]:
    """Independent panel equal to m(x) when Sigma is diagonal, else None."""
    S = cfg.Sigma
    if np.count_nonzero(S - np.diag(np.diag(S))):
        return None
    agents = tuple(GaussianDensity(float(cfg.mu[j]), float(S[j, j])) for j in range(cfg.n_agents))
    return AgentPanel(cfg.base, agents)

