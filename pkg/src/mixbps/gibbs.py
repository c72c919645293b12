"""Gibbs sampler for (z, x, beta, Sigma, q) given one observed outcome y.

The latent indicator z in {0, ..., J} names the mixture component that
produced y: z = 0 is the base density, z = j the point mass at x_j - beta_j.
A sweep refreshes z with x integrated out, then x, then (beta, Sigma), then
q.  The x, (beta, Sigma) and q blocks are rejection samplers with proposals
from h(x), the NIW prior and the Dirichlet prior respectively.

The expectation mean is mu = f0 + beta, with f0 the base point forecast.
q is a (J + 1)-vector whose component 0 is the base weight q_0.

Two schemes are available:

``exact``
    Targets the joint posterior.  The z step uses
    P(z=j | q, beta, Sigma, y) proportional to
    q_j h_j(y + beta_j) E[alpha_j(y + beta_j, x_{-j})], and for z = j > 0 the
    (beta, Sigma) step moves x_j = y + beta_j together with beta_j, which adds
    h_j(y + beta_j) / max h_j to the acceptance probability.
``approximate``
    Uses E_h[alpha_j(x)] in the z step and alpha_j alone in the
    (beta, Sigma) step, holding x fixed.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .densities import AgentPanel, GaussianDensity, SeedLike, as_generator
from .multi_agent import Tuning
from .vb import DirichletState, NIWState, dirichlet_draws

log = logging.getLogger(__name__)

SCHEMES = ("exact", "approximate")
BLOCK_ORDER = ("z", "x", "beta_sigma", "q")
MAX_PROPOSALS = 1_000_000
_FIRST_BATCH = 8
_MAX_BATCH = 4096
_CHUNK = 2048


class RejectionStall(RuntimeError):
    def __init__(self, block: str, proposals: int, mean_acceptance: float):
        super().__init__(
            f"{block} rejection sampler made {proposals} proposals without acceptance "
            f"(mean acceptance probability {mean_acceptance:.3e})"
        )
        self.block = block
        self.proposals = proposals
        self.mean_acceptance = mean_acceptance


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 2000
    burn_in: int = 500
    thin: int = 1
    n_mc_z: int = 1000
    seed: SeedLike = None
    scheme: str = "exact"
    max_proposals: int = MAX_PROPOSALS

    def __post_init__(self):
        if not self.n_iter > self.burn_in >= 0:
            raise ValueError("need n_iter > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_mc_z < 100:
            raise ValueError("n_mc_z must be >= 100")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")


class _Stream:
    """Buffered i.i.d. proposals; unused rows can be handed back.

    Handing back is valid because which proposal gets accepted depends only
    on the proposals up to and including it.
    """

    def __init__(self, draw: Callable[[int], tuple], chunk: int = _CHUNK):
        self._draw = draw
        self._chunk = chunk
        self._buf: tuple = ()
        self._pos = 0
        self._len = 0

    def peek(self, n: int) -> tuple:
        if self._pos + n > self._len:
            fresh = self._draw(max(n, self._chunk))
            if self._len > self._pos:
                fresh = tuple(np.concatenate([b[self._pos:], f]) for b, f in zip(self._buf, fresh))
            self._buf, self._pos, self._len = fresh, 0, len(fresh[0])
        return tuple(b[self._pos:self._pos + n] for b in self._buf)

    def advance(self, n: int) -> None:
        self._pos += n


class _Agents:
    """Vectorised access to the agent densities (fast path when all Gaussian)."""

    def __init__(self, panel: AgentPanel):
        self.panel = panel
        self.J = panel.n_agents
        self.gaussian = all(isinstance(a, GaussianDensity) for a in panel.agents)
        if self.gaussian:
            self.means = panel.agent_means()
            self.vars = panel.agent_vars()
            self.sds = np.sqrt(self.vars)
            self.log_norm = -0.5 * np.log(2 * np.pi * self.vars)
        modes = [getattr(a, "mode", a.mean) for a in panel.agents]
        self.peak = np.array([float(a.pdf(m)) for a, m in zip(panel.agents, modes)])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.gaussian:
            return self.means + self.sds * rng.standard_normal((n, self.J))
        return np.column_stack([a.sample(n, rng) for a in self.panel.agents])

    def pdf_each(self, v: np.ndarray) -> np.ndarray:
        """h_j(v_j) for v of shape (..., J)."""
        if self.gaussian:
            return np.exp(self.log_norm - 0.5 * (v - self.means) ** 2 / self.vars)
        v = np.asarray(v, dtype=float)
        return np.stack([a.pdf(v[..., j]) for j, a in enumerate(self.panel.agents)], axis=-1)

    def pdf_j(self, j: int, v):
        if self.gaussian:
            return np.exp(self.log_norm[j] - 0.5 * (v - self.means[j]) ** 2 / self.vars[j])
        return self.panel.agents[j].pdf(v)


@dataclass
class _Accept:
    proposals: int = 0
    accepted: int = 0
    prob_sum: float = 0.0

    @property
    def rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else math.nan

    @property
    def mean_probability(self) -> float:
        return self.prob_sum / self.proposals if self.proposals else math.nan


def _weights(e2: np.ndarray, tuning: Tuning) -> np.ndarray:
    """alpha from e^2 / delta."""
    out = np.exp(e2 * (-0.5 / tuning.r1))
    if tuning.d:
        out -= tuning.d * np.exp(e2 * (-0.5 / tuning.r2))
    return out


class _Sampler:
    """One time step: fixed y, panel, priors and a single random stream."""

    def __init__(self, panel: AgentPanel, y: float, f0: float, tuning: Tuning,
                 niw_prior: Optional[NIWState], dir_prior: Optional[DirichletState],
                 rng: np.random.Generator, n_mc_z: int = 1000, scheme: str = "exact",
                 max_proposals: int = MAX_PROPOSALS):
        if not np.isfinite(y):
            raise ValueError("y must be finite")
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        self.agents = _Agents(panel)
        self.J = panel.n_agents
        self.y = float(y)
        self.f0 = float(f0)
        self.base_at_y = float(panel.base.pdf(y))
        self.tuning = tuning
        self.niw = niw_prior
        self.dir = dir_prior
        self.rng = rng
        self.n_mc_z = n_mc_z
        self.scheme = scheme
        self.max_proposals = max_proposals
        self.stats = {name: _Accept() for name in BLOCK_ORDER[1:]}
        self.trace: Optional[list] = None
        self.x_stream = _Stream(lambda n: (self.agents.sample(n, rng),), chunk=max(_CHUNK, 4 * n_mc_z))
        if niw_prior is not None:
            if niw_prior.dim != self.J:
                raise ValueError("NIW prior dimension must equal the number of agents")
            self.niw_stream = _Stream(lambda n: niw_prior.sample(n, rng))
        if dir_prior is not None:
            if len(dir_prior.u) != self.J + 1:
                raise ValueError("Dirichlet prior must have J + 1 components")
            self.dir_stream = _Stream(lambda n: (dir_prior.sample(n, rng),))

    # weight functions
    def alpha(self, X, beta, P) -> np.ndarray:
        """alpha_j for X (..., J) with beta (..., J) and P (..., J, J) broadcast."""
        if self.tuning.flat:
            return np.ones(np.broadcast_shapes(np.shape(X), np.shape(beta)))
        D = X - (self.f0 + beta)
        if P.ndim == 2:
            R = D @ P
            pdiag = np.diag(P)
        else:
            R = np.einsum("...i,...ij->...j", D, P)
            pdiag = np.diagonal(P, axis1=-2, axis2=-1)
        return _weights(R * R / pdiag, self.tuning)

    def alpha_pinned(self, X, beta, P) -> np.ndarray:
        """alpha_j with x_j replaced by y + beta_j, for every j at once (X (n, J))."""
        if self.tuning.flat:
            return np.ones(X.shape)
        D = X - (self.f0 + beta)
        pdiag = np.diag(P)
        # e_j = (y - f0) + sum_{i != j} P_ji D_i / P_jj
        E = (D @ P) / pdiag - D + (self.y - self.f0)
        return _weights(E * E * pdiag, self.tuning)

    # rejection driver
    def _reject(self, block: str, stream: _Stream, accept_prob: Callable):
        stats = self.stats[block]
        batch = _FIRST_BATCH
        made = 0
        psum = 0.0
        while True:
            batch = min(batch, self.max_proposals - made)
            props = stream.peek(batch)
            p = accept_prob(*props)
            lo, hi = p.min(), p.max()
            if lo < -1e-12 or hi > 1 + 1e-12:
                raise AssertionError(f"{block}: acceptance probability outside [0, 1]: [{lo}, {hi}]")
            hit = np.flatnonzero(self.rng.uniform(size=len(p)) < p)
            if hit.size:
                k = int(hit[0])
                stream.advance(k + 1)
                stats.proposals += k + 1
                stats.accepted += 1
                stats.prob_sum += float(p[: k + 1].sum())
                return tuple(a[k] for a in props)
            stream.advance(batch)
            made += batch
            psum += float(p.sum())
            stats.proposals += batch
            stats.prob_sum += float(p.sum())
            if made >= self.max_proposals:
                raise RejectionStall(block, made, psum / made)
            batch = min(2 * batch, _MAX_BATCH)

    def _mark(self, block: str):
        if self.trace is not None:
            self.trace.append(block)

    # blocks
    def z_probabilities(self, q, beta, P) -> np.ndarray:
        """Unnormalised P(z = j | q, beta, Sigma, y), j = 0..J, with x averaged out."""
        qa = np.asarray(q, dtype=float)[1:]
        w = np.zeros(self.J + 1)
        (X,) = self.x_stream.peek(self.n_mc_z)
        self.x_stream.advance(self.n_mc_z)
        a_full = self.alpha(X, beta, P).mean(axis=0)
        if self.scheme == "exact" and not self.tuning.flat:
            a_agent = self.alpha_pinned(X, beta, P).mean(axis=0)
        else:
            a_agent = a_full
        w[0] = self.base_at_y * max(1.0 - float(qa @ a_full), 0.0)
        w[1:] = qa * self.agents.pdf_each(self.y + beta) * a_agent
        return w

    def z(self, q, beta, P) -> int:
        self._mark("z")
        qa = np.asarray(q)[1:]
        if not np.any(qa > 0):
            return 0
        w = self.z_probabilities(q, beta, P)
        tot = w.sum()
        if not (tot > 0 and np.isfinite(tot)):
            warnings.warn("every z probability vanishes at this y; falling back to z = 0", RuntimeWarning)
            return 0
        return int(min(np.searchsorted(np.cumsum(w), self.rng.uniform() * tot, side="right"), self.J))

    def x(self, z: int, q, beta, P) -> np.ndarray:
        self._mark("x")
        qa = np.asarray(q)[1:]
        if z > 0:
            j = z - 1
            pinned = self.y + beta[j]

            def accept(X):
                X = X.copy()
                X[:, j] = pinned
                return self.alpha(X, beta, P)[:, j]

            (x,) = self._reject("x", self.x_stream, accept)
            x = x.copy()
            x[j] = pinned
            return x

        def accept0(X):
            return np.clip(1.0 - self.alpha(X, beta, P) @ qa, 0.0, 1.0)

        (x,) = self._reject("x", self.x_stream, accept0)
        return x.copy()

    def beta_sigma(self, z: int, q, x):
        """Returns (beta, Sigma, precision, x); x moves only in the exact scheme with z > 0."""
        self._mark("beta_sigma")
        qa = np.asarray(q)[1:]
        x = np.asarray(x, dtype=float)
        if z > 0 and self.scheme == "exact":
            j = z - 1

            def accept(B, S, Pm):
                X = np.repeat(x[None, :], len(B), axis=0)
                X[:, j] = self.y + B[:, j]
                return self.alpha(X, B, Pm)[:, j] * (self.agents.pdf_j(j, X[:, j]) / self.agents.peak[j])
        elif z > 0:
            j = z - 1

            def accept(B, S, Pm):
                return self.alpha(x, B, Pm)[:, j]
        else:

            def accept(B, S, Pm):
                return np.clip(1.0 - self.alpha(x, B, Pm) @ qa, 0.0, 1.0)

        B, S, Pm = self._reject("beta_sigma", self.niw_stream, accept)
        x_new = x.copy()
        if z > 0 and self.scheme == "exact":
            x_new[z - 1] = self.y + B[z - 1]
        return B.copy(), S.copy(), Pm.copy(), x_new

    def q(self, z: int, x, beta, P) -> np.ndarray:
        self._mark("q")
        stats = self.stats["q"]
        u = self.dir.u
        if z > 0:
            post = u.copy()
            post[z] += 1.0
            draw = dirichlet_draws(post, None, self.rng)
            stats.proposals += 1
            stats.accepted += 1
            stats.prob_sum += 1.0
            return draw
        a = self.alpha(x, beta, P)

        def accept(Q):
            return np.clip(1.0 - Q[:, 1:] @ a, 0.0, 1.0)

        (q,) = self._reject("q", self.dir_stream, accept)
        return q.copy()


def _precision(Sigma) -> np.ndarray:
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    P = np.linalg.inv(Sigma)
    return 0.5 * (P + P.T)


def sample_z(q, beta, Sigma, y: float, panel: AgentPanel, n_mc_z: int = 1000, seed: SeedLike = None, *,
             f0: float = 0.0, tuning: Tuning = Tuning(), scheme: str = "exact") -> int:
    """Draw z with x integrated out by Monte Carlo over h(x).

    ``q`` is the (J + 1)-vector (q_0, q_1, ..., q_J).
    """
    s = _Sampler(panel, y, f0, tuning, None, None, as_generator(seed), n_mc_z, scheme)
    return s.z(q, np.asarray(beta, dtype=float), _precision(Sigma))


def sample_x(z: int, q, beta, Sigma, y: float, panel: AgentPanel, seed: SeedLike = None, *,
             f0: float = 0.0, tuning: Tuning = Tuning(), max_proposals: int = MAX_PROPOSALS) -> np.ndarray:
    s = _Sampler(panel, y, f0, tuning, None, None, as_generator(seed), max_proposals=max_proposals)
    return s.x(z, q, np.asarray(beta, dtype=float), _precision(Sigma))


def sample_beta_sigma(z: int, q, x, prior: NIWState, seed: SeedLike = None, *, y: float, panel: AgentPanel,
                      f0: float = 0.0, tuning: Tuning = Tuning(), scheme: str = "exact",
                      max_proposals: int = MAX_PROPOSALS):
    """Returns (beta, Sigma, x).  In the exact scheme with z > 0, x_z moves with beta."""
    s = _Sampler(panel, y, f0, tuning, prior, None, as_generator(seed), scheme=scheme,
                 max_proposals=max_proposals)
    beta, Sigma, _, x = s.beta_sigma(z, q, x)
    return beta, Sigma, x


def sample_q(z: int, x, beta, Sigma, prior: DirichletState, seed: SeedLike = None, *, y: float,
             panel: AgentPanel, f0: float = 0.0, tuning: Tuning = Tuning(),
             max_proposals: int = MAX_PROPOSALS) -> np.ndarray:
    """q on the (J + 1)-simplex; component 0 is the base weight."""
    s = _Sampler(panel, y, f0, tuning, None, prior, as_generator(seed), max_proposals=max_proposals)
    return s.q(z, np.asarray(x, dtype=float), np.asarray(beta, dtype=float), _precision(Sigma))


@dataclass
class GibbsDraws:
    z: np.ndarray
    x: np.ndarray
    beta: np.ndarray
    Sigma: np.ndarray
    q: np.ndarray
    acceptance: dict = field(default_factory=dict)
    trace: tuple = ()

    def __len__(self) -> int:
        return len(self.z)

    @property
    def n_agents(self) -> int:
        return self.x.shape[1]

    def z_frequencies(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.n_agents + 1) / len(self.z)


def run_gibbs(
    panel: AgentPanel,
    y: float,
    f0: float,
    niw_prior: NIWState,
    dir_prior: DirichletState,
    tuning: Tuning = Tuning(),
    cfg: GibbsConfig = GibbsConfig(),
) -> GibbsDraws:
    """Run one chain at a single time step.

    ``f0`` is the base point forecast, so the expectation mean is f0 + beta.
    The returned ``trace`` lists the blocks of the first sweep in call order.
    """
    J = panel.n_agents
    rng = as_generator(cfg.seed)
    s = _Sampler(panel, y, f0, tuning, niw_prior, dir_prior, rng, cfg.n_mc_z, cfg.scheme, cfg.max_proposals)

    beta = niw_prior.b.copy()
    Sigma = niw_prior.S.copy()
    P = _precision(Sigma)
    q = dir_prior.mean.copy()
    x = panel.agent_means()

    n_keep = len(range(cfg.burn_in, cfg.n_iter, cfg.thin))
    zs = np.empty(n_keep, dtype=int)
    xs = np.empty((n_keep, J))
    bs = np.empty((n_keep, J))
    Ss = np.empty((n_keep, J, J))
    qs = np.empty((n_keep, J + 1))
    trace: list = []
    keep = 0
    for it in range(cfg.n_iter):
        s.trace = trace if it == 0 else None
        z = s.z(q, beta, P)
        x = s.x(z, q, beta, P)
        beta, Sigma, P, x = s.beta_sigma(z, q, x)
        q = s.q(z, x, beta, P)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            zs[keep] = z
            xs[keep] = x
            bs[keep] = beta
            Ss[keep] = Sigma
            qs[keep] = q
            keep += 1
    acceptance = {
        name: {"rate": a.rate, "mean_probability": a.mean_probability} for name, a in s.stats.items()
    }
    log.debug("gibbs acceptance %s", acceptance)
    return GibbsDraws(zs, xs, bs, Ss, qs, acceptance, tuple(trace))
