"""Mixture synthesis for a single agent.

The decision maker mixes a base density pi_0 with the agent's (bias-shifted)
forecast, weighting the agent through q * alpha(x).  Three weight shapes are
supported:

``consensus``  alpha(x) = exp{-(x - mu)^2 / (2 r sigma2)}
``well``       alpha(x) = 1 - d exp{-(x - mu)^2 / (2 r sigma2)}
``flat``       alpha(x) = 1

``mu`` and ``sigma2`` describe the decision maker's expectation m of the
*bias-corrected* agent density, i.e. of h(y + beta).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .densities import GaussianDensity, MixtureDensity, SeedLike, as_generator

WEIGHT_SHAPES = ("consensus", "well", "flat")

DEFAULT_GRID_POINTS = 2001
QUAD_HALF_WIDTH = 12.0


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved absolute error estimate {achieved:.3e})")
        self.achieved = achieved


@dataclass(frozen=True)
class SingleAgentConfig:
    q: float
    base: object
    mu: float
    sigma2: float
    r: float = 1.0
    d: float = 0.0
    beta: float = 0.0
    weight: str = "consensus"

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must lie in [0, 1], got {self.d}")
        if self.weight not in WEIGHT_SHAPES:
            raise ValueError(f"weight must be one of {WEIGHT_SHAPES}, got {self.weight!r}")

    @property
    def expectation(self) -> GaussianDensity:
        return GaussianDensity(self.mu, self.sigma2)

    @property
    def kernel_variance(self) -> float:
        return self.r * self.sigma2


def alpha_x(cfg: SingleAgentConfig, x):
    """Agent weight function evaluated at latent forecast value(s) ``x``."""
    x = np.asarray(x, dtype=float)
    if cfg.weight == "flat":
        out = np.ones_like(x)
    else:
        k = np.exp(-((x - cfg.mu) ** 2) / (2.0 * cfg.kernel_variance))
        out = k if cfg.weight == "consensus" else 1.0 - cfg.d * k
    return float(out) if out.ndim == 0 else out


def gaussian_kernel_integral(mean: float, var: float, center: float, kernel_var: float) -> float:
    """Closed form of int exp{-(y - center)^2 / (2 kernel_var)} N(y | mean, var) dy."""
    tot = kernel_var + var
    return math.sqrt(kernel_var / tot) * math.exp(-((mean - center) ** 2) / (2.0 * tot))


def gaussian_kernel_product(mean: float, var: float, center: float, kernel_var: float) -> GaussianDensity:
    """Normalized product exp{-(y - center)^2 / (2 kernel_var)} * N(y | mean, var)."""
    tot = kernel_var + var
    w1 = var / tot
    w2 = kernel_var / tot
    return GaussianDensity(w1 * center + w2 * mean, w1 * w2 * tot)


class ReweightedDensity:
    """p(y) = weight(y) * density(y) / norm, for a weight bounded by 1.

    Moments and the c.d.f. come from adaptive quadrature; sampling is by
    rejection from ``density``.
    """

    def __init__(self, density, weight: Callable, norm: float):
        if not norm > 0:
            raise ValueError(f"normalizing constant must be positive, got {norm}")
        self.density = density
        self.weight = weight
        self.norm = float(norm)

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        return self.weight(y) * self.density.pdf(y) / self.norm

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def _moment(self, fn) -> float:
        return _integrate_against(lambda t: fn(t) * self.weight(t), self.density)[0] / self.norm

    def cdf(self, y):
        ys = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.array(
            [
                integrate.quad(lambda t: float(self.pdf(t)), -np.inf, v, limit=200)[0]
                for v in ys
            ]
        )
        return float(out[0]) if np.ndim(y) == 0 else out

    @property
    def mean(self) -> float:
        return self._moment(lambda t: t)

    @property
    def var(self) -> float:
        m = self.mean
        return self._moment(lambda t: (t - m) ** 2)

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        out = np.empty(0)
        while out.size < n:
            prop = self.density.sample(max(2 * n, 64), rng)
            keep = rng.uniform(size=prop.size) < self.weight(prop)
            out = np.concatenate([out, prop[keep]])
        return out[:n]

    def translate(self, offset: float) -> "ReweightedDensity":
        w = self.weight
        return ReweightedDensity(self.density.translate(offset), lambda y: w(y - offset), self.norm)


def _integrate_against(fn: Callable, density, tol: float = 1e-10):
    """int fn(y) density(y) dy: adaptive core interval plus infinite tails."""
    loc = density.mode if hasattr(density, "mode") else density.mean
    var = density.var
    sd = math.sqrt(var) if np.isfinite(var) else math.sqrt(getattr(density, "scale", 1.0))
    lo, hi = loc - QUAD_HALF_WIDTH * sd, loc + QUAD_HALF_WIDTH * sd

    def integrand(t):
        return float(fn(t) * density.pdf(t))

    total = 0.0
    err = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for a, b, pts in ((lo, hi, [loc]), (-np.inf, lo, None), (hi, np.inf, None)):
                kw = {"points": pts} if pts is not None else {}
                val, e = integrate.quad(integrand, a, b, epsabs=tol, epsrel=1e-12, limit=500, **kw)
                total += val
                err += e
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(f"quadrature did not converge: {exc}", err) from None
    if err > 10 * tol:
        raise QuadratureError("quadrature tolerance not met", err)
    return total, err


def prior_density(cfg: SingleAgentConfig):
    """Prior pi(y) = (1 - q c) pi_0 + q c p(y), with c = int alpha m.

    Returns ``(mixture, c)``.  c is closed form for every weight shape.
    """
    m = cfg.expectation
    if cfg.weight == "flat":
        c = 1.0
        p = m
    else:
        kc = gaussian_kernel_integral(cfg.mu, cfg.sigma2, cfg.mu, cfg.kernel_variance)
        if cfg.weight == "consensus":
            c = kc
            p = gaussian_kernel_product(cfg.mu, cfg.sigma2, cfg.mu, cfg.kernel_variance)
        else:
            c = 1.0 - cfg.d * kc
            p = ReweightedDensity(m, lambda y: alpha_x(cfg, y), c)
    qc = cfg.q * c
    return MixtureDensity((1.0 - qc, qc), (cfg.base, p)), c


@dataclass(frozen=True)
class PosteriorUpdate:
    mixture: MixtureDensity
    weight: float
    reweighted: object
    c_h: float


def posterior_update(cfg: SingleAgentConfig, h: GaussianDensity) -> PosteriorUpdate:
    """Closed-form posterior for a Gaussian agent density and consensus weights.

    The agent density is first shifted by the bias: h(y + beta) = N(f - beta, s).
    """
    if not isinstance(h, GaussianDensity):
        raise TypeError("the closed-form update needs a GaussianDensity agent forecast")
    if cfg.weight == "well":
        raise ValueError("well-shaped weights have no closed form here; use posterior_quadrature")
    hs = h.translate(-cfg.beta)
    if cfg.weight == "flat":
        c_h = 1.0
        p = hs
    else:
        c_h = gaussian_kernel_integral(hs.mean, hs.var, cfg.mu, cfg.kernel_variance)
        p = gaussian_kernel_product(hs.mean, hs.var, cfg.mu, cfg.kernel_variance)
    w = cfg.q * c_h
    return PosteriorUpdate(MixtureDensity((1.0 - w, w), (cfg.base, p)), w, p, c_h)


def default_grid(densities, n: int = DEFAULT_GRID_POINTS, half_width: float = 8.0) -> np.ndarray:
    lo = min(d.mean - half_width * math.sqrt(d.var) for d in densities)
    hi = max(d.mean + half_width * math.sqrt(d.var) for d in densities)
    return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class QuadraturePosterior:
    grid: np.ndarray
    density: np.ndarray
    reweighted: np.ndarray
    weight: float
    c_h: float
    abs_error: float


def posterior_quadrature(
    cfg: SingleAgentConfig,
    h,
    grid: Optional[np.ndarray] = None,
    tol: float = 1e-10,
) -> QuadraturePosterior:
    """Posterior on a grid with c^H = int alpha(y) h(y + beta) dy by quadrature.

    Works for any weight shape and any agent density with the density contract.
    """
    hs = h.translate(-cfg.beta)
    if grid is None:
        grid = default_grid([cfg.base, hs])
    grid = np.asarray(grid, dtype=float)
    c_h, err = _integrate_against(lambda t: alpha_x(cfg, t), hs, tol=tol)
    w = cfg.q * c_h
    agent_part = alpha_x(cfg, grid) * hs.pdf(grid)
    dens = (1.0 - w) * cfg.base.pdf(grid) + cfg.q * agent_part
    reweighted = agent_part / c_h if c_h > 0 else np.zeros_like(grid)
    return QuadraturePosterior(grid, dens, reweighted, w, c_h, err)
