"""Univariate forecast densities, gridded densities and scoring rules.

Every density exposes the same small contract used throughout the package:
``pdf``, ``logpdf``, ``cdf``, ``sample``, ``mean``, ``var`` and ``translate``.
Closed forms are used for the Gaussian and Student-t families; anything else
only needs to satisfy the contract.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union, runtime_checkable

import numpy as np
from scipy import special

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]

_LOG_2PI = math.log(2.0 * math.pi)


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Return a numpy Generator; an existing Generator is passed through."""
    return np.random.default_rng(seed)


@runtime_checkable
class Density(Protocol):
    def pdf(self, y): ...

    def logpdf(self, y): ...

    def cdf(self, y): ...

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray: ...

    @property
    def mean(self) -> float: ...

    @property
    def var(self) -> float: ...

    def translate(self, offset: float) -> "Density": ...


@dataclass(frozen=True)
class GaussianDensity:
    """Normal density N(mean, variance)."""

    mean: float
    variance: float

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError(f"variance must be positive and finite, got {self.variance}")

    @property
    def var(self) -> float:
        return float(self.variance)

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)

    @property
    def mode(self) -> float:
        return float(self.mean)

    def logpdf(self, y):
        z2 = (np.asarray(y, dtype=float) - self.mean) ** 2 / self.variance
        return -0.5 * (_LOG_2PI + math.log(self.variance) + z2)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        return special.ndtr((np.asarray(y, dtype=float) - self.mean) / self.sd)

    def ppf(self, p):
        return self.mean + self.sd * special.ndtri(p)

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        return self.mean + self.sd * rng.standard_normal(n)

    def translate(self, offset: float) -> "GaussianDensity":
        return GaussianDensity(self.mean + offset, self.variance)


@dataclass(frozen=True)
class StudentTDensity:
    """Location-scale Student-t density; ``scale`` is the squared scale.

    The DLM one-step forecast convention is used: T_dof(location, scale), so
    the variance is ``scale * dof / (dof - 2)`` for dof > 2.
    """

    location: float
    scale: float
    dof: float

    def __post_init__(self):
        if not np.isfinite(self.location):
            raise ValueError(f"location must be finite, got {self.location}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.dof > 0:
            raise ValueError(f"dof must be positive, got {self.dof}")

    @property
    def mean(self) -> float:
        if self.dof <= 1:
            return float("nan")
        return float(self.location)

    @property
    def var(self) -> float:
        if self.dof <= 2:
            return float("inf")
        return self.scale * self.dof / (self.dof - 2.0)

    @property
    def mode(self) -> float:
        return float(self.location)

    def logpdf(self, y):
        nu = self.dof
        z2 = (np.asarray(y, dtype=float) - self.location) ** 2 / self.scale
        const = (
            special.gammaln(0.5 * (nu + 1.0))
            - special.gammaln(0.5 * nu)
            - 0.5 * math.log(nu * math.pi * self.scale)
        )
        return const - 0.5 * (nu + 1.0) * np.log1p(z2 / nu)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        z = (np.asarray(y, dtype=float) - self.location) / math.sqrt(self.scale)
        return special.stdtr(self.dof, z)

    def ppf(self, p):
        return self.location + math.sqrt(self.scale) * special.stdtrit(self.dof, p)

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        return self.location + math.sqrt(self.scale) * rng.standard_t(self.dof, n)

    def translate(self, offset: float) -> "StudentTDensity":
        return StudentTDensity(self.location + offset, self.scale, self.dof)

    def moment_matched(self) -> GaussianDensity:
        """Gaussian with the same mean and variance (requires dof > 2)."""
        if self.dof <= 2:
            raise ValueError("moment matching needs dof > 2")
        return GaussianDensity(self.location, self.var)


@dataclass(frozen=True)
class MixtureDensity:
    """Finite mixture sum_k weights[k] * components[k]."""

    weights: tuple
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.components) or len(w) == 0:
            raise ValueError("weights and components must be non-empty and aligned")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"mixture weights must lie on the simplex, got {w}")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "components", tuple(self.components))

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        return sum(w * c.pdf(y) for w, c in zip(self.weights, self.components))

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return sum(w * c.cdf(y) for w, c in zip(self.weights, self.components))

    @property
    def mean(self) -> float:
        return float(sum(w * c.mean for w, c in zip(self.weights, self.components)))

    @property
    def var(self) -> float:
        m = self.mean
        return float(
            sum(w * (c.var + (c.mean - m) ** 2) for w, c in zip(self.weights, self.components))
        )

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        idx = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        out = np.empty(n)
        for k, comp in enumerate(self.components):
            mask = idx == k
            if mask.any():
                out[mask] = comp.sample(int(mask.sum()), rng)
        return out

    def translate(self, offset: float) -> "MixtureDensity":
        return MixtureDensity(self.weights, tuple(c.translate(offset) for c in self.components))


@dataclass(frozen=True)
class GriddedDensity:
    """Density tabulated on an increasing grid; linear interpolation between nodes."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or len(g) < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    def pdf(self, y):
        return np.interp(y, self.grid, self.values, left=0.0, right=0.0)

    def logpdf(self, y):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def _cumulative(self) -> np.ndarray:
        steps = 0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.grid)
        cum = np.concatenate([[0.0], np.cumsum(np.clip(steps, 0.0, None))])
        return cum / cum[-1]

    def cdf(self, y):
        return np.interp(y, self.grid, self._cumulative())

    @property
    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.values, self.grid) / self.integral())

    @property
    def var(self) -> float:
        m = self.mean
        return float(np.trapezoid((self.grid - m) ** 2 * self.values, self.grid) / self.integral())

    def quantile(self, p):
        cum = self._cumulative()
        # strictly increasing abscissae for inversion; flat stretches carry no mass
        keep = np.concatenate([[True], np.diff(cum) > 0])
        return np.interp(p, cum[keep], self.grid[keep])

    def sample(self, n: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        return self.quantile(rng.uniform(size=n))

    def translate(self, offset: float) -> "GriddedDensity":
        return GriddedDensity(self.grid + offset, self.values)


@dataclass(frozen=True)
class AgentPanel:
    """Base density pi_0 and the agent forecast densities h_1..h_J."""

    base: object
    agents: tuple = field(default_factory=tuple)

    def __post_init__(self):
        agents = tuple(self.agents)
        if len(agents) < 1:
            raise ValueError("an agent panel needs at least one agent")
        for d in (self.base, *agents):
            if not isinstance(d, Density):
                raise TypeError(f"{d!r} does not implement the density contract")
        object.__setattr__(self, "agents", agents)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def agent_means(self) -> np.ndarray:
        return np.array([a.mean for a in self.agents])

    def agent_vars(self) -> np.ndarray:
        return np.array([a.var for a in self.agents])

    def all_densities(self) -> tuple:
        return (self.base, *self.agents)


@dataclass(frozen=True)
class WeightedSampleSet:
    """Monte Carlo representation: draws (n, dim) with non-negative weights."""

    draws: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=float)
        if d.ndim == 1:
            d = d[:, None]
        w = np.asarray(self.weights, dtype=float)
        if d.ndim != 2 or len(d) != len(w):
            raise ValueError("draws must be (n, dim) and aligned with weights")
        if np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be non-negative with positive sum")
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "weights", w)

    @property
    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def mean(self) -> np.ndarray:
        return self.normalized_weights @ self.draws

    def effective_sample_size(self) -> float:
        w = self.normalized_weights
        return float(1.0 / np.sum(w**2))


def density_eval(d, y):
    """Evaluate the p.d.f. of ``d`` at ``y`` (scalar or array)."""
    out = d.pdf(y)
    return float(out) if np.ndim(out) == 0 else out


def density_sample(d, n: int, seed: SeedLike = None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return d.sample(n, seed)


def log_score(d, y):
    """Log predictive density at ``y``; -inf where the density vanishes."""
    with np.errstate(divide="ignore"):
        out = d.logpdf(y)
    return float(out) if np.ndim(out) == 0 else out


def rmse(point_forecasts: Sequence[float], outcomes: Sequence[float]) -> float:
    f = np.asarray(point_forecasts, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if f.shape != y.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {y.shape}")
    if f.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((f - y) ** 2)))
