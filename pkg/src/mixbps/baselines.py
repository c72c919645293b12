"""Comparison combiners (BMA, equal-weight pool) and the score table.

Log scores are natural-log predictive densities at the realised outcome.
The normalised table divides each method's RMSE and mean log score by the
reference method's values.  Mean log scores are usually negative, so a
log-score ratio above 1 means a *worse* (more negative) score when both are
negative; the raw values are always reported alongside the ratios.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .densities import AgentPanel, MixtureDensity, rmse


@dataclass(frozen=True)
class BMAState:
    """Model probabilities over the base model and the J agents."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or len(w) < 1:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"BMA weights must lie on the simplex, got {w}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n_models: int) -> "BMAState":
        return cls(np.full(n_models, 1.0 / n_models))


def bma_update(state: BMAState, densities_at_y: Sequence[float]) -> BMAState:
    """w_j <- w_j p_j(y), renormalised."""
    p = np.asarray(densities_at_y, dtype=float)
    if p.shape != state.weights.shape:
        raise ValueError(f"expected {len(state.weights)} density values, got {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("density values must be finite and non-negative")
    w = state.weights * p
    tot = w.sum()
    if not tot > 0:
        raise ValueError("every model assigns zero likelihood to the observation")
    w = w / tot
    # keep exact simplex closure after the division
    w[np.argmax(w)] += 1.0 - w.sum()
    return BMAState(w)


def bma_density(state: BMAState, panel: AgentPanel) -> MixtureDensity:
    return MixtureDensity(tuple(state.weights), panel.all_densities())


def equal_pool(panel: AgentPanel) -> MixtureDensity:
    """Uniform mixture of the base density and the agent densities."""
    comps = panel.all_densities()
    k = len(comps)
    w = [1.0 / k] * k
    w[-1] = 1.0 - sum(w[:-1])
    return MixtureDensity(tuple(w), comps)


@dataclass(frozen=True)
class MethodForecasts:
    """Point forecasts and log scores of one method over the scored horizon."""

    point: np.ndarray
    log_score: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=float)
        s = np.asarray(self.log_score, dtype=float)
        if p.shape != s.shape or p.ndim != 1:
            raise ValueError("point forecasts and log scores must be aligned 1-d arrays")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "log_score", s)


@dataclass(frozen=True)
class ScoreRow:
    method: str
    rmse: float
    mean_log_score: float
    rmse_ratio: float
    log_score_ratio: float


def score_table(outcomes, methods: Mapping[str, MethodForecasts], reference: str = "BPS") -> list:
    """RMSE and mean log score per method, normalised by ``reference``."""
    y = np.asarray(outcomes, dtype=float)
    if reference not in methods:
        raise KeyError(f"reference method {reference!r} missing")
    raw = {}
    for name, m in methods.items():
        if m.point.shape != y.shape:
            raise ValueError(f"{name}: horizon {m.point.shape} does not match outcomes {y.shape}")
        raw[name] = (rmse(m.point, y), float(np.mean(m.log_score)))
    ref_rmse, ref_ls = raw[reference]
    rows = []
    for name, (r, ls) in raw.items():
        r_ratio = r / ref_rmse if ref_rmse > 0 else (1.0 if r == 0 else math.inf)
        ls_ratio = ls / ref_ls if ref_ls != 0 else (1.0 if ls == 0 else math.copysign(math.inf, ls))
        rows.append(ScoreRow(name, r, ls, r_ratio, ls_ratio))
    return rows
