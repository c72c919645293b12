"""Bayesian predictive synthesis with mixture-based agent weights."""
from .densities import (
    AgentPanel,
    GaussianDensity,
    GriddedDensity,
    MixtureDensity,
    StudentTDensity,
    log_score,
    rmse,
)
from .multi_agent import SynthesisConfig, Tuning
from .vb import DirichletState, NIWState, fit_dirichlet, fit_niw

__version__ = "0.1.0"

__all__ = [
    "AgentPanel",
    "DirichletState",
    "GaussianDensity",
    "GriddedDensity",
    "MixtureDensity",
    "NIWState",
    "StudentTDensity",
    "SynthesisConfig",
    "Tuning",
    "fit_dirichlet",
    "fit_niw",
    "log_score",
    "rmse",
]
