"""Forecasting agents: discount DLMs with unknown observation variance.

Two model kinds are provided:

``tvar``           y_t = sum_i phi_{t,i} y_{t-i} + eps_t, phi_t a random walk
``linear_growth``  level and trend, F = (1, 0), G = [[1, 1], [0, 1]]

Filtering is the standard conjugate forward filter with a state discount
(R = G C G' / delta) and an observation-variance discount on the degrees of
freedom (n_t = delta_v n_{t-1} + 1).  One-step forecasts are Student-t;
a moment-matched Gaussian is what gets handed to the synthesis by default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .densities import AgentPanel, GaussianDensity, StudentTDensity

KINDS = ("tvar", "linear_growth")


@dataclass(frozen=True)
class DLMSpec:
    kind: str
    order: int = 1
    state_discount: float = 0.95
    obs_discount: float = 0.95
    m0: Optional[np.ndarray] = None
    C0: Optional[np.ndarray] = None
    n0: float = 5.0
    s0: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "tvar" and self.order < 1:
            raise ValueError("tvar order must be >= 1")
        for label, v in (("state_discount", self.state_discount), ("obs_discount", self.obs_discount)):
            if not 0.8 < v <= 1.0:
                raise ValueError(f"{label} must lie in (0.8, 1], got {v}")
        if not self.n0 > 0:
            raise ValueError("n0 must be positive")
        if self.s0 is not None and not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if not self.name:
            label = f"tvar{self.order}" if self.kind == "tvar" else "linear_growth"
            object.__setattr__(self, "name", label)

    @property
    def dim(self) -> int:
        return self.order if self.kind == "tvar" else 2

    @property
    def lags_needed(self) -> int:
        return self.order if self.kind == "tvar" else 1


@dataclass(frozen=True)
class DLMState:
    m: np.ndarray
    C: np.ndarray
    n: float
    S: float
    history: tuple  # most recent observation last

    def regressors(self, spec: DLMSpec) -> np.ndarray:
        if spec.kind == "tvar":
            return np.array(self.history[::-1][: spec.order], dtype=float)
        return np.array([1.0, 0.0])


def _system(spec: DLMSpec) -> np.ndarray:
    if spec.kind == "linear_growth":
        return np.array([[1.0, 1.0], [0.0, 1.0]])
    return np.eye(spec.order)


def _default_scale(history: np.ndarray) -> float:
    d = np.diff(history)
    s = float(np.var(d)) if d.size > 1 else 0.0
    floor = 1e-8 * max(1.0, float(np.mean(history**2)))
    return max(s, floor)


def init_state(spec: DLMSpec, history: Sequence[float]) -> DLMState:
    """Prior state built from the warmup observations in ``history``.

    Unless given, the variance estimate comes from the first differences of
    ``history`` and the state prior is centred on a random walk.
    """
    h = np.asarray(history, dtype=float)
    if h.size < spec.lags_needed:
        raise ValueError(f"{spec.name} needs at least {spec.lags_needed} warmup observations")
    if not np.all(np.isfinite(h)):
        raise ValueError("warmup observations must be finite")
    s0 = spec.s0 if spec.s0 is not None else _default_scale(h)
    p = spec.dim
    if spec.m0 is not None:
        m0 = np.asarray(spec.m0, dtype=float)
    elif spec.kind == "tvar":
        m0 = np.zeros(p)
        m0[0] = 1.0
    else:
        m0 = np.array([h[-1], 0.0])
    if spec.C0 is not None:
        C0 = np.asarray(spec.C0, dtype=float)
    elif spec.kind == "tvar":
        # prior regression term F' C0 F of the order of s0
        C0 = np.eye(p) * s0 / max(float(np.mean(h**2)), 1e-12)
    else:
        C0 = np.diag([s0, 0.1 * s0])
    if m0.shape != (p,) or C0.shape != (p, p):
        raise ValueError(f"m0 and C0 must have dimension {p}")
    keep = max(spec.lags_needed, 1)
    return DLMState(m0, C0, float(spec.n0), float(s0), tuple(float(v) for v in h[-keep:]))


def dlm_forecast(spec: DLMSpec, state: DLMState) -> StudentTDensity:
    """One-step forecast T_n(f, q) for the next observation."""
    G = _system(spec)
    F = state.regressors(spec)
    a = G @ state.m
    R = G @ state.C @ G.T / spec.state_discount
    f = float(F @ a)
    q = float(F @ R @ F) + state.S
    return StudentTDensity(f, q, state.n)


def dlm_step(spec: DLMSpec, state: DLMState, y: float):
    """Update with observation ``y``; return (state', forecast for the next step)."""
    if not np.isfinite(y):
        raise ValueError(f"observation must be finite, got {y}")
    G = _system(spec)
    F = state.regressors(spec)
    a = G @ state.m
    R = G @ state.C @ G.T / spec.state_discount
    R = 0.5 * (R + R.T)
    f = float(F @ a)
    q = float(F @ R @ F) + state.S
    e = y - f
    A = R @ F / q
    n = spec.obs_discount * state.n + 1.0
    S = state.S + state.S / n * (e * e / q - 1.0)
    S = float(max(S, 1e-300))
    m = a + A * e
    C = (S / state.S) * (R - np.outer(A, A) * q)
    C = 0.5 * (C + C.T)
    keep = max(spec.lags_needed, 1)
    history = (state.history + (float(y),))[-keep:]
    new = DLMState(m, C, n, S, history)
    return new, dlm_forecast(spec, new)


def coefficient_interval(state: DLMState, index: int = 0, level: float = 0.95):
    """Marginal posterior interval for one state component (Student-t)."""
    from scipy import stats

    sd = math.sqrt(state.C[index, index])
    half = stats.t.ppf(0.5 + level / 2, state.n) * sd
    return state.m[index] - half, state.m[index] + half


def handoff(forecast: StudentTDensity, student_t: bool = False):
    """Density passed to the synthesis: moment-matched Gaussian unless ``student_t``."""
    if student_t:
        return forecast
    if forecast.dof > 2:
        return forecast.moment_matched()
    # no finite variance yet: use the scale as variance
    return GaussianDensity(forecast.location, forecast.scale)


def make_panel(specs: Sequence[DLMSpec], forecasts: Sequence[StudentTDensity], student_t: bool = False):
    """First spec is the base pi_0; returns (panel, f0) with f0 the base point forecast."""
    if len(specs) < 2:
        raise ValueError("need a base model and at least one agent")
    if len(forecasts) != len(specs):
        raise ValueError("one forecast per spec is required")
    dens = [handoff(f, student_t) for f in forecasts]
    panel = AgentPanel(dens[0], tuple(dens[1:]))
    return panel, float(forecasts[0].location)


def default_warmup(specs: Sequence[DLMSpec]) -> int:
    return max(s.lags_needed for s in specs) + 3


def forecast_panels(series, specs: Sequence[DLMSpec], warmup: Optional[int] = None, student_t: bool = False):
    """One-step panels for every t: None during warmup, else (panel, f0) for y_t.

    All models are initialised from y_0..y_{warmup-1} and then filtered
    forward; the panel at t only uses data before t.
    """
    y = np.asarray(series, dtype=float)
    if len(specs) < 2:
        raise ValueError("need a base model and at least one agent")
    w = default_warmup(specs) if warmup is None else int(warmup)
    if w < max(s.lags_needed for s in specs) + 1:
        raise ValueError("warmup too short for the model orders")
    if len(y) <= w:
        raise ValueError(f"series of length {len(y)} leaves no steps after a warmup of {w}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    states = [init_state(s, y[:w]) for s in specs]
    fcs = [dlm_forecast(s, st) for s, st in zip(specs, states)]
    out: list = [None] * w
    for t in range(w, len(y)):
        out.append(make_panel(specs, fcs, student_t))
        nxt = [dlm_step(s, st, y[t]) for s, st in zip(specs, states)]
        states = [a for a, _ in nxt]
        fcs = [b for _, b in nxt]
    return out


def panels_from_columns(means, variances):
    """Panels from tabulated forecasts: column 0 is the base, rows with NaN are skipped."""
    M = np.asarray(means, dtype=float)
    V = np.asarray(variances, dtype=float)
    if M.shape != V.shape or M.ndim != 2 or M.shape[1] < 2:
        raise ValueError("means and variances must be (T, J + 1) with J >= 1")
    out: list = []
    for mrow, vrow in zip(M, V):
        if not (np.all(np.isfinite(mrow)) and np.all(np.isfinite(vrow))):
            out.append(None)
            continue
        dens = [GaussianDensity(float(a), float(b)) for a, b in zip(mrow, vrow)]
        out.append((AgentPanel(dens[0], tuple(dens[1:])), float(mrow[0])))
    return out


def study_specs(state_discount: float = 0.95, obs_discount: float = 0.95) -> list:
    """Base TVAR(1) plus TVAR(2), TVAR(5) and a linear growth agent."""
    kw = dict(state_discount=state_discount, obs_discount=obs_discount)
    return [
        DLMSpec("tvar", 1, **kw),
        DLMSpec("tvar", 2, **kw),
        DLMSpec("tvar", 5, **kw),
        DLMSpec("linear_growth", **kw),
    ]


def with_discounts(spec: DLMSpec, state_discount: float, obs_discount: float) -> DLMSpec:
    return replace(spec, state_discount=state_discount, obs_discount=obs_discount)
