"""Reproducible synthetic series with planted ground truth.

Every fixture is a CSV with columns ``date,value`` and, for kinds that ship
their own forecasts, ``f0_mean,f0_var,f1_mean,f1_var,...`` (column 0 is the
base density).  Ground truth goes to a JSON file next to the CSV.

``biased_agents``  two agents; agent 1 forecasts are biased by +0.5
``ar1``            AR(1) data generated from agent 1's model
``regime_shift``   level series with one jump; forecasts come from DLM agents
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

KINDS = ("ar1", "biased_agents", "regime_shift")
START_DATE = dt.date(2016, 1, 1)


@dataclass
class Fixture:
    values: np.ndarray
    means: Optional[np.ndarray] = None  # (T, J + 1), base first
    variances: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @property
    def dates(self) -> list:
        return [(START_DATE + dt.timedelta(days=i)).isoformat() for i in range(len(self.values))]

    def header(self) -> list:
        cols = ["date", "value"]
        if self.means is not None:
            for j in range(self.means.shape[1]):
                cols += [f"f{j}_mean", f"f{j}_var"]
        return cols

    def rows(self):
        for i, (d, v) in enumerate(zip(self.dates, self.values)):
            row = [d, repr(float(v))]
            if self.means is not None:
                for m, s in zip(self.means[i], self.variances[i]):
                    row += [repr(float(m)), repr(float(s))]
            yield row


def biased_agents(seed: int = 0, n: int = 100, bias: float = 0.5) -> Fixture:
    """Signal m_t (AR(1), phi=0.9); y_t ~ N(m_t, 1).

    Base N(m_t, 1); agent 1 N(m_t + bias, 1); agent 2 N(m_t + eta_t, 1) with
    eta_t ~ N(0, 0.1^2).
    """
    rng = np.random.default_rng(seed)
    m = np.empty(n)
    m_prev = rng.normal(0.0, 0.5 / np.sqrt(1 - 0.81))
    for t in range(n):
        m_prev = 0.9 * m_prev + rng.normal(0.0, 0.5)
        m[t] = m_prev
    y = m + rng.standard_normal(n)
    eta = rng.normal(0.0, 0.1, n)
    means = np.column_stack([m, m + bias, m + eta])
    var = np.ones_like(means)
    meta = {
        "kind": "biased_agents",
        "seed": seed,
        "n": n,
        "n_agents": 2,
        "planted_bias": {"1": bias, "2": 0.0},
        "observation_sd": 1.0,
    }
    return Fixture(y, means, var, meta)


def ar1(seed: int = 0, n: int = 100, phi: float = 0.9, sigma: float = 1.0) -> Fixture:
    """y_t = phi y_{t-1} + N(0, sigma^2), the model of agent 1.

    Base: random walk N(y_{t-1}, 2 sigma^2).  Agent 2: right mean, variance
    4 sigma^2.  Agent 3: phi = 0.5.
    """
    rng = np.random.default_rng(seed)
    prev = rng.normal(0.0, sigma / np.sqrt(1 - phi**2))
    lag = np.empty(n)
    y = np.empty(n)
    for t in range(n):
        lag[t] = prev
        prev = phi * prev + rng.normal(0.0, sigma)
        y[t] = prev
    s2 = sigma**2
    means = np.column_stack([lag, phi * lag, phi * lag, 0.5 * lag])
    var = np.column_stack([np.full(n, 2 * s2), np.full(n, s2), np.full(n, 4 * s2), np.full(n, s2)])
    meta = {
        "kind": "ar1",
        "seed": seed,
        "n": n,
        "n_agents": 3,
        "phi": phi,
        "sigma": sigma,
        "true_agent": 1,
    }
    return Fixture(y, means, var, meta)


def regime_shift(seed: int = 0, n: int = 120, shift: float = 3.0, noise: float = 0.5) -> Fixture:
    """Level 0 before the change point, ``shift`` after, plus a slow random walk."""
    rng = np.random.default_rng(seed)
    cp = n // 2
    level = np.where(np.arange(n) >= cp, shift, 0.0) + np.cumsum(rng.normal(0.0, 0.1, n))
    y = level + rng.normal(0.0, noise, n)
    meta = {"kind": "regime_shift", "seed": seed, "n": n, "change_point": cp, "shift": shift}
    return Fixture(y, metadata=meta)


def generate(kind: str, seed: int = 0, n: Optional[int] = None) -> Fixture:
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {KINDS}")
    fn = {"ar1": ar1, "biased_agents": biased_agents, "regime_shift": regime_shift}[kind]
    return fn(seed) if n is None else fn(seed, n)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_fixture(fx: Fixture, path) -> tuple:
    """Write ``path`` (CSV) and ``path`` with a .json suffix; returns both paths."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    _atomic_write(path, csv_text(fx.header(), fx.rows()))
    _atomic_write(meta_path, json.dumps(fx.metadata, indent=2, sort_keys=True) + "\n")
    return path, meta_path
