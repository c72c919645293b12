"""Command-line interface: ``mixbps fit``, ``mixbps synthesize``, ``mixbps fixtures``.

Configuration is an INI file.  Every key has a default, so an empty file (or
no ``--config``) reproduces the study settings:

    [data]       path, column = value, log_transform = false
    [models]     source = auto | dlm | columns; specs = tvar1, tvar2, tvar5, linear_growth;
                 state_discount = 0.95; obs_discount = 0.95; warmup; student_t = false
    [bps]        r1 = 18.0337; r3 = 0.180337 (or r2, not both); d = 0.5; flat = false
    [priors]     n0 = 15; c0 = 1; prior_corr = 0.5; u0 = 1
    [discounts]  sigma = 0.99; beta = 0.975; q = 0.99
    [gibbs]      n_iter = 2000; burn_in = 500; thin = 1; n_mc_z = 1000; scheme = exact
    [synthesis]  n_param = 200; n_x = 500; grid_points = 801; mc_draws = 10000
    [panel]      base = mean, var; agents = mean, var; mean, var; ...   (synthesize only)
    [expectation] mu; sigma (rows separated by ';'); q; beta           (synthesize only)
    [output]     dir = out; density_grids = false
    [run]        seed = 0

The environment variable BPS_NUM_THREADS sets the worker count used when
averaging the synthesized density over parameter draws.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fixtures
from .agents import DLMSpec, forecast_panels, panels_from_columns
from .baselines import MethodForecasts, score_table
from .densities import AgentPanel, GaussianDensity
from .fixtures import _atomic_write, csv_text
from .gibbs import SCHEMES, GibbsConfig
from .multi_agent import SynthesisConfig, Tuning, mc_posterior, r2_from_r3
from .timeseries import QUANTILE_LEVELS, FilterConfig, run_filter

log = logging.getLogger("mixbps")

DEFAULTS = {
    "data": {"path": "", "column": "value", "log_transform": "false"},
    "models": {
        "source": "auto",
        "specs": "tvar1, tvar2, tvar5, linear_growth",
        "state_discount": "0.95",
        "obs_discount": "0.95",
        "warmup": "",
        "student_t": "false",
    },
    "bps": {"r1": "18.0337", "r2": "", "r3": "", "d": "0.5", "flat": "false"},
    "priors": {"n0": "15", "c0": "1", "prior_corr": "0.5", "u0": "1"},
    "discounts": {"sigma": "0.99", "beta": "0.975", "q": "0.99"},
    "gibbs": {"n_iter": "2000", "burn_in": "500", "thin": "1", "n_mc_z": "1000", "scheme": "exact"},
    "synthesis": {"n_param": "200", "n_x": "500", "grid_points": "801", "mc_draws": "10000"},
    "panel": {"base": "0, 1", "agents": "2, 1; 2.5, 1"},
    "expectation": {"mu": "", "sigma": "", "q": "", "beta": ""},
    "output": {"dir": "out", "density_grids": "false"},
    "run": {"seed": "0"},
}
DEFAULT_R3 = 0.180337
PRIMARY = ("BPS", "BMA", "POOL")


class ConfigError(ValueError):
    pass


def _vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace(",", " ").split()], dtype=float)


def _matrix(text: str) -> np.ndarray:
    rows = [_vector(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"malformed matrix {text!r}")
    return np.vstack(rows)


def _spec(token: str, state_discount: float, obs_discount: float) -> DLMSpec:
    token = token.strip().lower()
    if token == "linear_growth":
        return DLMSpec("linear_growth", state_discount=state_discount, obs_discount=obs_discount)
    if token.startswith("tvar") and token[4:].isdigit():
        return DLMSpec("tvar", int(token[4:]), state_discount, obs_discount)
    raise ConfigError(f"unknown model spec {token!r}; use tvarP or linear_growth")


@dataclass
class RunConfig:
    data_path: Optional[Path]
    column: str
    log_transform: bool
    source: str
    specs: list
    warmup: Optional[int]
    student_t: bool
    filter: FilterConfig
    mc_draws: int
    panel: Optional[AgentPanel]
    expectation: dict
    out_dir: Path
    density_grids: bool
    seed: int
    raw: dict = field(default_factory=dict)


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.read_dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp.read(p)
    for (sec, key), val in (overrides or {}).items():
        if val is not None:
            cp[sec][key] = str(val)
    try:
        return _build(cp)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _build(cp: configparser.ConfigParser) -> RunConfig:
    b = cp["bps"]
    r1 = b.getfloat("r1")
    if b["r2"].strip() and b["r3"].strip():
        raise ConfigError("give exactly one of bps.r2 and bps.r3")
    if b["r2"].strip():
        r2 = b.getfloat("r2")
    else:
        r3 = b.getfloat("r3") if b["r3"].strip() else DEFAULT_R3
        r2 = r2_from_r3(r1, r3)
    tuning = Tuning(r1, r2, b.getfloat("d"), b.getboolean("flat"))

    g = cp["gibbs"]
    scheme = g["scheme"].strip()
    if scheme not in SCHEMES:
        raise ConfigError(f"gibbs.scheme must be one of {SCHEMES}")
    gibbs = GibbsConfig(g.getint("n_iter"), g.getint("burn_in"), g.getint("thin"), g.getint("n_mc_z"), scheme=scheme)
    pr, dc, sy = cp["priors"], cp["discounts"], cp["synthesis"]
    seed = cp["run"].getint("seed")
    out = cp["output"]
    fcfg = FilterConfig(
        tuning=tuning,
        n0=pr.getfloat("n0"),
        c0=pr.getfloat("c0"),
        prior_corr=pr.getfloat("prior_corr"),
        u0=pr.getfloat("u0"),
        discount_sigma=dc.getfloat("sigma"),
        discount_beta=dc.getfloat("beta"),
        discount_q=dc.getfloat("q"),
        gibbs=gibbs,
        n_param=sy.getint("n_param"),
        n_x=sy.getint("n_x"),
        grid_points=sy.getint("grid_points"),
        keep_grids=out.getboolean("density_grids"),
        seed=seed,
    )
    m = cp["models"]
    source = m["source"].strip()
    if source not in ("auto", "dlm", "columns"):
        raise ConfigError("models.source must be auto, dlm or columns")
    sd, od = m.getfloat("state_discount"), m.getfloat("obs_discount")
    specs = [_spec(t, sd, od) for t in m["specs"].split(",") if t.strip()]
    if len(specs) < 2:
        raise ConfigError("models.specs needs a base model and at least one agent")
    warmup = m.getint("warmup") if m["warmup"].strip() else None

    pn = cp["panel"]
    base_mv = _vector(pn["base"])
    agent_mv = _matrix(pn["agents"])
    if base_mv.shape != (2,) or agent_mv.shape[1] != 2:
        raise ConfigError("panel entries are 'mean, variance' pairs")
    panel = AgentPanel(
        GaussianDensity(*base_mv), tuple(GaussianDensity(float(a), float(v)) for a, v in agent_mv)
    )
    ex = cp["expectation"]
    expectation = {k: ex[k].strip() for k in ("mu", "sigma", "q", "beta")}

    d = cp["data"]
    return RunConfig(
        data_path=Path(d["path"]) if d["path"].strip() else None,
        column=d["column"].strip(),
        log_transform=d.getboolean("log_transform"),
        source=source,
        specs=specs,
        warmup=warmup,
        student_t=m.getboolean("student_t"),
        filter=fcfg,
        mc_draws=sy.getint("mc_draws"),
        panel=panel,
        expectation=expectation,
        out_dir=Path(out["dir"]),
        density_grids=out.getboolean("density_grids"),
        seed=seed,
        raw={s: dict(cp[s]) for s in cp.sections()},
    )


# data ---------------------------------------------------------------------

@dataclass
class Dataset:
    dates: list
    values: np.ndarray
    means: Optional[np.ndarray]
    variances: Optional[np.ndarray]


def read_data(path: Path, column: str = "value") -> Dataset:
    if not path.is_file():
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if column not in header:
            raise ConfigError(f"column {column!r} not in {path} (header: {header})")
        rows = list(reader)
    if not rows:
        raise ConfigError(f"{path} has no data rows")
    dates = [r.get("date", str(i)) for i, r in enumerate(rows)]
    try:
        values = np.array([float(r[column]) for r in rows])
    except ValueError as exc:
        raise ConfigError(f"non-numeric value in {path}: {exc}") from None
    J1 = 0
    while f"f{J1}_mean" in header and f"f{J1}_var" in header:
        J1 += 1
    means = variances = None
    if J1:

        def num(v):
            return float(v) if v.strip() else math.nan

        means = np.array([[num(r[f"f{j}_mean"]) for j in range(J1)] for r in rows])
        variances = np.array([[num(r[f"f{j}_var"]) for j in range(J1)] for r in rows])
    return Dataset(dates, values, means, variances)


# output helpers -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (str, int, np.integer)) and not isinstance(v, bool):
        return str(v)
    return repr(float(v))


def _step_tables(dates, result, J: int):
    q_names = [f"q{int(round(100 * lv * 10)) / 10:g}".replace(".", "_") for lv in QUANTILE_LEVELS]
    pairs = [(i, k) for i in range(J) for k in range(i + 1, J)]
    step_head = (
        ["t", "date", "y", "status", "forecast_mean", "forecast_var", *q_names]
        + [f"f{j}_{s}" for j in range(J + 1) for s in ("mean", "var")]
        + [f"b{j + 1}" for j in range(J)]
        + [f"S{i + 1}_{k + 1}" for i in range(J) for k in range(i, J)]
        + ["niw_c", "niw_n"]
        + [f"u{j}" for j in range(J + 1)]
        + [f"{m.lower()}_{s}" for m in PRIMARY for s in ("point", "log_score")]
        + ["accept_x", "accept_beta_sigma", "accept_q", "message"]
    )
    corr_head = ["t", "date"] + [f"corr{i + 1}_{k + 1}" for i, k in pairs]
    w_head = ["t", "date"] + [f"dirichlet_q{j}" for j in range(J + 1)] + [f"bma_w{j}" for j in range(J + 1)]
    step_rows, corr_rows, w_rows, grid_rows = [], [], [], []
    n_step_fields = len(step_head) - 4
    for rec, date in zip(result.records, dates):
        lead = [rec.t, date, _fmt(rec.y), rec.status]
        if rec.status == "warmup":
            step_rows.append(lead + [""] * n_step_fields)
            corr_rows.append([rec.t, date] + [""] * len(pairs))
            w_rows.append([rec.t, date] + [""] * (2 * (J + 1)))
            continue
        fc = rec.forecast
        row = lead + [_fmt(fc.mean), _fmt(fc.var), *[_fmt(v) for v in fc.quantiles]]
        row += [_fmt(v) for v in rec.agent_forecasts.ravel()]
        row += [_fmt(v) for v in rec.b]
        row += [_fmt(rec.niw.S[i, k]) for i in range(J) for k in range(i, J)]
        row += [_fmt(rec.niw.c), _fmt(rec.niw.n)]
        row += [_fmt(v) for v in rec.dirichlet.u]
        row += [_fmt(getattr(rec.scores[m], a)) for m in PRIMARY for a in ("point", "log_score")]
        row += [_fmt(rec.acceptance.get(b, {}).get("rate")) for b in ("x", "beta_sigma", "q")]
        row += [rec.message]
        step_rows.append(row)
        corr_rows.append([rec.t, date] + [_fmt(rec.correlations[i, k]) for i, k in pairs])
        w_rows.append([rec.t, date] + [_fmt(v) for v in rec.q_mean] + [_fmt(v) for v in rec.bma_weights])
        if rec.grid is not None:
            grid_rows += [[rec.t, date, _fmt(g), _fmt(v)] for g, v in zip(rec.grid, rec.density)]
    tables = {
        "step_records.csv": (step_head, step_rows),
        "correlations.csv": (corr_head, corr_rows),
        "weights.csv": (w_head, w_rows),
    }
    return tables, (["t", "date", "y_grid", "density"], grid_rows)


def _score_rows(result):
    active = result.active()
    y = np.array([r.y for r in active])
    methods = {
        m: MethodForecasts([r.scores[m].point for r in active], [r.scores[m].log_score for r in active])
        for m in PRIMARY
    }
    rows = score_table(y, methods, "BPS")
    head = ["method", "rmse", "mean_log_score", "rmse_ratio", "log_score_ratio", "n_steps"]
    return head, [
        [r.method, _fmt(r.rmse), _fmt(r.mean_log_score), _fmt(r.rmse_ratio), _fmt(r.log_score_ratio), len(y)]
        for r in rows
    ]


def _write_all(out_dir: Path, tables: dict):
    """Render every table first, then write each file atomically."""
    texts = {name: csv_text(head, rows) for name, (head, rows) in tables.items()}
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in texts.items():
        _atomic_write(out_dir / name, text)


# commands -----------------------------------------------------------------

def _panels(cfg: RunConfig, data: Dataset, values: np.ndarray):
    source = cfg.source
    if source == "auto":
        source = "columns" if data.means is not None else "dlm"
    if source == "columns":
        if data.means is None:
            raise ConfigError("models.source = columns but the data has no f0_mean/f0_var columns")
        if cfg.log_transform:
            raise ConfigError("log_transform applies to DLM agents only; tabulated forecasts are used as given")
        return panels_from_columns(data.means, data.variances)
    return forecast_panels(values, cfg.specs, cfg.warmup, cfg.student_t)


def cmd_fit(cfg: RunConfig) -> int:
    if cfg.data_path is None:
        raise ConfigError("no data file given (use --data or data.path)")
    data = read_data(cfg.data_path, cfg.column)
    values = data.values
    if cfg.log_transform:
        if np.any(values <= 0):
            raise ConfigError("log transform needs positive values")
        values = np.log(values)
    if len(values) < 10:
        raise ConfigError("series must have at least 10 observations")
    panels = _panels(cfg, data, values)
    result = run_filter(values, panels, cfg.filter)
    J = next(p for p in panels if p is not None)[0].n_agents
    tables, grids = _step_tables(data.dates, result, J)
    tables["scores.csv"] = _score_rows(result)
    if cfg.density_grids:
        tables["density_grids.csv"] = grids
    _write_all(cfg.out_dir, tables)
    n_failed = sum(r.failed for r in result.records)
    log.info("wrote %d files to %s (%d failed steps)", len(tables), cfg.out_dir, n_failed)
    return 0


def _expectation_config(cfg: RunConfig) -> SynthesisConfig:
    J = cfg.panel.n_agents
    ex = cfg.expectation
    mu = _vector(ex["mu"]) if ex["mu"] else np.zeros(J)
    sigma = _matrix(ex["sigma"]) if ex["sigma"] else np.eye(J)
    q = _vector(ex["q"]) if ex["q"] else np.full(J, 1.0 / J)
    beta = _vector(ex["beta"]) if ex["beta"] else np.zeros(J)
    t = cfg.filter.tuning
    return SynthesisConfig(q, mu, sigma, cfg.panel.base, r1=t.r1, r2=t.r2, d=t.d, beta=beta, flat=t.flat)


def cmd_synthesize(cfg: RunConfig) -> int:
    scfg = _expectation_config(cfg)
    post = mc_posterior(scfg, cfg.panel, n_draws=cfg.mc_draws, seed=cfg.seed)
    J = scfg.n_agents
    head = (
        ["y", "density", "density_se", "a0"]
        + [f"a{j + 1}" for j in range(J)]
        + [f"component{j}" for j in range(J + 1)]
    )
    comps = np.vstack([post.a0 * post.base_values, post.a * post.agent_values])
    rows = []
    for g in range(len(post.grid)):
        rows.append(
            [_fmt(post.grid[g]), _fmt(post.density[g]), _fmt(post.density_se[g]), _fmt(post.a0)]
            + [_fmt(post.a[j, g]) for j in range(J)]
            + [_fmt(comps[j, g]) for j in range(J + 1)]
        )
    _write_all(cfg.out_dir, {"synthesis.csv": (head, rows)})
    log.info("agent mass %s", post.agent_mass())
    return 0


def cmd_fixtures(kind: str, seed: int, out_dir: Path, n: Optional[int] = None) -> int:
    fx = fixtures.generate(kind, seed, n)
    out_dir.mkdir(parents=True, exist_ok=True)
    fixtures.write_fixture(fx, out_dir / f"{kind}.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixbps", description="Mixture Bayesian predictive synthesis")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
        p.add_argument("--out-dir", help="output directory (overrides output.dir)")
        if data:
            p.add_argument("--data", help="CSV with columns date,value (overrides data.path)")
            p.add_argument("--log-transform", action="store_true", help="model log(value)")
            p.add_argument("--density-grids", action="store_true", help="also write density_grids.csv")

    common(sub.add_parser("fit", help="run the sequential filter over a series"))
    common(sub.add_parser("synthesize", help="one-shot synthesis of an inline panel"), data=False)
    fx = sub.add_parser("fixtures", help="write a synthetic series with ground truth")
    fx.add_argument("kind", choices=fixtures.KINDS)
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--n", type=int, help="series length")
    fx.add_argument("--out-dir", default=".")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "fixtures":
            return cmd_fixtures(args.kind, args.seed, Path(args.out_dir), args.n)
        overrides = {("run", "seed"): args.seed, ("output", "dir"): args.out_dir}
        if args.command == "fit":
            overrides[("data", "path")] = args.data
            if args.log_transform:
                overrides[("data", "log_transform")] = "true"
            if args.density_grids:
                overrides[("output", "density_grids")] = "true"
        cfg = load_config(args.config, overrides)
        if args.command == "fit":
            return cmd_fit(cfg)
        return cmd_synthesize(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"mixbps: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
