"""Normal-inverse-Wishart and Dirichlet belief states and their KL refits.

NIW convention: (beta | Sigma) ~ N(b, c Sigma) and Sigma ~ IW(n, S), where S
is a point estimate and, in standard (df, scale) terms, Sigma ~ IW(n + J - 1,
n S).  Hence E[Sigma^{-1}] = S^{-1} (n + J - 1) / n.

The refits maximise the sample average of the approximating log density,
which is the same as minimising KL(samples || approximation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import special

from .densities import SeedLike, as_generator

NEWTON_MAX_ITER = 200
NEWTON_TOL = 1e-10
N_UPPER = 1e6


class FitError(RuntimeError):
    pass


def digamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("digamma is only provided for x > 0")
    out = special.psi(x)
    return float(out) if out.ndim == 0 else out


def trigamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("trigamma is only provided for x > 0")
    out = special.polygamma(1, x)
    return float(out) if out.ndim == 0 else out


def correlations(S: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(S))
    R = S / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


@dataclass(frozen=True)
class NIWState:
    b: np.ndarray
    c: float
    n: float
    S: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        J = len(b)
        if S.shape != (J, J):
            raise ValueError(f"S must be {J}x{J}")
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not self.n > J + 1:
            raise ValueError(f"n must exceed J + 1 = {J + 1}, got {self.n}")
        if not np.allclose(S, S.T, rtol=1e-10, atol=1e-300):
            raise ValueError("S must be symmetric")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ValueError("S must be positive definite") from None
        b.setflags(write=False)
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "n", float(self.n))

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def df(self) -> float:
        """Standard inverse-Wishart degrees of freedom."""
        return self.n + self.dim - 1.0

    @property
    def scale(self) -> np.ndarray:
        """Standard inverse-Wishart scale matrix."""
        return self.n * self.S

    @property
    def correlations(self) -> np.ndarray:
        return correlations(self.S)

    @cached_property
    def _prec_chol(self) -> np.ndarray:
        return np.linalg.cholesky(np.linalg.inv(self.scale))

    def sample(self, size: int, seed: SeedLike = None):
        """Draw (beta, Sigma, precision) arrays of shapes (N, J), (N, J, J), (N, J, J)."""
        rng = as_generator(seed)
        J = self.dim
        L = self._prec_chol
        A = np.zeros((size, J, J))
        dfs = self.df - np.arange(J)
        A[:, np.arange(J), np.arange(J)] = np.sqrt(rng.chisquare(dfs, size=(size, J)))
        tril = np.tril_indices(J, -1)
        A[:, tril[0], tril[1]] = rng.standard_normal((size, len(tril[0])))
        T = L @ A  # precision = T T'
        Tinv = np.linalg.inv(T)
        sigma = np.swapaxes(Tinv, 1, 2) @ Tinv
        sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        prec = T @ np.swapaxes(T, 1, 2)
        z = rng.standard_normal((size, J))
        beta = self.b + math.sqrt(self.c) * np.einsum("nji,nj->ni", Tinv, z)
        return beta, sigma, prec

    def logpdf(self, beta, sigma) -> np.ndarray:
        beta = np.atleast_2d(beta)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 2:
            sigma = sigma[None]
        J = self.dim
        nu = self.df
        psi = self.scale
        chol = np.linalg.cholesky(sigma)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        resid = beta - self.b
        sol = np.linalg.solve(sigma, resid[..., None])[..., 0]
        quad = np.einsum("ni,ni->n", resid, sol)
        log_norm = -0.5 * J * math.log(2 * math.pi * self.c) - 0.5 * logdet - 0.5 * quad / self.c
        tr = np.einsum("ij,nji->n", psi, np.linalg.inv(sigma))
        _, logdet_psi = np.linalg.slogdet(psi)
        log_iw = (
            0.5 * nu * logdet_psi
            - 0.5 * nu * J * math.log(2.0)
            - special.multigammaln(0.5 * nu, J)
            - 0.5 * (nu + J + 1) * logdet
            - 0.5 * tr
        )
        return log_norm + log_iw


_TINY = np.finfo(float).tiny


def dirichlet_draws(u, size, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draws that stay strictly positive for small ``u``.

    Gamma variates are formed in log space, log G(a) = log G(a + 1) + log(U) / a,
    because G(a) itself underflows to 0 with non-negligible probability once
    a is around 0.01.  Components below the smallest normal double are floored
    there.
    """
    u = np.asarray(u, dtype=float)
    shape = (size, len(u)) if size is not None else u.shape
    logg = np.log(rng.standard_gamma(u + 1.0, size=shape)) + np.log(rng.uniform(size=shape)) / u
    logq = logg - special.logsumexp(logg, axis=-1, keepdims=True)
    q = np.maximum(np.exp(logq), _TINY)
    return q / q.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DirichletState:
    u: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if np.any(~(u > 0)):
            raise ValueError(f"Dirichlet parameters must be positive, got {u}")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def mean(self) -> np.ndarray:
        return self.u / self.u.sum()

    def sample(self, size: int, seed: SeedLike = None) -> np.ndarray:
        return dirichlet_draws(self.u, size, as_generator(seed))

    def logpdf(self, q) -> np.ndarray:
        q = np.atleast_2d(q)
        with np.errstate(divide="ignore"):
            lq = np.log(q)
        return (
            special.gammaln(self.u.sum())
            - special.gammaln(self.u).sum()
            + ((self.u - 1.0) * lq).sum(axis=1)
        )


def _niw_statistics(beta_draws, sigma_draws):
    beta = np.asarray(beta_draws, dtype=float)
    sigma = np.asarray(sigma_draws, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    if sigma.ndim == 1:
        sigma = sigma[:, None, None]
    N, J = beta.shape
    if sigma.shape != (N, J, J):
        raise ValueError(f"sigma draws must have shape {(N, J, J)}, got {sigma.shape}")
    if N < 100:
        raise FitError(f"need at least 100 draws, got {N}")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise FitError("a Sigma draw is not positive definite") from None
    eye = np.broadcast_to(np.eye(J), sigma.shape)
    prec = np.linalg.solve(sigma, eye)
    prec_beta = np.linalg.solve(sigma, beta[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return beta, prec, prec_beta, logdet


def niw_n_equation(n: float, J: int, spread: float) -> float:
    """Left side of the n-equation; ``spread`` = E log|Sigma| + log|E Sigma^{-1}|."""
    j = np.arange(1, J + 1)
    return spread - J * math.log((n + J - 1) / 2.0) + float(special.psi((n + j - 1) / 2.0).sum())


def _niw_n_derivative(n: float, J: int) -> float:
    j = np.arange(1, J + 1)
    return -J / (n + J - 1) + 0.5 * float(special.polygamma(1, (n + j - 1) / 2.0).sum())


def solve_niw_n(spread: float, J: int, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> float:
    """Newton-Raphson in log n with a bisection safeguard.

    The equation is increasing in n, so a bracket is kept throughout.
    """
    if not spread > 0:
        raise FitError("Sigma draws show no spread; the degrees of freedom are unidentified")
    lo, hi = math.log(1e-6), math.log(N_UPPER * 10)
    if niw_n_equation(math.exp(hi), J, spread) < 0:
        raise FitError(f"n root lies above {N_UPPER:g} (spread={spread:.3e})")
    theta = math.log(max(J * (J + 1) / (2.0 * spread), J + 1.5))
    for _ in range(max_iter):
        n = math.exp(theta)
        g = niw_n_equation(n, J, spread)
        if abs(g) < tol:
            break
        if g < 0:
            lo = theta
        else:
            hi = theta
        step = g / (n * _niw_n_derivative(n, J))
        theta_new = theta - step
        if not lo < theta_new < hi:
            theta_new = 0.5 * (lo + hi)
        theta = theta_new
    else:
        raise FitError(
            f"Newton iteration for n did not converge in {max_iter} steps; "
            f"bracket n in [{math.exp(lo):.6g}, {math.exp(hi):.6g}], residual {g:.3e}"
        )
    n = math.exp(theta)
    if not J + 1 < n < N_UPPER:
        raise FitError(f"fitted n = {n:.6g} outside ({J + 1}, {N_UPPER:g})")
    return n


def fit_niw(beta_draws, sigma_draws) -> NIWState:
    """KL-optimal NIW approximation to paired (beta, Sigma) draws."""
    beta, prec, prec_beta, logdet = _niw_statistics(beta_draws, sigma_draws)
    N, J = beta.shape
    Pbar = prec.mean(axis=0)
    Pbar = 0.5 * (Pbar + Pbar.T)
    b = np.linalg.solve(Pbar, prec_beta.mean(axis=0))
    resid = beta - b
    c = float(np.einsum("ni,nij,nj->n", resid, prec, resid).mean() / J)
    if not c > 0:
        raise FitError("beta draws show no spread around b")
    _, logdet_pbar = np.linalg.slogdet(Pbar)
    spread = float(logdet.mean() + logdet_pbar)
    n = solve_niw_n(spread, J)
    S = np.linalg.inv(Pbar) * (n + J - 1) / n
    return NIWState(b, c, n, 0.5 * (S + S.T))


def fit_dirichlet(q_draws, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> DirichletState:
    """Dirichlet matching mean log q: psi(u_i) - psi(sum u) = mean log q_i."""
    q = np.atleast_2d(np.asarray(q_draws, dtype=float))
    N, K = q.shape
    if N < 100:
        raise FitError(f"need at least 100 draws, got {N}")
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.log(q)
    target = logq.mean(axis=0)
    bad = np.flatnonzero(~np.isfinite(target))
    if bad.size:
        raise FitError(f"mean log q is -inf for component(s) {bad.tolist()}")
    m = q.mean(axis=0)
    v = q.var(axis=0)
    if np.all(v <= 1e-300) or np.ptp(logq, axis=0).max() == 0:
        raise FitError("q draws are identical; the Dirichlet precision is unidentified")
    # method-of-moments start
    s0 = np.median(m * (1 - m) / np.maximum(v, 1e-300) - 1.0)
    u = m * (s0 if np.isfinite(s0) and s0 > 0 else 1.0)
    u = np.maximum(u, 1e-3)
    for _ in range(max_iter):
        grad = special.psi(u) - special.psi(u.sum()) - target
        if np.max(np.abs(grad)) < tol:
            break
        # Newton step with Hessian diag(psi'(u)) - psi'(sum u) 11'
        dq = special.polygamma(1, u)
        z = -special.polygamma(1, u.sum())
        bnum = (grad / dq).sum()
        bden = 1.0 / z + (1.0 / dq).sum()
        step = (grad - bnum / bden) / dq
        t = 1.0
        while np.any(u - t * step <= 0):
            t *= 0.5
        u = u - t * step
    else:
        raise FitError(f"Dirichlet Newton iteration did not converge in {max_iter} steps")
    return DirichletState(u)


@dataclass(frozen=True)
class KLCheck:
    objective: float
    perturbed: np.ndarray

    @property
    def is_local_optimum(self) -> bool:
        return bool(np.all(self.objective >= self.perturbed - 1e-12))


def kl_objective_check(
    fit,
    draws,
    n_perturb: int = 20,
    size: float = 0.05,
    seed: SeedLike = None,
) -> KLCheck:
    """Average fitted log density versus randomly perturbed parameter sets.

    ``draws`` is a q array for a Dirichlet fit and a (beta, Sigma) pair for an
    NIW fit.  Each parameter is scaled by (1 + eps), eps ~ U(-size, size); the
    NIW mean b moves by eps times the marginal prior sd of beta.
    """
    rng = as_generator(seed)
    if isinstance(fit, DirichletState):
        obj = float(fit.logpdf(draws).mean())
        vals = []
        for _ in range(n_perturb):
            eps = rng.uniform(-size, size, size=len(fit.u))
            vals.append(DirichletState(fit.u * (1 + eps)).logpdf(draws).mean())
        return KLCheck(obj, np.array(vals))
    if isinstance(fit, NIWState):
        beta, sigma = draws
        obj = float(fit.logpdf(beta, sigma).mean())
        J = fit.dim
        sd_b = np.sqrt(fit.c * np.diag(fit.S) * fit.n / max(fit.n - 2.0, 1e-12))
        vals = []
        for _ in range(n_perturb):
            eps = rng.uniform(-size, size, size=J + 2 + J)
            D = np.diag(1 + eps[J + 2 :])
            trial = NIWState(
                fit.b + eps[:J] * sd_b,
                fit.c * (1 + eps[J]),
                max(fit.n * (1 + eps[J + 1]), J + 1 + 1e-9),
                D @ fit.S @ D,
            )
            vals.append(trial.logpdf(beta, sigma).mean())
        return KLCheck(obj, np.array(vals))
    raise TypeError(f"unsupported fit type {type(fit).__name__}")


def niw_prior(J: int, base_variance: float, n0: float = 15.0, c0: float = 1.0, corr: float = 0.5,
              b0: Optional[np.ndarray] = None) -> NIWState:
    """Exchangeable NIW prior: S0 with diagonal ``base_variance`` and common correlation."""
    S0 = base_variance * ((1 - corr) * np.eye(J) + corr * np.ones((J, J)))
    return NIWState(np.zeros(J) if b0 is None else b0, c0, n0, S0)
