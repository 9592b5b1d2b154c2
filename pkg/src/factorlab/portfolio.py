"""Covariance and beta estimation plus the three portfolio constructors.

Risk parity and beta-neutral minimum variance optimise non-negative
position magnitudes ``x``; the traded weight is ``w_i = s_i * x_i`` with
``s = +1`` for longs and ``-1`` for shorts. Every constructor returns
weights with gross exposure sum(|w|) = 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError, InfeasiblePortfolioError, InsufficientHistoryError, NumericalError
from .regression import ols_fit

logger = logging.getLogger(__name__)

EWP, RPP, BNP = "EWP", "RPP", "BNP"
METHODS = (EWP, RPP, BNP)

MAX_MISSING_FRACTION = 0.2
EIGEN_FLOOR = 1e-10
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 200
BETA_TOL = 1e-8


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    window: int
    shrinkage: float
    names: list[str] | None = None


@dataclass(frozen=True)
class BetaVector:
    betas: pd.Series
    window: int


@dataclass(frozen=True)
class PortfolioWeights:
    weights: pd.Series
    method: str
    rebalance_date: pd.Timestamp | None = None

    @property
    def gross_exposure(self) -> float:
        return float(np.abs(self.weights.to_numpy()).sum())


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def _min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(m)[0])


def estimate_covariance(returns, shrinkage: float = 0.1) -> CovarianceEstimate:
    """Sample covariance blended towards its diagonal.

    ``returns`` is (days x securities), NaN for missing days. The blend
    weight is the larger of ``shrinkage`` and the smallest value that lifts
    the minimum eigenvalue to 1e-10 * trace / n. Fewer than n + 10 rows
    raises the floor to 0.5.
    """
    frame = returns if isinstance(returns, pd.DataFrame) else pd.DataFrame(np.asarray(returns, dtype=float))
    # fixed memory order keeps BLAS rounding independent of how the frame was built
    r = np.ascontiguousarray(frame.to_numpy(dtype=float))
    if r.ndim != 2 or r.shape[0] < 2:
        raise DataError("covariance needs at least two return observations")
    if not 0 <= shrinkage <= 1:
        raise DataError("shrinkage must lie in [0, 1]")
    t_len, n = r.shape
    ok = ~np.isnan(r)
    missing = 1.0 - ok.mean(axis=0)
    if np.any(missing > MAX_MISSING_FRACTION):
        j = int(np.argmax(missing))
        raise DataError(f"security {frame.columns[j]} has {missing[j]:.0%} missing returns in the covariance window")
    means = np.nansum(r, axis=0) / ok.sum(axis=0)
    dev = np.where(ok, r - means, 0.0)
    counts = ok.astype(float).T @ ok.astype(float)
    sample = (dev.T @ dev) / np.maximum(counts - 1.0, 1.0)
    sample = 0.5 * (sample + sample.T)
    diag = np.diag(np.diag(sample))
    if np.any(np.diag(sample) <= 0):
        j = int(np.argmin(np.diag(sample)))
        raise NumericalError(f"security {frame.columns[j]} has zero return variance in the covariance window")
    floor = shrinkage if t_len >= n + 10 else max(shrinkage, 0.5)
    target = EIGEN_FLOOR * np.trace(sample) / n

    def blend(delta):
        return (1.0 - delta) * sample + delta * diag

    delta = floor
    if _min_eig(blend(delta)) < target:
        # min eigenvalue is concave in delta and positive at delta = 1
        lo, hi = delta, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _min_eig(blend(mid)) >= target:
                hi = mid
            else:
                lo = mid
        delta = hi
    matrix = blend(delta)
    if delta == 1.0:
        matrix = diag.copy()
    names = [str(c) for c in frame.columns]
    return CovarianceEstimate(matrix, t_len, float(delta), names)


def estimate_betas(returns, benchmark_returns, window: int = 756) -> BetaVector:
    """Per-security OLS slope of security returns on benchmark returns over the last ``window`` rows."""
    frame = returns if isinstance(returns, pd.DataFrame) else pd.DataFrame(np.asarray(returns, dtype=float))
    r = np.ascontiguousarray(frame.to_numpy(dtype=float)[-window:])
    b = np.asarray(benchmark_returns, dtype=float).ravel()[-window:]
    if len(b) != len(r):
        raise DataError("security and benchmark return windows differ in length")
    ok_b = ~np.isnan(b)
    if np.nanvar(b) < 1e-16:
        raise NumericalError("benchmark return variance is numerically zero")
    betas = {}
    for j, name in enumerate(frame.columns):
        ok = ok_b & ~np.isnan(r[:, j])
        if ok.sum() < window / 2:
            raise InsufficientHistoryError(
                f"security {name} has {int(ok.sum())} paired returns; beta needs {window // 2 + window % 2}"
            )
        if np.var(b[ok]) < 1e-16:
            raise NumericalError("benchmark return variance is numerically zero")
        betas[name] = float(ols_fit(b[ok], r[ok, j]).coefficients[0])
    return BetaVector(pd.Series(betas, name="beta"), window)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def _signs(longs: Sequence[str], shorts: Sequence[str]) -> tuple[list[str], np.ndarray]:
    if len(longs) < 1 or len(shorts) < 1:
        raise DataError("both long and short lists need at least one security")
    names = list(longs) + list(shorts)
    if len(set(names)) != len(names):
        raise DataError("long and short lists overlap or contain duplicates")
    return names, np.r_[np.ones(len(longs)), -np.ones(len(shorts))]


def _cov_for(names: list[str], cov) -> np.ndarray:
    if isinstance(cov, CovarianceEstimate):
        if cov.names is not None and list(cov.names) != names:
            pos = {c: k for k, c in enumerate(cov.names)}
            try:
                idx = [pos[c] for c in names]
            except KeyError as exc:
                raise DataError(f"covariance estimate lacks security {exc.args[0]}") from exc
            return cov.matrix[np.ix_(idx, idx)]
        m = cov.matrix
    elif isinstance(cov, pd.DataFrame):
        m = cov.loc[names, names].to_numpy(dtype=float)
    else:
        m = np.asarray(cov, dtype=float)
    if m.shape != (len(names), len(names)):
        raise DataError(f"covariance is {m.shape}, expected {(len(names), len(names))}")
    return m


def construct_ewp(longs, shorts, rebalance_date=None) -> PortfolioWeights:
    names, signs = _signs(longs, shorts)
    w = signs / len(names)
    return PortfolioWeights(pd.Series(w, index=names, name="weight"), EWP, rebalance_date)


def risk_parity_magnitudes(cov, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Minimise 0.5 x'Cx - (1/n) sum(log x) by damped Newton; returns x normalised to sum 1.

    At the optimum (Cx)_i = 1/(n x_i), so every risk contribution x_i (Cx)_i
    equals 1/n before normalisation.
    """
    c = np.asarray(cov, dtype=float)
    n = c.shape[0]
    if np.any(np.diag(c) <= 0):
        raise NumericalError("covariance must have a positive diagonal")
    try:
        np.linalg.cholesky(c)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc
    # the normalised solution is scale free, so solve on a unit-diagonal scale
    c = c / np.mean(np.diag(c))
    budget = 1.0 / n
    x = 1.0 / np.sqrt(np.diag(c))
    x /= np.sqrt(x @ c @ x)

    def f(v):
        return 0.5 * v @ c @ v - budget * np.log(v).sum()

    grad_norm = np.inf
    for _ in range(max_iter + 1):
        cx = c @ x
        g = cx - budget / x
        # scale-free stationarity: every n x_i (Cx)_i equals 1 at the optimum
        grad_norm = float(np.max(np.abs(n * x * cx - 1.0)))
        if grad_norm <= tol:
            return x / x.sum()
        h = c + np.diag(budget / x**2)
        step = -np.linalg.solve(h, g)
        t = 1.0
        neg = step < 0
        if np.any(neg):
            t = min(1.0, 0.99 * float(np.min(-x[neg] / step[neg])))
        fx = f(x)
        slope = float(g @ step)
        if t == 1.0 and -slope < 1e-12:
            # quadratic region; f differences are below rounding here
            x = x + step
            continue
        while t > 1e-16:
            cand = x + t * step
            if np.all(cand > 0) and f(cand) <= fx + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        x = x + t * step
    raise NumericalError(f"risk parity Newton did not converge in {max_iter} iterations; gradient norm (relative) {grad_norm:.3e}")


def risk_contributions(magnitudes, cov) -> np.ndarray:
    x = np.asarray(magnitudes, dtype=float)
    return x * (np.asarray(cov, dtype=float) @ x)


def construct_rpp(longs, shorts, cov, rebalance_date=None) -> PortfolioWeights:
    """Risk parity on raw security covariance, signed by side afterwards."""
    names, signs = _signs(longs, shorts)
    x = risk_parity_magnitudes(_cov_for(names, cov))
    w = signs * x / x.sum()
    return PortfolioWeights(pd.Series(w, index=names, name="weight"), RPP, rebalance_date)


def _solve_eq_qp(h: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """min 0.5 x'Hx s.t. Ax = b via the KKT system; returns (x, multipliers)."""
    n, m = h.shape[0], a.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.r_[np.zeros(n), b]
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n], -sol[n:]


def beta_neutral_magnitudes(cov, signs, betas, max_iter: int | None = None) -> np.ndarray:
    """Minimum-variance magnitudes with sum(x) = 1, (s*beta)'x = 0 and x >= 0.

    Primal active-set method starting from a feasible two-asset vertex.
    """
    c = np.asarray(cov, dtype=float)
    s = np.asarray(signs, dtype=float)
    a_beta = s * np.asarray(betas, dtype=float)
    n = len(s)
    h = c * np.outer(s, s)
    h = h / np.mean(np.diag(h))
    A = np.vstack([np.ones(n), a_beta])
    b = np.array([1.0, 0.0])
    scale = max(1.0, float(np.max(np.abs(a_beta))))
    pos = np.flatnonzero(a_beta > BETA_TOL * scale)
    neg = np.flatnonzero(a_beta < -BETA_TOL * scale)
    zero = np.flatnonzero(np.abs(a_beta) <= BETA_TOL * scale)
    x = np.zeros(n)
    if len(zero):
        x[zero[0]] = 1.0
    elif len(pos) and len(neg):
        i = pos[np.argmax(a_beta[pos])]
        j = neg[np.argmin(a_beta[neg])]
        x[i] = -a_beta[j] / (a_beta[i] - a_beta[j])
        x[j] = a_beta[i] / (a_beta[i] - a_beta[j])
    else:
        raise InfeasiblePortfolioError("beta-neutral infeasible for this selection")
    free = x > 0
    max_iter = max_iter or 10 * n + 50
    for _ in range(max_iter):
        idx = np.flatnonzero(free)
        sub, _mult = _solve_eq_qp(h[np.ix_(idx, idx)], A[:, idx], b)
        p = np.zeros(n)
        p[idx] = sub - x[idx]
        if np.max(np.abs(p)) <= 1e-14:
            grad = h @ x
            lam, *_ = np.linalg.lstsq(A[:, idx].T, grad[idx], rcond=None)
            mu = grad - A.T @ lam
            bound = np.flatnonzero(~free)
            if len(bound) == 0 or np.min(mu[bound]) >= -1e-14:
                x = np.where(x > 0, x, 0.0)
                return x / x.sum()
            free[bound[np.argmin(mu[bound])]] = True
            continue
        alpha = 1.0
        blocking = -1
        for k in idx:
            if p[k] < 0:
                ratio = -x[k] / p[k]
                if ratio < alpha:
                    alpha, blocking = ratio, k
        x = x + alpha * p
        if blocking >= 0:
            x[blocking] = 0.0
            free[blocking] = False
    raise NumericalError("beta-neutral active-set solver did not converge")


def construct_bnp(longs, shorts, cov, betas, rebalance_date=None) -> PortfolioWeights:
    """Minimum-variance signed portfolio with zero beta and unit gross exposure."""
    names, signs = _signs(longs, shorts)
    if isinstance(betas, BetaVector):
        betas = betas.betas
    if isinstance(betas, pd.Series):
        missing = [c for c in names if c not in betas.index]
        if missing:
            raise DataError(f"no beta for security {missing[0]}")
        beta_vec = betas.loc[names].to_numpy(dtype=float)
    else:
        beta_vec = np.asarray(betas, dtype=float)
    x = beta_neutral_magnitudes(_cov_for(names, cov), signs, beta_vec)
    w = signs * x
    exposure = float(beta_vec @ w)
    if abs(exposure) > BETA_TOL:
        raise NumericalError(f"beta-neutral solution has residual beta {exposure:.3e}")
    return PortfolioWeights(pd.Series(w, index=names, name="weight"), BNP, rebalance_date)


def construct(method: str, longs, shorts, cov=None, betas=None, rebalance_date=None) -> PortfolioWeights:
    method = method.upper()
    if method == EWP:
        return construct_ewp(longs, shorts, rebalance_date)
    if method == RPP:
        return construct_rpp(longs, shorts, cov, rebalance_date)
    if method == BNP:
        return construct_bnp(longs, shorts, cov, betas, rebalance_date)
    raise DataError(f"unknown portfolio method {method!r}; choose from {', '.join(METHODS)}")
