"""OLS via normal equations and Lasso via cyclic coordinate descent.

Both fits include an unpenalised intercept and work on centred data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError

MAX_CONDITION = 1e12


@dataclass
class FitResult:
    coefficients: np.ndarray
    intercept: float
    r_squared: float | None = None
    iterations: int | None = None
    converged: bool = True
    column_names: list[str] | None = None
    std_errors: np.ndarray | None = None
    t_stats: np.ndarray | None = None
    p_values: np.ndarray | None = None
    objective_history: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients + self.intercept


def _as_design(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DataError("design matrix needs at least one row and one column")
    if X.shape[0] != len(y):
        raise DataError(f"design has {X.shape[0]} rows but target has {len(y)}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataError("design matrix and target must be finite")
    return X, y


def _names(column_names, k) -> list[str]:
    if column_names is None:
        return [f"x{j}" for j in range(k)]
    names = list(column_names)
    if len(names) != k:
        raise DataError(f"{len(names)} column names for {k} columns")
    return names


def _gaussian_two_sided(t: np.ndarray) -> np.ndarray:
    return np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in np.atleast_1d(t)])


def ols_fit(X, y, column_names: Sequence[str] | None = None, inference: bool = False) -> FitResult:
    """Least squares with intercept by solving the centred normal equations.

    R^2 is 1 - SSE/TSS (0 when TSS is zero). With ``inference`` the result
    carries classical standard errors, t statistics and two-sided p-values
    from the Gaussian tail.
    """
    X, y = _as_design(X, y)
    n, k = X.shape
    names = _names(column_names, k)
    if n <= k:
        raise NumericalError(f"OLS needs more rows than columns (rows={n}, cols={k})")
    xbar = X.mean(axis=0)
    ybar = y.mean()
    Xc = X - xbar
    yc = y - ybar
    gram = Xc.T @ Xc
    cond = np.linalg.cond(gram) if np.all(np.diag(gram) > 0) else np.inf
    if not cond < MAX_CONDITION:
        _, r, piv = scipy.linalg.qr(Xc, mode="economic", pivoting=True)
        weakest = names[piv[int(np.argmin(np.abs(np.diag(r))))]]
        raise NumericalError(f"near-singular normal equations (condition {cond:.3g}); weakest column {weakest!r}")
    coef = np.linalg.solve(gram, Xc.T @ yc)
    intercept = float(ybar - xbar @ coef)
    resid = yc - Xc @ coef
    sse = float(resid @ resid)
    tss = float(yc @ yc)
    r2 = 0.0 if tss == 0.0 else min(1.0, max(0.0, 1.0 - sse / tss))
    result = FitResult(coef, intercept, r_squared=r2, column_names=names)
    if inference:
        dof = n - k - 1
        if dof <= 0:
            raise NumericalError("no residual degrees of freedom for inference")
        sigma2 = sse / dof
        se = np.sqrt(np.diag(np.linalg.inv(gram)) * sigma2)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, coef / se, np.copysign(np.inf, coef))
        result.std_errors = se
        result.t_stats = t
        result.p_values = _gaussian_two_sided(t)
    return result


def lasso_objective(X, y, coefficients, intercept, lam) -> float:
    """(1/2n) ||y - Xw - b||^2 + lam ||w||_1."""
    X = np.asarray(X, dtype=float)
    resid = np.asarray(y, dtype=float) - X @ coefficients - intercept
    return float(resid @ resid / (2 * len(resid)) + lam * np.abs(coefficients).sum())


def lasso_lambda_max(X, y) -> float:
    """Smallest penalty at which every coefficient is exactly zero."""
    X, y = _as_design(X, y)
    Xc = X - X.mean(axis=0)
    return float(np.max(np.abs(Xc.T @ (y - y.mean()))) / len(y))


def _soft_threshold(value: float, lam: float) -> float:
    if value > lam:
        return value - lam
    if value < -lam:
        return value + lam
    return 0.0


def lasso_fit(
    X,
    y,
    lam: float,
    max_iter: int = 10000,
    tol: float = 1e-8,
    column_names: Sequence[str] | None = None,
    record_objective: bool = False,
) -> FitResult:
    """Minimise (1/2n)||y - Xw - b||^2 + lam*||w||_1 by cyclic coordinate descent.

    Columns are visited in order on every sweep, using the Gram matrix of the
    centred design; the intercept is recovered from the means. Convergence
    means the largest coefficient move in a sweep fell below ``tol``; if
    ``max_iter`` sweeps pass first the result has ``converged=False``.
    """
    if lam < 0:
        raise DataError("lambda must be >= 0")
    X, y = _as_design(X, y)
    n, k = X.shape
    names = _names(column_names, k)
    xbar = X.mean(axis=0)
    ybar = y.mean()
    Xc = X - xbar
    yc = y - ybar
    gram = (Xc.T @ Xc) / n
    corr = (Xc.T @ yc) / n
    ycy = float(yc @ yc) / n
    diag = np.diag(gram).copy()
    w = np.zeros(k)
    # gradient-like running term: corr - gram @ w
    grad = corr.copy()
    history = []

    def objective() -> float:
        return float(0.5 * (ycy - 2 * corr @ w + w @ gram @ w) + lam * np.abs(w).sum())

    if record_objective:
        history.append(objective())
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_move = 0.0
        for j in range(k):
            if diag[j] == 0.0:
                continue
            old = w[j]
            rho = grad[j] + diag[j] * old
            new = _soft_threshold(rho, lam) / diag[j]
            move = new - old
            if move != 0.0:
                w[j] = new
                grad -= gram[:, j] * move
                max_move = max(max_move, abs(move))
        if record_objective:
            history.append(objective())
        if max_move < tol:
            converged = True
            break
    intercept = float(ybar - xbar @ w)
    return FitResult(
        w,
        intercept,
        iterations=it,
        converged=converged,
        column_names=names,
        objective_history=history,
    )
