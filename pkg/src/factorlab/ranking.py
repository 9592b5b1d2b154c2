"""Walk-forward training windows, Lasso scoring and long/short selection.

Timing convention: a rebalance on trading day ``t`` is decided before day
``t`` trades, so it may only use information dated ``t - 1`` or earlier.
Prediction rows are the features at ``t - 1``; training rows pair the
features at ``t - k`` with the return from ``t - k`` to ``t - k + 21`` for
``k`` in [22, 252], so every target ends no later than ``t - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import InsufficientHistoryError, UniverseTooSmallError
from .features import FeaturePanel
from .market_data import PanelStore
from .regression import lasso_fit

logger = logging.getLogger(__name__)

HORIZON = 21
MIN_TRAINING_LAG = 22
MAX_TRAINING_LAG = 252
ELIGIBILITY_HISTORY = 252
MIN_TRAINING_ROWS = 500
MIN_UNIVERSE = 80
FULL_SIDE = 40


def forward_returns(prices: np.ndarray, horizon: int = HORIZON) -> np.ndarray:
    """``out[s, i] = P[s + horizon, i] / P[s, i] - 1`` (NaN where either close is missing)."""
    p = np.asarray(prices, dtype=float)
    out = np.full(p.shape, np.nan)
    if len(p) > horizon:
        out[:-horizon] = p[horizon:] / p[:-horizon] - 1.0
    return out


@dataclass(frozen=True)
class WalkForwardWindow:
    rebalance_date: pd.Timestamp
    feature_names: list[str]
    X_train: np.ndarray
    y_train: np.ndarray
    train_positions: np.ndarray  # calendar position of each training row's feature date
    train_cusips: np.ndarray
    X_pred: np.ndarray
    pred_cusips: list[str]


@dataclass
class RankedSignal:
    rebalance_date: pd.Timestamp
    expected_returns: pd.Series
    longs: list[str]
    shorts: list[str]
    fitted_coefficients: pd.Series
    intercept: float
    converged: bool = True
    warnings: list[str] = field(default_factory=list)

    def side(self, cusip: str) -> str:
        if cusip in self.longs:
            return "long"
        if cusip in self.shorts:
            return "short"
        return "none"


def eligible_universe(store: PanelStore, features: FeaturePanel, position: int) -> np.ndarray:
    """Mask of securities with complete features at ``position - 1`` and a full price history."""
    lo = position - ELIGIBILITY_HISTORY
    if lo < 0:
        return np.zeros(len(features.cusips), dtype=bool)
    complete = ~np.isnan(features.z[position - 1]).any(axis=1)
    history = ~np.isnan(store.prices.to_numpy(dtype=float)[lo:position]).any(axis=0)
    return complete & history


def build_window(
    store: PanelStore,
    features: FeaturePanel,
    rebalance_date,
    forward: np.ndarray | None = None,
) -> WalkForwardWindow:
    """Assemble training and prediction rows for one rebalance date."""
    pos = store.calendar.position(rebalance_date)
    min_lag, max_lag = MIN_TRAINING_LAG, MAX_TRAINING_LAG
    if pos < max_lag:
        raise InsufficientHistoryError(
            f"rebalance {store.calendar.dates[pos].date()} has only {pos} prior trading days; "
            f"{max_lag} are needed, start the backtest later"
        )
    if forward is None:
        forward = forward_returns(store.prices.to_numpy(dtype=float))
    days = np.arange(pos - max_lag, pos - min_lag + 1)
    z = features.z[days]  # (days, N, F)
    y = forward[days]  # (days, N)
    ok = ~np.isnan(z).any(axis=2) & ~np.isnan(y)
    d_idx, s_idx = np.nonzero(ok)
    cusips = np.asarray(features.cusips)
    elig = eligible_universe(store, features, pos)
    return WalkForwardWindow(
        rebalance_date=store.calendar.dates[pos],
        feature_names=list(features.names),
        X_train=z[d_idx, s_idx],
        y_train=y[d_idx, s_idx],
        train_positions=days[d_idx],
        train_cusips=cusips[s_idx],
        X_pred=features.z[pos - 1][elig],
        pred_cusips=list(cusips[elig]),
    )


def side_size(universe: int, full: int = FULL_SIDE) -> int:
    """Names per side: 40, shrinking to floor(U / 2.5) for 80 <= U < 100."""
    if universe < MIN_UNIVERSE:
        raise UniverseTooSmallError(f"universe too small: {universe} eligible securities, need {MIN_UNIVERSE}")
    return min(full, int(universe // 2.5))


def select_long_short(expected: pd.Series, k: int) -> tuple[list[str], list[str]]:
    """Top-k and bottom-k of one total order: descending return, ties by cusip."""
    order = sorted(expected.index, key=lambda c: (-expected[c], c))
    return order[:k], order[-k:][::-1]


def rank(window: WalkForwardWindow, lam: float = 0.001, max_iter: int = 10000, tol: float = 1e-8, n_side: int = FULL_SIDE) -> RankedSignal:
    """Fit the pooled Lasso on the training rows and pick the long/short lists."""
    date = window.rebalance_date
    if len(window.y_train) < MIN_TRAINING_ROWS:
        raise InsufficientHistoryError(
            f"{date.date()}: only {len(window.y_train)} training rows (need {MIN_TRAINING_ROWS}); start the backtest later"
        )
    k = side_size(len(window.pred_cusips), n_side)
    fit = lasso_fit(window.X_train, window.y_train, lam, max_iter=max_iter, tol=tol, column_names=window.feature_names)
    warnings = []
    if not fit.converged:
        msg = f"{date.date()}: Lasso did not converge in {fit.iterations} sweeps"
        logger.warning(msg)
        warnings.append(msg)
    expected = pd.Series(fit.predict(window.X_pred), index=window.pred_cusips, name="expected_return")
    longs, shorts = select_long_short(expected, k)
    return RankedSignal(
        rebalance_date=date,
        expected_returns=expected,
        longs=longs,
        shorts=shorts,
        fitted_coefficients=pd.Series(fit.coefficients, index=window.feature_names, name="weight"),
        intercept=fit.intercept,
        converged=fit.converged,
        warnings=warnings,
    )
