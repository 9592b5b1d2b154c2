"""Performance metrics and report artifacts.

Sharpe is annualised with sqrt(252) and a zero risk-free rate; drawdown is
measured on the compounded equity curve starting at 1.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .regression import ols_fit

TRADING_DAYS = 252
MIN_OBS = 20
SUMMARY_COLUMNS = ("sharpe", "beta", "max_drawdown", "cumulative_return")


@dataclass(frozen=True)
class MetricsSummary:
    sharpe: float
    beta: float
    max_drawdown: float
    cumulative_return: float

    def as_row(self) -> list[float]:
        return [self.sharpe, self.beta, self.max_drawdown, self.cumulative_return]


def _clean(values) -> np.ndarray:
    r = np.asarray(values, dtype=float).ravel()
    if np.isnan(r).any():
        raise DataError("return series contains missing values")
    return r


def sharpe(daily_returns) -> float:
    r = _clean(daily_returns)
    if len(r) < MIN_OBS:
        raise DataError(f"Sharpe needs at least {MIN_OBS} observations, got {len(r)}")
    sd = r.std(ddof=1)
    if sd == 0 or sd < 1e-15 * max(1.0, abs(r.mean())):
        raise NumericalError("degenerate return series")
    return float(r.mean() / sd * np.sqrt(TRADING_DAYS))


def strategy_beta(daily_returns, benchmark_returns) -> float:
    """OLS slope of strategy returns on benchmark returns."""
    r = _clean(daily_returns)
    b = _clean(benchmark_returns)
    if len(r) != len(b):
        raise DataError("strategy and benchmark series are not aligned")
    if len(r) < MIN_OBS:
        raise DataError(f"beta needs at least {MIN_OBS} paired observations, got {len(r)}")
    if b.var() == 0:
        raise NumericalError("benchmark variance is zero")
    return float(ols_fit(b, r).coefficients[0])


def equity_curve(daily_returns) -> np.ndarray:
    """Compounded equity, starting with 1 before the first return."""
    return np.r_[1.0, np.cumprod(1.0 + _clean(daily_returns))]


def max_drawdown_from_equity(equity) -> float:
    e = np.asarray(equity, dtype=float)
    if len(e) < 2:
        raise DataError("drawdown needs at least two equity points")
    peak = np.maximum.accumulate(e)
    return float(min(0.0, np.min(e / peak - 1.0)))


def max_drawdown(daily_returns) -> float:
    r = _clean(daily_returns)
    if len(r) < 2:
        raise DataError("drawdown needs at least two observations")
    return max_drawdown_from_equity(equity_curve(r))


def cumulative_return(daily_returns) -> float:
    return float(np.prod(1.0 + _clean(daily_returns)) - 1.0)


def summarize(daily_returns, benchmark_returns) -> MetricsSummary:
    return MetricsSummary(
        sharpe=sharpe(daily_returns),
        beta=strategy_beta(daily_returns, benchmark_returns),
        max_drawdown=max_drawdown(daily_returns),
        cumulative_return=cumulative_return(daily_returns),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def summary_csv(rows: dict[str, MetricsSummary]) -> str:
    lines = ["series," + ",".join(SUMMARY_COLUMNS)]
    for name, m in rows.items():
        lines.append(name + "," + ",".join(_fmt(v) for v in m.as_row()))
    return "\n".join(lines) + "\n"


def report(daily_returns, benchmark_returns, coefficient_history, directory, stream=None) -> dict[str, MetricsSummary]:
    """Write summary.csv, equity_curve.csv and coeff_trajectory.csv; print the summary.

    Returns the strategy and benchmark summaries keyed by series name.
    """
    strat = pd.Series(daily_returns)
    bench = pd.Series(benchmark_returns)
    if len(strat) == 0:
        raise DataError("empty backtest result")
    if not strat.index.equals(bench.index):
        raise DataError("strategy and benchmark returns are not aligned")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = {
        "strategy": summarize(strat, bench),
        "benchmark": summarize(bench, bench),
    }
    text = summary_csv(rows)
    (d / "summary.csv").write_text(text, encoding="utf-8", newline="\n")

    eq_s = equity_curve(strat)[1:]
    eq_b = equity_curve(bench)[1:]
    with (d / "equity_curve.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,strategy_equity,benchmark_equity\n")
        for date, a, b in zip(strat.index, eq_s, eq_b):
            fh.write(f"{pd.Timestamp(date).strftime('%Y-%m-%d')},{_fmt(a)},{_fmt(b)}\n")

    with (d / "coeff_trajectory.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("rebalance_date,feature,weight\n")
        for date, row in coefficient_history.iterrows():
            for feature, value in row.items():
                fh.write(f"{pd.Timestamp(date).strftime('%Y-%m-%d')},{feature},{_fmt(value)}\n")

    (stream or sys.stdout).write(text)
    return rows


def report_result(result, directory, stream=None) -> dict[str, MetricsSummary]:
    return report(result.daily_returns, result.benchmark_returns, result.coefficient_history, directory, stream)
