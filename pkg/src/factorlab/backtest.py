"""Monthly walk-forward backtest: signal, construct, hold, account.

Positions are set before the first trading day of each month using data
through the previous close, then held as fixed share quantities until the
next rebalance. A security that stops trading mid-month is liquidated at
its last close and sits in cash (no financing, no costs).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import ranking
from .errors import ConfigError, DataError, FactorLabError
from .features import DEFAULT_FEATURES, FeaturePanel, IndicatorParams, compute_features
from .market_data import PanelStore
from .portfolio import BNP, EWP, METHODS, RPP, PortfolioWeights, construct, estimate_betas, estimate_covariance
from .ranking import RankedSignal, build_window, forward_returns, rank

logger = logging.getLogger(__name__)

MIN_START_POSITION = 252


@dataclass(frozen=True)
class BacktestConfig:
    start_date: str | pd.Timestamp | None = None
    end_date: str | pd.Timestamp | None = None
    method: str = RPP
    lam: float = 0.001
    lasso_max_iter: int = 10000
    lasso_tol: float = 1e-8
    indicators: IndicatorParams = field(default_factory=IndicatorParams)
    cov_window: int = 252
    shrinkage: float = 0.1
    beta_window: int = 756
    features: tuple[str, ...] = DEFAULT_FEATURES
    n_side: int = ranking.FULL_SIDE
    # reserved; only zero is supported
    transaction_cost_bps: float = 0.0
    borrow_fee_bps: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "method", str(self.method).upper())
        object.__setattr__(self, "features", tuple(self.features))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(m.lower() for m in METHODS)}, got {self.method.lower()!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lasso_max_iter < 1 or self.lasso_tol <= 0:
            raise ConfigError("lasso_max_iter must be >= 1 and lasso_tol > 0")
        if self.cov_window < 2 or self.beta_window < 2:
            raise ConfigError("cov_window and beta_window must be >= 2")
        if not 0 <= self.shrinkage <= 1:
            raise ConfigError("shrinkage must lie in [0, 1]")
        if not self.features:
            raise ConfigError("feature list is empty")
        if self.n_side < 1:
            raise ConfigError("n_side must be >= 1")
        if self.transaction_cost_bps or self.borrow_fee_bps:
            raise ConfigError("transaction costs and borrow fees are not modelled; leave them at 0")

    def warmup(self) -> int:
        p = self.indicators
        return max(p.tm_lookback, p.tsi_long + p.tsi_short, p.rsi_window + 1, 22 * p.fundamental_window)

    def resolve(self, store: PanelStore) -> tuple[int, int]:
        """Calendar positions of (start, end), checking the history requirement."""
        cal = store.calendar
        if self.start_date is None:
            need = self.warmup() + ranking.MAX_TRAINING_LAG
            starts = cal.month_start_positions[cal.month_start_positions >= need]
            if len(starts) == 0:
                raise DataError(f"panel too short: need at least {need} trading days before the first rebalance")
            start = int(starts[0])
        else:
            ts = pd.Timestamp(self.start_date)
            start = int(cal.dates.searchsorted(ts, side="left"))
            if start >= len(cal):
                raise ConfigError(f"start_date {ts.date()} is after the last trading date")
        if self.end_date is None:
            end = len(cal) - 1
        else:
            ts = pd.Timestamp(self.end_date)
            end = int(cal.dates.searchsorted(ts, side="right")) - 1
        if start < MIN_START_POSITION:
            raise ConfigError(
                f"start_date must be at least {MIN_START_POSITION} trading days after {cal.dates[0].date()} "
                f"(earliest {cal.dates[MIN_START_POSITION].date() if len(cal) > MIN_START_POSITION else 'n/a'})"
            )
        if end <= start:
            raise ConfigError("end_date must be after start_date")
        return start, end

    def rebalance_positions(self, store: PanelStore) -> np.ndarray:
        start, end = self.resolve(store)
        ms = store.calendar.month_start_positions
        out = ms[(ms >= start) & (ms <= end)]
        if len(out) == 0:
            raise ConfigError("no month start between start_date and end_date")
        return out


@dataclass
class BacktestResult:
    daily_returns: pd.Series
    benchmark_returns: pd.Series
    weight_history: list[PortfolioWeights]
    coefficient_history: pd.DataFrame
    signals: list[RankedSignal]
    config: BacktestConfig

    @property
    def rebalance_dates(self) -> list[pd.Timestamp]:
        return [s.rebalance_date for s in self.signals]


def _returns_block(prices: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Simple daily returns for calendar positions lo..hi-1 (row k uses closes k-1, k)."""
    lo = max(lo, 1)
    return np.ascontiguousarray(prices[lo:hi] / prices[lo - 1 : hi - 1] - 1.0)


def rebalance(
    store: PanelStore,
    features: FeaturePanel,
    config: BacktestConfig,
    position: int,
    forward: np.ndarray | None = None,
) -> tuple[RankedSignal, PortfolioWeights]:
    """Signal and weights for the rebalance at calendar ``position``."""
    date = store.calendar.dates[position]
    window = build_window(store, features, date, forward)
    signal = rank(window, config.lam, config.lasso_max_iter, config.lasso_tol, config.n_side)
    names = signal.longs + signal.shorts
    cov = betas = None
    if config.method in (RPP, BNP):
        sub = store.prices[names].to_numpy(dtype=float)
        rets = _returns_block(sub, position - config.cov_window, position)
        cov = estimate_covariance(pd.DataFrame(rets, columns=names), config.shrinkage)
    if config.method == BNP:
        sub = store.prices[names].to_numpy(dtype=float)
        rets = _returns_block(sub, position - config.beta_window, position)
        bench = store.benchmark.to_numpy(dtype=float)
        brets = _returns_block(bench[:, None], position - config.beta_window, position)[:, 0]
        betas = estimate_betas(pd.DataFrame(rets, columns=names), brets, config.beta_window)
    weights = construct(config.method, signal.longs, signal.shorts, cov, betas, date)
    return signal, weights


def hold_period_returns(prices, weights) -> np.ndarray:
    """Daily returns of a buy-and-hold book.

    ``prices`` is (L + 1) x n with row 0 the entry closes; ``weights`` the
    signed entry weights. Position i is worth ``w_i * P_i(t) / P_i(0)``;
    short proceeds and liquidated positions sit in cash at zero return.
    """
    p = np.array(prices, dtype=float)
    w = np.asarray(weights, dtype=float)
    if p.ndim != 2 or p.shape[1] != len(w):
        raise DataError("price block and weights disagree on the number of securities")
    if np.isnan(p[0]).any():
        raise DataError("entry price missing for a selected security")
    for j in range(p.shape[1]):
        gone = np.flatnonzero(np.isnan(p[:, j]))
        if len(gone):
            p[gone[0] :, j] = p[gone[0] - 1, j]
    nav = 1.0 + (p / p[0] - 1.0) @ w
    return nav[1:] / nav[:-1] - 1.0


def _run_rebalances(store, features, config, positions, forward, jobs):
    def one(pos):
        try:
            return rebalance(store, features, config, int(pos), forward)
        except FactorLabError as exc:
            date = store.calendar.dates[int(pos)].date()
            raise type(exc)(f"backtest aborted at rebalance {date}: {exc}") from exc

    if jobs <= 1:
        return [one(p) for p in positions]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, positions))


def run(store: PanelStore, config: BacktestConfig, jobs: int = 1, features: FeaturePanel | None = None) -> BacktestResult:
    """Execute the monthly loop over every month start in the configured range."""
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    positions = config.rebalance_positions(store)
    _, end = config.resolve(store)
    if features is None:
        features = compute_features(store, config.indicators, config.features)
    prices = np.ascontiguousarray(store.prices.to_numpy(dtype=float))
    forward = forward_returns(prices)
    outcomes = _run_rebalances(store, features, config, positions, forward, jobs)

    daily = []
    bounds = list(positions[1:]) + [end + 1]
    for (signal, weights), t0, t1 in zip(outcomes, positions, bounds):
        cols = [store.prices.columns.get_loc(c) for c in weights.weights.index]
        block = prices[t0 - 1 : t1, cols]
        daily.append(hold_period_returns(block, weights.weights.to_numpy()))
        logger.info("%s: %s book, %d longs / %d shorts", signal.rebalance_date.date(), weights.method, len(signal.longs), len(signal.shorts))
    dates = store.calendar.dates[positions[0] : end + 1]
    daily_returns = pd.Series(np.concatenate(daily), index=dates, name="strategy_return")
    bench = store.benchmark.to_numpy(dtype=float)
    bench_ret = pd.Series(bench[positions[0] : end + 1] / bench[positions[0] - 1 : end] - 1.0, index=dates, name="benchmark_return")
    signals = [o[0] for o in outcomes]
    coeffs = pd.DataFrame(
        [s.fitted_coefficients.to_numpy() for s in signals],
        index=pd.DatetimeIndex([s.rebalance_date for s in signals], name="rebalance_date"),
        columns=list(features.names),
    )
    return BacktestResult(daily_returns, bench_ret, [o[1] for o in outcomes], coeffs, signals, config)


# ---------------------------------------------------------------------------
# Leak verification
# ---------------------------------------------------------------------------

@dataclass
class LeakReport:
    passed: bool
    checked: list[pd.Timestamp]
    first_divergent_date: pd.Timestamp | None = None
    detail: str = ""


def perturb_from(store: PanelStore, date, rng: np.random.Generator) -> PanelStore:
    """Copy of ``store`` with every observation dated on or after ``date`` replaced by noise."""
    pos = store.calendar.position(date)
    ts = store.calendar.dates[pos]
    prices = store.prices.copy()
    block = prices.iloc[pos:].to_numpy(dtype=float)
    noise = np.exp(rng.uniform(np.log(1.0), np.log(500.0), size=block.shape))
    prices.iloc[pos:] = np.where(np.isnan(block), np.nan, noise)
    bench = store.benchmark.copy()
    bench.iloc[pos:] = np.exp(rng.uniform(np.log(100.0), np.log(5000.0), size=len(bench) - pos))
    fund = store.fundamentals.copy()
    late = (fund["available_date"] >= ts).to_numpy()
    fund.loc[late, "value"] = rng.normal(0, 10, size=int(late.sum()))
    recs = store.recommendations.copy()
    late = (recs["announce_date"] >= ts).to_numpy()
    recs.loc[late, "score"] = rng.uniform(1, 5, size=int(late.sum()))
    return PanelStore(store.calendar, prices, fund, recs, bench, dict(store.diagnostics), store.truth)


def _same(a: tuple[RankedSignal, PortfolioWeights], b: tuple[RankedSignal, PortfolioWeights]) -> str:
    sa, wa = a
    sb, wb = b
    if list(sa.expected_returns.index) != list(sb.expected_returns.index):
        return "eligible universe differs"
    if not np.array_equal(sa.expected_returns.to_numpy(), sb.expected_returns.to_numpy()):
        return "expected returns differ"
    if sa.longs != sb.longs or sa.shorts != sb.shorts:
        return "long/short lists differ"
    if not np.array_equal(sa.fitted_coefficients.to_numpy(), sb.fitted_coefficients.to_numpy()):
        return "fitted coefficients differ"
    if list(wa.weights.index) != list(wb.weights.index) or not np.array_equal(wa.weights.to_numpy(), wb.weights.to_numpy()):
        return "portfolio weights differ"
    return ""


def verify_no_leak(
    store: PanelStore,
    config: BacktestConfig,
    result: BacktestResult | None = None,
    seed: int = 0,
    dates: Sequence | None = None,
) -> LeakReport:
    """Re-derive each rebalance from a store whose data on/after that date is random.

    Passes when every signal and weight vector is bit-identical to the
    original run; stops at the first divergent date otherwise.
    """
    if result is None:
        result = run(store, config)
    baseline = {s.rebalance_date: (s, w) for s, w in zip(result.signals, result.weight_history)}
    targets = list(baseline) if dates is None else [pd.Timestamp(d) for d in dates]
    rng = np.random.default_rng(seed)
    checked = []
    for date in targets:
        if date not in baseline:
            raise DataError(f"{date.date()} is not a rebalance date of the run")
        perturbed = perturb_from(store, date, rng)
        feats = compute_features(perturbed, config.indicators, config.features)
        pos = perturbed.calendar.position(date)
        redo = rebalance(perturbed, feats, config, pos)
        checked.append(date)
        why = _same(baseline[date], redo)
        if why:
            logger.warning("leak detected at %s: %s", date.date(), why)
            return LeakReport(False, checked, date, why)
    return LeakReport(True, checked)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _iso(ts) -> str:
    return pd.Timestamp(ts).strftime("%Y-%m-%d")


def write_outputs(result: BacktestResult, directory) -> dict[str, Path]:
    """Write result.csv, weights.csv, coeffs.csv and signals.csv."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {name: d / f"{name}.csv" for name in ("result", "weights", "coeffs", "signals")}
    with paths["result"].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,strategy_return,benchmark_return\n")
        for date, r, b in zip(result.daily_returns.index, result.daily_returns.to_numpy(), result.benchmark_returns.to_numpy()):
            fh.write(f"{_iso(date)},{float(r)!r},{float(b)!r}\n")
    with paths["weights"].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("rebalance_date,cusip,weight,method\n")
        for w in result.weight_history:
            for cusip, value in w.weights.items():
                fh.write(f"{_iso(w.rebalance_date)},{cusip},{float(value)!r},{w.method}\n")
    with paths["coeffs"].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("rebalance_date,feature,weight\n")
        for date, row in result.coefficient_history.iterrows():
            for feature, value in row.items():
                fh.write(f"{_iso(date)},{feature},{float(value)!r}\n")
    with paths["signals"].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("rebalance_date,cusip,expected_return,side\n")
        for s in result.signals:
            longs, shorts = set(s.longs), set(s.shorts)
            for cusip, value in s.expected_returns.sort_index().items():
                side = "long" if cusip in longs else "short" if cusip in shorts else "none"
                fh.write(f"{_iso(s.rebalance_date)},{cusip},{float(value)!r},{side}\n")
    return paths


def read_result(directory) -> tuple[pd.Series, pd.Series, pd.DataFrame]:
    """Load daily returns, benchmark returns and coefficient history from written outputs."""
    d = Path(directory)
    res_path, coef_path = d / "result.csv", d / "coeffs.csv"
    for p in (res_path, coef_path):
        if not p.is_file():
            raise DataError(f"missing backtest output {p}")
    res = pd.read_csv(res_path, parse_dates=["date"], float_precision="round_trip")
    expected = ["date", "strategy_return", "benchmark_return"]
    if list(res.columns) != expected:
        raise DataError(f"{res_path.name}: expected header {','.join(expected)}")
    coefs = pd.read_csv(coef_path, parse_dates=["rebalance_date"], float_precision="round_trip")
    if list(coefs.columns) != ["rebalance_date", "feature", "weight"]:
        raise DataError(f"{coef_path.name}: expected header rebalance_date,feature,weight")
    order = list(dict.fromkeys(coefs["feature"]))
    history = coefs.pivot(index="rebalance_date", columns="feature", values="weight")[order]
    return (
        res.set_index("date")["strategy_return"],
        res.set_index("date")["benchmark_return"],
        history,
    )
