"""Momentum indicators, fundamental/recommendation deltas and z-scored feature panels.

Every indicator has a scalar form that evaluates the latest point of a 1-D
price history, and the panel builder evaluates the same kernels at every
date so both paths agree to floating-point identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .errors import ConfigError
from .market_data import PanelStore

ZSCORE_CAP = 3.0
_DEGENERATE = 1e-12

# Eleven-feature model: RSI, R&D/sales, sales/price, book/market, B/M change,
# ROA, accruals/assets, sales/equity, S/E change, asset-turnover change,
# trended momentum.
DEFAULT_FEATURES = (
    "rsi",
    "rd_sales",
    "sales_price",
    "book_market",
    "book_market_delta",
    "roa",
    "accruals_assets",
    "sales_equity",
    "sales_equity_delta",
    "asset_turnover_delta",
    "tm",
)

PRICE_FEATURES = ("rsi", "tsi", "tm")
REC_FEATURE = "rec_delta"
DELTA_SUFFIX = "_delta"


@dataclass(frozen=True)
class IndicatorParams:
    rsi_window: int = 14
    tsi_long: int = 25
    tsi_short: int = 13
    tm_lookback: int = 252
    tm_skip: int = 21
    fundamental_window: int = 6

    def __post_init__(self):
        for name in ("rsi_window", "tsi_long", "tsi_short", "tm_lookback", "fundamental_window"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        if self.tm_skip < 0:
            raise ConfigError("tm_skip must be >= 0")
        if self.tm_lookback - self.tm_skip < 2:
            raise ConfigError("tm_lookback must exceed tm_skip by at least 2 days")


# ---------------------------------------------------------------------------
# RSI
# ---------------------------------------------------------------------------

def _rsi_kernel(diffs: np.ndarray) -> np.ndarray:
    """RSI from windows of price changes along the last axis."""
    n = diffs.shape[-1]
    gain = np.where(diffs > 0, diffs, 0.0).sum(axis=-1) / n
    loss = np.where(diffs < 0, -diffs, 0.0).sum(axis=-1) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rs = gain / loss
        out = 100.0 - 100.0 / (1.0 + rs)
    out = np.where(loss == 0, np.where(gain > 0, 100.0, 50.0), out)
    return np.where(np.isnan(gain) | np.isnan(loss), np.nan, out)


def rsi(prices, n: int = 14) -> float:
    """Relative strength index of the last ``n`` price changes.

    Uses simple averages of gains and losses. A window with no losses gives
    100, a flat window 50. Fewer than ``n + 1`` prices gives NaN.
    """
    p = np.asarray(prices, dtype=float)
    if len(p) < n + 1:
        return float("nan")
    return float(_rsi_kernel(np.diff(p[-(n + 1):])))


def rsi_series(prices, n: int = 14) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    out = np.full(len(p), np.nan)
    if len(p) >= n + 1:
        out[n:] = _rsi_kernel(sliding_window_view(np.diff(p), n))
    return out


# ---------------------------------------------------------------------------
# TSI
# ---------------------------------------------------------------------------

def ema(values, span: int) -> np.ndarray:
    """Exponential moving average with alpha = 2/(span+1), seeded with the first value."""
    x = np.asarray(values, dtype=float)
    if len(x) == 0:
        return x.copy()
    alpha = 2.0 / (span + 1.0)
    out, _ = lfilter([alpha], [1.0, -(1.0 - alpha)], x, zi=[(1.0 - alpha) * x[0]])
    return out


def tsi_series(prices, r: int = 25, s: int = 13) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    out = np.full(len(p), np.nan)
    if len(p) < 2:
        return out
    dp = np.diff(p)
    num = ema(ema(dp, r), s)
    den = ema(ema(np.abs(dp), r), s)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(np.abs(den) < _DEGENERATE, 0.0, 100.0 * num / den)
    out[1:] = val
    out[: min(len(p), r + s - 1)] = np.nan
    return out


def tsi(prices, r: int = 25, s: int = 13) -> float:
    """True strength index at the last price, both legs double smoothed.

    Needs at least ``r + s`` prices; returns 0 when the smoothed absolute
    change is numerically zero.
    """
    p = np.asarray(prices, dtype=float)
    if len(p) < r + s:
        return float("nan")
    return float(tsi_series(p, r, s)[-1])


# ---------------------------------------------------------------------------
# Trended momentum
# ---------------------------------------------------------------------------

def _tm_kernel(y: np.ndarray) -> np.ndarray:
    """Slope times R^2 of OLS of y on t = 1..T along the last axis.

    Uses slope * R^2 = Sxy^3 / (Sxx^2 Syy), which avoids the cancellation
    in 1 - SSE/TSS when the fit is weak.
    """
    t_len = y.shape[-1]
    x = np.arange(1, t_len + 1, dtype=float)
    xc = x - x.mean()
    yc = y - y.mean(axis=-1, keepdims=True)
    sxx = (xc * xc).sum()
    sxy = (yc * xc).sum(axis=-1)
    syy = (yc * yc).sum(axis=-1)
    scale = np.abs(y).max(axis=-1)
    flat = syy <= t_len * (1e-14 * scale) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (sxy / sxx) * (sxy / sxx) * (sxy / syy)
    return np.where(flat, 0.0, out)


def trended_momentum(prices, lookback: int = 252, skip: int = 21) -> float:
    """Trend clarity of the last ``lookback`` prices, excluding the final ``skip``.

    The segment ``prices[-lookback : len - skip]`` is regressed on its time
    index; the result is slope * R^2 (0 for a flat segment).
    """
    p = np.asarray(prices, dtype=float)
    if len(p) < lookback:
        return float("nan")
    seg = p[len(p) - lookback : len(p) - skip]
    return float(_tm_kernel(seg))


def trended_momentum_series(prices, lookback: int = 252, skip: int = 21) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    out = np.full(len(p), np.nan)
    if len(p) >= lookback:
        windows = sliding_window_view(p, lookback)[:, : lookback - skip]
        out[lookback - 1 :] = _tm_kernel(windows)
    return out


# ---------------------------------------------------------------------------
# Fundamentals and recommendations
# ---------------------------------------------------------------------------

def fundamental_delta(values, window: int = 6) -> float:
    """(latest - rolling mean) / |rolling mean| over the last ``window`` values."""
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return float("nan")
    mean = v[-window:].mean()
    if abs(mean) < _DEGENERATE:
        return float("nan")
    return float((v[-1] - mean) / abs(mean))


def recommendation_delta(scores, announce_dates=None, as_of=None) -> float:
    """Latest visible score minus the previous one.

    With ``announce_dates`` and ``as_of`` given, only scores announced on or
    before ``as_of`` count.
    """
    s = np.asarray(scores, dtype=float)
    if announce_dates is not None and as_of is not None:
        ann = pd.DatetimeIndex(pd.to_datetime(announce_dates))
        order = np.argsort(ann.values, kind="stable")
        visible = ann.values[order] <= np.datetime64(pd.Timestamp(as_of))
        s = s[order][visible]
    if len(s) < 2:
        return float("nan")
    return float(s[-1] - s[-2])


# ---------------------------------------------------------------------------
# Cross-sectional z-scores
# ---------------------------------------------------------------------------

def zscore_cross_section(values, cap: float = ZSCORE_CAP) -> np.ndarray:
    """Sample z-scores clipped to [-cap, cap]; NaN stays NaN.

    With fewer than two values everything is missing; a numerically flat
    cross-section maps to zeros.
    """
    x = np.asarray(values, dtype=float)
    out = np.full(x.shape, np.nan)
    ok = ~np.isnan(x)
    if ok.sum() < 2:
        return out
    v = x[ok]
    sd = v.std(ddof=1)
    if sd < _DEGENERATE:
        out[ok] = 0.0
    else:
        out[ok] = np.clip((v - v.mean()) / sd, -cap, cap)
    return out


def zscore_panel(raw: np.ndarray, cap: float = ZSCORE_CAP) -> np.ndarray:
    """Apply :func:`zscore_cross_section` to every (date, feature) slice of a T x N x F cube."""
    ok = ~np.isnan(raw)
    count = ok.sum(axis=1, keepdims=True)
    filled = np.where(ok, raw, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=1, keepdims=True) / count
        dev = np.where(ok, raw - mean, 0.0)
        sd = np.sqrt((dev * dev).sum(axis=1, keepdims=True) / (count - 1))
        z = np.clip(dev / sd, -cap, cap)
    z = np.where(sd < _DEGENERATE, 0.0, z)
    z = np.where(ok & (count >= 2), z, np.nan)
    return z


# ---------------------------------------------------------------------------
# Panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureFrame:
    """Z-scored cross-section of one date (rows: cusips, columns: features)."""

    date: pd.Timestamp
    values: pd.DataFrame


@dataclass(frozen=True)
class FeaturePanel:
    """Raw and z-scored feature cubes aligned on (date, cusip, feature).

    Entry ``[t]`` only uses information available at the close of date ``t``.
    """

    dates: pd.DatetimeIndex
    cusips: list[str]
    names: list[str]
    raw: np.ndarray
    z: np.ndarray

    def frame(self, date) -> FeatureFrame:
        pos = self.dates.get_loc(pd.Timestamp(date))
        values = pd.DataFrame(self.z[pos], index=self.cusips, columns=self.names)
        return FeatureFrame(self.dates[pos], values)

    def select(self, names: Sequence[str]) -> "FeaturePanel":
        missing = [n for n in names if n not in self.names]
        if missing:
            raise ConfigError(f"unknown feature {missing[0]!r}; available: {', '.join(self.names)}")
        idx = [self.names.index(n) for n in names]
        return FeaturePanel(self.dates, self.cusips, list(names), self.raw[:, :, idx], self.z[:, :, idx])


def available_features(store: PanelStore) -> list[str]:
    factors = sorted(store.fundamentals["factor"].unique())
    names = list(PRICE_FEATURES) + [REC_FEATURE]
    for f in factors:
        names += [f, f + DELTA_SUFFIX]
    return names


def _contiguous_runs(col: np.ndarray) -> list[slice]:
    ok = ~np.isnan(col)
    edges = np.flatnonzero(np.diff(np.r_[False, ok, False].astype(int)))
    return [slice(a, b) for a, b in zip(edges[::2], edges[1::2])]


def _price_features(prices: np.ndarray, params: IndicatorParams, wanted: set[str]) -> dict[str, np.ndarray]:
    t_len, n = prices.shape
    out = {name: np.full((t_len, n), np.nan) for name in PRICE_FEATURES if name in wanted}
    for j in range(n):
        # indicators restart after a missing close
        for sl in _contiguous_runs(prices[:, j]):
            seg = prices[sl, j]
            if "rsi" in out:
                out["rsi"][sl, j] = rsi_series(seg, params.rsi_window)
            if "tsi" in out:
                out["tsi"][sl, j] = tsi_series(seg, params.tsi_long, params.tsi_short)
            if "tm" in out:
                out["tm"][sl, j] = trended_momentum_series(seg, params.tm_lookback, params.tm_skip)
    return out


def _events_to_daily(calendar_dates, cusips, events: pd.DataFrame, value_col: str, date_col: str) -> np.ndarray:
    """Forward-fill per-cusip event values onto the trading calendar by availability.

    An event available on a non-trading day shows up on the next trading
    day. A NaN event value (e.g. an undefined delta) replaces older values.
    """
    t_len, n = len(calendar_dates), len(cusips)
    out = np.full((t_len, n), np.nan)
    if events.empty:
        return out
    pos = calendar_dates.searchsorted(pd.DatetimeIndex(events[date_col]), side="left")
    cols = events["cusip"].map({c: k for k, c in enumerate(cusips)})
    keep = (pos < t_len) & cols.notna().to_numpy()
    ev = pd.DataFrame({"pos": pos[keep], "col": cols[keep].astype(int).to_numpy(), "v": events[value_col].to_numpy()[keep]})
    # events arrive ordered by availability, so the last one per cell wins
    ev = ev.drop_duplicates(["pos", "col"], keep="last")
    grid = np.full((t_len, n), np.nan)
    grid[ev["pos"].to_numpy(), ev["col"].to_numpy()] = ev["v"].to_numpy()
    stamp = np.full((t_len, n), -1)
    stamp[ev["pos"].to_numpy(), ev["col"].to_numpy()] = ev["pos"].to_numpy()
    last = np.maximum.accumulate(stamp, axis=0)
    seen = last >= 0
    out[seen] = grid[last[seen], np.nonzero(seen)[1]]
    return out


def _fundamental_features(store: PanelStore, params: IndicatorParams, wanted: set[str]) -> dict[str, np.ndarray]:
    out = {}
    fund = store.fundamentals
    if fund.empty:
        return out
    w = params.fundamental_window
    for factor, grp in fund.groupby("factor", sort=True):
        level_name, delta_name = factor, factor + DELTA_SUFFIX
        if level_name not in wanted and delta_name not in wanted:
            continue
        grp = grp.sort_values(["cusip", "available_date", "date"], kind="mergesort")
        if level_name in wanted:
            out[level_name] = _events_to_daily(store.calendar.dates, store.cusips, grp, "value", "available_date")
        if delta_name in wanted:
            rolled = grp.groupby("cusip", sort=False)["value"].rolling(w, min_periods=w).mean()
            mean = rolled.reset_index(level=0, drop=True).reindex(grp.index).to_numpy()
            with np.errstate(divide="ignore", invalid="ignore"):
                delta = (grp["value"].to_numpy() - mean) / np.abs(mean)
            delta = np.where(np.abs(mean) < _DEGENERATE, np.nan, delta)
            ev = grp.assign(delta=delta)
            out[delta_name] = _events_to_daily(store.calendar.dates, store.cusips, ev, "delta", "available_date")
    return out


def _recommendation_feature(store: PanelStore) -> np.ndarray:
    recs = store.recommendations.sort_values(["cusip", "announce_date"], kind="mergesort")
    delta = recs.groupby("cusip", sort=False)["score"].diff()
    return _events_to_daily(
        store.calendar.dates, store.cusips, recs.assign(delta=delta.to_numpy()), "delta", "announce_date"
    )


def compute_features(
    store: PanelStore,
    params: IndicatorParams | None = None,
    names: Sequence[str] | None = None,
) -> FeaturePanel:
    """Evaluate the requested features at every trading date and z-score them per date."""
    params = params or IndicatorParams()
    names = list(names) if names is not None else available_features(store)
    if len(set(names)) != len(names):
        raise ConfigError("duplicate feature names requested")
    wanted = set(names)
    cubes: dict[str, np.ndarray] = {}
    cubes.update(_price_features(store.prices.to_numpy(dtype=float), params, wanted))
    cubes.update(_fundamental_features(store, params, wanted))
    if REC_FEATURE in wanted:
        cubes[REC_FEATURE] = _recommendation_feature(store)
    missing = [n for n in names if n not in cubes]
    if missing:
        raise ConfigError(f"feature {missing[0]!r} cannot be computed from this panel")
    raw = np.stack([cubes[n] for n in names], axis=2)
    return FeaturePanel(store.calendar.dates, store.cusips, names, raw, zscore_panel(raw))


def export_features(panel: FeaturePanel, path, dates=None) -> Path:
    """Write z-scored values as ``date,cusip,feature,value`` (missing entries omitted)."""
    path = Path(path)
    positions = range(len(panel.dates)) if dates is None else [panel.dates.get_loc(pd.Timestamp(d)) for d in dates]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,cusip,feature,value\n")
        for t in positions:
            day = panel.dates[t].strftime("%Y-%m-%d")
            block = panel.z[t]
            for i, c in enumerate(panel.cusips):
                for k, name in enumerate(panel.names):
                    v = block[i, k]
                    if not np.isnan(v):
                        fh.write(f"{day},{c},{name},{float(v)!r}\n")
    return path
