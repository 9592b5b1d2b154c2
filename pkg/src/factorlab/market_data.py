"""Point-in-time panels of prices, fundamentals, recommendations and a benchmark.

Flat-file layout (UTF-8, comma separated)::

    prices.csv           date,cusip,close
    fundamentals.csv     date,cusip,factor,value,available_date
    recommendations.csv  announce_date,cusip,score
    benchmark.csv        date,level

Prices are taken to be split/dividend adjusted closes. Missing observations
are absent rows (NaN in the dense price matrix), never zeros.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PRICES_FILE = "prices.csv"
FUNDAMENTALS_FILE = "fundamentals.csv"
RECOMMENDATIONS_FILE = "recommendations.csv"
BENCHMARK_FILE = "benchmark.csv"
TRUTH_FILE = "truth.csv"

PRICE_COLUMNS = ("date", "cusip", "close")
FUNDAMENTAL_COLUMNS = ("date", "cusip", "factor", "value", "available_date")
RECOMMENDATION_COLUMNS = ("announce_date", "cusip", "score")
BENCHMARK_COLUMNS = ("date", "level")

_CUSIP_RE = re.compile(r"^[0-9A-Za-z]{9}$")

# Raw fundamentals the synthetic generator emits; same names the default
# eleven-feature model expects.
SYNTHETIC_FACTORS = (
    "rd_sales",
    "sales_price",
    "book_market",
    "roa",
    "accruals_assets",
    "sales_equity",
    "asset_turnover",
)


def is_valid_cusip(value) -> bool:
    return isinstance(value, str) and bool(_CUSIP_RE.match(value))


class TradingCalendar:
    """Strictly increasing trading dates plus the first trading day of each month."""

    def __init__(self, dates):
        idx = pd.DatetimeIndex(pd.to_datetime(dates)).normalize()
        if len(idx) == 0:
            raise DataError("trading calendar is empty")
        if not idx.is_monotonic_increasing or idx.has_duplicates:
            raise DataError("trading calendar dates must be strictly increasing")
        self.dates = idx
        months = idx.year * 12 + idx.month
        first = np.ones(len(idx), dtype=bool)
        first[1:] = months[1:] != months[:-1]
        self.month_start_positions = np.flatnonzero(first)
        self.month_starts = idx[first]

    def __len__(self) -> int:
        return len(self.dates)

    def __contains__(self, date) -> bool:
        return pd.Timestamp(date).normalize() in self.dates

    def position(self, date) -> int:
        """Index of ``date`` in the calendar; DataError naming the nearest date otherwise."""
        ts = pd.Timestamp(date).normalize()
        pos = self.dates.searchsorted(ts)
        if pos < len(self.dates) and self.dates[pos] == ts:
            return int(pos)
        raise DataError(
            f"{ts.date()} is not a trading date; nearest valid date is {self.nearest(ts).date()}"
        )

    def nearest(self, date) -> pd.Timestamp:
        ts = pd.Timestamp(date).normalize()
        pos = self.dates.searchsorted(ts)
        candidates = [p for p in (pos - 1, pos) if 0 <= p < len(self.dates)]
        best = min(candidates, key=lambda p: abs(self.dates[p] - ts))
        return self.dates[best]

    def first_on_or_after(self, dates) -> np.ndarray:
        """Calendar position of the first trading day >= each date (len(self) if none)."""
        return self.dates.searchsorted(pd.DatetimeIndex(dates), side="left")


@dataclass(frozen=True)
class PanelStore:
    """Immutable container for the four input panels.

    ``prices`` is a dense (trading date x cusip) frame with NaN for missing
    closes. ``fundamentals`` and ``recommendations`` stay in long form with
    their availability stamps so point-in-time queries are exact.
    """

    calendar: TradingCalendar
    prices: pd.DataFrame
    fundamentals: pd.DataFrame
    recommendations: pd.DataFrame
    benchmark: pd.Series
    diagnostics: Mapping[str, int] = field(default_factory=dict)
    truth: pd.Series | None = None

    def __post_init__(self):
        self.validate()

    @property
    def cusips(self) -> list[str]:
        return list(self.prices.columns)

    def validate(self) -> None:
        if not self.prices.index.equals(self.calendar.dates):
            raise DataError("price index must equal the trading calendar")
        values = self.prices.to_numpy()
        present = ~np.isnan(values)
        if np.any(values[present] <= 0):
            raise DataError("prices must be strictly positive")
        if self.prices.columns.has_duplicates:
            raise DataError("duplicate cusip columns in price panel")
        bad = [c for c in self.prices.columns if not is_valid_cusip(c)]
        if bad:
            raise DataError(f"malformed cusip {bad[0]!r} in price panel")
        if not self.benchmark.index.equals(self.calendar.dates):
            raise DataError("benchmark index must equal the trading calendar")

    def as_of(self, query_date) -> "Snapshot":
        return as_of(self, query_date)


@dataclass(frozen=True)
class Snapshot:
    """Everything observable at the close of ``date``."""

    date: pd.Timestamp
    prices: pd.DataFrame
    fundamentals: pd.DataFrame
    recommendations: pd.DataFrame
    benchmark: pd.Series

    def is_empty(self) -> bool:
        return (
            self.prices.notna().sum().sum() == 0
            and self.fundamentals.empty
            and self.recommendations.empty
            and self.benchmark.notna().sum() == 0
        )


def as_of(store: PanelStore, query_date) -> Snapshot:
    """Return the observations whose availability date is on or before ``query_date``.

    Prices and benchmark levels become available on their own date,
    fundamentals on ``available_date``, recommendations on ``announce_date``.
    """
    pos = store.calendar.position(query_date)
    ts = store.calendar.dates[pos]
    fund = store.fundamentals
    recs = store.recommendations
    return Snapshot(
        date=ts,
        prices=store.prices.iloc[: pos + 1],
        fundamentals=fund[fund["available_date"] <= ts],
        recommendations=recs[recs["announce_date"] <= ts],
        benchmark=store.benchmark.iloc[: pos + 1],
    )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _read_csv(path: Path, columns: tuple[str, ...]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path.name}: unreadable CSV ({exc})") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path.name}: file is empty, expected header {','.join(columns)}") from exc
    header = [c.strip() for c in frame.columns]
    frame.columns = header
    for col in columns:
        if col not in header:
            raise DataError(f"{path.name}: missing column {col!r}")
    for col in header:
        if col not in columns:
            raise DataError(f"{path.name}: unexpected column {col!r}")
    return frame[list(columns)]


def _parse_dates(frame: pd.DataFrame, col: str, fname: str, allow_blank=False) -> pd.Series:
    raw = frame[col].str.strip()
    blank = raw == ""
    parsed = pd.to_datetime(raw.where(~blank), format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna() & ~(blank & allow_blank)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{fname}: column {col!r} has invalid date {frame[col].iloc[row]!r} at line {row + 2}")
    return parsed


def _parse_numbers(frame: pd.DataFrame, col: str, fname: str) -> pd.Series:
    parsed = pd.to_numeric(frame[col].str.strip(), errors="coerce")
    bad = parsed.isna() | ~np.isfinite(parsed)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{fname}: column {col!r} has invalid number {frame[col].iloc[row]!r} at line {row + 2}")
    return parsed.astype(float)


def _check_duplicates(frame: pd.DataFrame, keys: list[str], fname: str) -> None:
    dup = frame.duplicated(subset=keys, keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        where = ", ".join(f"{k}={frame[k].iloc[row]}" for k in keys)
        raise DataError(f"{fname}: duplicate key ({where}) at line {frame.index[row] + 2}")


def ingest(
    prices_file,
    fundamentals_file,
    recommendations_file,
    benchmark_file,
    fundamentals_lag_days: int = 0,
) -> PanelStore:
    """Load the four flat files into a validated :class:`PanelStore`.

    Rows with non-positive prices or malformed CUSIPs are dropped and
    counted in ``store.diagnostics``. A blank ``available_date`` defaults to
    the observation date plus ``fundamentals_lag_days`` calendar days.
    """
    if fundamentals_lag_days < 0:
        raise ConfigError("fundamentals_lag_days must be >= 0")
    diagnostics: dict[str, int] = {}

    # prices
    fname = Path(prices_file).name
    raw = _read_csv(prices_file, PRICE_COLUMNS)
    raw["cusip"] = raw["cusip"].str.strip()
    raw["date"] = _parse_dates(raw, "date", fname)
    raw["close"] = _parse_numbers(raw, "close", fname)
    bad_cusip = ~raw["cusip"].map(is_valid_cusip)
    bad_price = ~bad_cusip & (raw["close"] <= 0)
    diagnostics["prices_malformed_cusip"] = int(bad_cusip.sum())
    diagnostics["prices_nonpositive"] = int(bad_price.sum())
    prices_long = raw[~(bad_cusip | bad_price)]
    _check_duplicates(prices_long, ["date", "cusip"], fname)
    if prices_long.empty:
        raise DataError(f"{fname}: no valid price rows")
    prices = prices_long.pivot(index="date", columns="cusip", values="close").sort_index()
    prices = prices.reindex(columns=sorted(prices.columns))
    prices.index.name = "date"
    prices.columns.name = "cusip"
    calendar = TradingCalendar(prices.index)
    prices.index = calendar.dates

    # fundamentals
    fname = Path(fundamentals_file).name
    raw = _read_csv(fundamentals_file, FUNDAMENTAL_COLUMNS)
    raw["cusip"] = raw["cusip"].str.strip()
    raw["factor"] = raw["factor"].str.strip()
    raw["date"] = _parse_dates(raw, "date", fname)
    raw["value"] = _parse_numbers(raw, "value", fname)
    avail = _parse_dates(raw, "available_date", fname, allow_blank=True)
    raw["available_date"] = avail.fillna(raw["date"] + pd.Timedelta(days=fundamentals_lag_days))
    bad = ~raw["cusip"].map(is_valid_cusip)
    diagnostics["fundamentals_malformed_cusip"] = int(bad.sum())
    fundamentals = raw[~bad]
    _check_duplicates(fundamentals, ["date", "cusip", "factor"], fname)
    fundamentals = _normalise_fundamentals(fundamentals)

    # recommendations
    fname = Path(recommendations_file).name
    raw = _read_csv(recommendations_file, RECOMMENDATION_COLUMNS)
    raw["cusip"] = raw["cusip"].str.strip()
    raw["announce_date"] = _parse_dates(raw, "announce_date", fname)
    raw["score"] = _parse_numbers(raw, "score", fname)
    bad = ~raw["cusip"].map(is_valid_cusip)
    diagnostics["recommendations_malformed_cusip"] = int(bad.sum())
    recs = raw[~bad]
    _check_duplicates(recs, ["announce_date", "cusip"], fname)
    recs = _normalise_recommendations(recs)

    # benchmark
    fname = Path(benchmark_file).name
    raw = _read_csv(benchmark_file, BENCHMARK_COLUMNS)
    raw["date"] = _parse_dates(raw, "date", fname)
    raw["level"] = _parse_numbers(raw, "level", fname)
    _check_duplicates(raw, ["date"], fname)
    if (raw["level"] <= 0).any():
        row = int(np.flatnonzero((raw["level"] <= 0).to_numpy())[0])
        raise DataError(f"{fname}: non-positive benchmark level at line {row + 2}")
    on_cal = raw["date"].isin(calendar.dates)
    diagnostics["benchmark_off_calendar"] = int((~on_cal).sum())
    benchmark = raw[on_cal].set_index("date")["level"].reindex(calendar.dates)
    benchmark.name = "level"

    rejected = {k: v for k, v in diagnostics.items() if v}
    if rejected:
        logger.warning("ingest rejected rows: %s", rejected)
    return PanelStore(calendar, prices, fundamentals, recs, benchmark, diagnostics)


def ingest_dir(directory, fundamentals_lag_days: int = 0) -> PanelStore:
    d = Path(directory)
    return ingest(
        d / PRICES_FILE,
        d / FUNDAMENTALS_FILE,
        d / RECOMMENDATIONS_FILE,
        d / BENCHMARK_FILE,
        fundamentals_lag_days=fundamentals_lag_days,
    )


def _normalise_fundamentals(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.loc[:, list(FUNDAMENTAL_COLUMNS)].copy()
    out["value"] = out["value"].astype(float)
    out = out.sort_values(["cusip", "factor", "available_date", "date"], kind="mergesort")
    return out.reset_index(drop=True)


def _normalise_recommendations(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.loc[:, list(RECOMMENDATION_COLUMNS)].copy()
    out["score"] = out["score"].astype(float)
    out = out.sort_values(["cusip", "announce_date"], kind="mergesort")
    return out.reset_index(drop=True)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _fmt_dates(s: pd.Series) -> pd.Series:
    return pd.to_datetime(s).dt.strftime("%Y-%m-%d")


def export(store: PanelStore, directory) -> dict[str, Path]:
    """Write ``store`` as the four flat files; re-ingesting yields an equal store."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {}

    prices = store.prices.stack().rename("close").reset_index()
    prices.columns = ["date", "cusip", "close"]
    prices = prices.sort_values(["date", "cusip"], kind="mergesort")
    prices["date"] = _fmt_dates(prices["date"])
    paths["prices"] = d / PRICES_FILE
    prices.to_csv(paths["prices"], index=False, lineterminator="\n")

    fund = store.fundamentals.sort_values(["date", "cusip", "factor"], kind="mergesort").copy()
    fund["date"] = _fmt_dates(fund["date"])
    fund["available_date"] = _fmt_dates(fund["available_date"])
    paths["fundamentals"] = d / FUNDAMENTALS_FILE
    fund.to_csv(paths["fundamentals"], index=False, columns=list(FUNDAMENTAL_COLUMNS), lineterminator="\n")

    recs = store.recommendations.sort_values(["announce_date", "cusip"], kind="mergesort").copy()
    recs["announce_date"] = _fmt_dates(recs["announce_date"])
    paths["recommendations"] = d / RECOMMENDATIONS_FILE
    recs.to_csv(paths["recommendations"], index=False, columns=list(RECOMMENDATION_COLUMNS), lineterminator="\n")

    bench = store.benchmark.dropna().rename("level").reset_index()
    bench.columns = ["date", "level"]
    bench["date"] = _fmt_dates(bench["date"])
    paths["benchmark"] = d / BENCHMARK_FILE
    bench.to_csv(paths["benchmark"], index=False, lineterminator="\n")
    return paths


def read_truth(path) -> pd.Series:
    frame = _read_csv(Path(path), ("factor", "beta"))
    return pd.Series(_parse_numbers(frame, "beta", Path(path).name).to_numpy(), index=frame["factor"].str.strip(), name="beta")


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic panel generator.

    Raw fundamentals are published on the last trading day of every month.
    Over the trading days up to the next publication each security drifts
    by ``sum(planted_betas[f] * z_f) / 21`` per day, so its forward 21-day
    log return is the planted linear combination of clipped cross-sectional
    z-scores plus noise. ``noise_sigma`` is the daily idiosyncratic
    volatility; ``market_sigma`` the daily benchmark volatility.
    """

    n_securities: int = 120
    n_days: int = 1512
    seed: int = 0
    planted_betas: Mapping[str, float] = field(default_factory=lambda: {"book_market": 0.006})
    noise_sigma: float = 0.02
    factors: tuple[str, ...] = SYNTHETIC_FACTORS
    market_sigma: float = 0.01
    market_drift: float = 0.0002
    beta_mean: float = 1.0
    beta_dispersion: float = 0.3
    factor_persistence: float = 0.8
    beta_signal_link: float = 0.0
    rec_frequency: float = 1 / 42
    start_date: str = "2010-01-04"

    def __post_init__(self):
        if self.n_securities < 80:
            raise ConfigError(
                f"n_securities must be >= 80 (40 long + 40 short), got {self.n_securities}"
            )
        if self.n_days < 2:
            raise ConfigError("n_days must be >= 2")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")
        if self.market_sigma < 0 or self.beta_dispersion < 0:
            raise ConfigError("market_sigma and beta_dispersion must be >= 0")
        if not 0 <= self.factor_persistence <= 1:
            raise ConfigError("factor_persistence must lie in [0, 1]")
        unknown = set(self.planted_betas) - set(self.factors)
        if unknown:
            raise ConfigError(f"planted factor {sorted(unknown)[0]!r} is not among the generated factors")

    def all_betas(self) -> dict[str, float]:
        return {f: float(self.planted_betas.get(f, 0.0)) for f in self.factors}


def synthetic_cusip(i: int) -> str:
    return f"SYN{i:05d}X"


def generate_synthetic(spec: SyntheticSpec) -> PanelStore:
    """Deterministic panel with the factor structure described on :class:`SyntheticSpec`."""
    from .features import zscore_cross_section

    rng = np.random.default_rng(spec.seed)
    n, t_len = spec.n_securities, spec.n_days
    factors = list(spec.factors)
    betas = spec.all_betas()
    dates = pd.bdate_range(spec.start_date, periods=t_len)
    calendar = TradingCalendar(dates)
    cusips = [synthetic_cusip(i) for i in range(n)]

    month_key = dates.year * 12 + dates.month
    is_month_end = np.r_[month_key[1:] != month_key[:-1], True]
    publish = np.flatnonzero(is_month_end)
    n_pub = len(publish)

    rho = spec.factor_persistence
    latent = np.empty((n_pub, n, len(factors)))
    latent[0] = rng.standard_normal((n, len(factors)))
    for m in range(1, n_pub):
        latent[m] = rho * latent[m - 1] + np.sqrt(1 - rho**2) * rng.standard_normal((n, len(factors)))
    loc = 1.0 + rng.uniform(0, 2, size=len(factors))
    scale = 0.1 * loc
    raw = loc + scale * latent

    z = np.empty_like(raw)
    for m in range(n_pub):
        for k in range(len(factors)):
            z[m, :, k] = zscore_cross_section(raw[m, :, k])
    beta_vec = np.array([betas[f] for f in factors])
    expected = z @ beta_vec  # (n_pub, n): forward 21-day log return

    # publication m drives the days after publish[m] up to publish[m + 1]
    drift = np.zeros((t_len, n))
    regime = np.searchsorted(publish, np.arange(t_len), side="left") - 1
    live = regime >= 0
    drift[live] = expected[regime[live]] / 21.0

    idio_beta = rng.standard_normal(n)
    planted = [k for k, f in enumerate(factors) if betas[f] != 0.0]
    link = np.zeros((t_len, n))
    if spec.beta_signal_link and planted:
        link[live] = spec.beta_signal_link * z[regime[live], :, planted[0]]
    market_beta = spec.beta_mean + spec.beta_dispersion * idio_beta + link

    market = rng.normal(spec.market_drift, spec.market_sigma, size=t_len) if spec.market_sigma > 0 else np.full(t_len, spec.market_drift)
    market[0] = 0.0
    eps = rng.standard_normal((t_len, n)) * spec.noise_sigma
    eps[0] = 0.0
    dlog = drift + market_beta * market[:, None] + eps
    p0 = 50.0 * np.exp(rng.normal(0, 0.5, size=n))
    prices = pd.DataFrame(p0 * np.exp(np.cumsum(dlog, axis=0)), index=calendar.dates, columns=cusips)
    prices.index.name = "date"
    prices.columns.name = "cusip"
    benchmark = pd.Series(1000.0 * np.exp(np.cumsum(market)), index=calendar.dates, name="level")

    pub_dates = calendar.dates[publish]
    fund = pd.DataFrame(
        {
            "date": np.repeat(pub_dates, n * len(factors)),
            "cusip": np.tile(np.repeat(cusips, len(factors)), n_pub),
            "factor": np.tile(factors, n_pub * n),
            "value": raw.reshape(-1),
        }
    )
    fund["available_date"] = fund["date"]

    rec_rows = []
    for i, c in enumerate(cusips):
        days = np.flatnonzero(rng.random(t_len) < spec.rec_frequency)
        score = float(rng.integers(2, 9)) / 2.0
        for d in days:
            score = float(np.clip(score + 0.5 * rng.integers(-1, 2), 1.0, 5.0))
            rec_rows.append((calendar.dates[d], c, score))
    recs = pd.DataFrame(rec_rows, columns=list(RECOMMENDATION_COLUMNS))

    truth = pd.Series(betas, name="beta")
    truth.index.name = "factor"
    return PanelStore(
        calendar,
        prices,
        _normalise_fundamentals(fund),
        _normalise_recommendations(recs),
        benchmark,
        {},
        truth,
    )


def write_synthetic(spec: SyntheticSpec, directory, force: bool = False) -> dict[str, Path]:
    """Generate a panel and write the four CSVs plus ``truth.csv``."""
    d = Path(directory)
    names = [PRICES_FILE, FUNDAMENTALS_FILE, RECOMMENDATIONS_FILE, BENCHMARK_FILE, TRUTH_FILE]
    existing = [name for name in names if (d / name).exists()]
    if existing and not force:
        raise DataError(f"{d / existing[0]} already exists (use --force to overwrite)")
    store = generate_synthetic(spec)
    paths = export(store, d)
    paths["truth"] = d / TRUTH_FILE
    store.truth.rename("beta").reset_index().to_csv(paths["truth"], index=False, lineterminator="\n")
    return paths
