"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment. Command-line flags
override file values, which override the defaults below. Unknown keys are
rejected and every value is validated before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .backtest import BacktestConfig
from .errors import ConfigError
from .feature_selection import parse_signs
from .features import DEFAULT_FEATURES, IndicatorParams

ENV_VAR = "FACTORLAB_CONFIG"


def _str_or_none(v: str):
    v = v.strip()
    return None if v.lower() in ("", "none", "auto") else v


def _features(v: str):
    v = v.strip()
    if v.lower() in ("", "none", "auto"):
        return None
    if v.lower() == "default":
        return DEFAULT_FEATURES
    names = tuple(x.strip() for x in v.split(",") if x.strip())
    if not names:
        raise ValueError("empty feature list")
    return names


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS = {
    k.name: k
    for k in [
        Key("start_date", _str_or_none, None, "first rebalance on or after this date (YYYY-MM-DD); auto = earliest with a full training window"),
        Key("end_date", _str_or_none, None, "last trading date of the backtest; auto = end of panel"),
        Key("method", str, "rpp", "portfolio construction: ewp, rpp or bnp"),
        Key("lambda", float, 0.001, "Lasso penalty on z-scored features"),
        Key("lasso_max_iter", int, 10000, "maximum coordinate-descent sweeps"),
        Key("lasso_tol", float, 1e-8, "convergence tolerance on the largest coefficient move"),
        Key("rsi_window", int, 14, "RSI averaging window (periods)"),
        Key("tsi_long", int, 25, "TSI first EMA span"),
        Key("tsi_short", int, 13, "TSI second EMA span"),
        Key("tm_lookback", int, 252, "trended-momentum lookback (trading days)"),
        Key("tm_skip", int, 21, "trailing days excluded from trended momentum"),
        Key("fundamental_window", int, 6, "rolling window of the fundamental deltas (observations)"),
        Key("fundamentals_lag_days", int, 0, "availability lag for fundamentals rows without available_date"),
        Key("cov_window", int, 252, "covariance estimation window (trading days)"),
        Key("shrinkage", float, 0.1, "minimum covariance shrinkage towards the diagonal"),
        Key("beta_window", int, 756, "beta estimation window (trading days)"),
        Key("features", _features, None, "comma-separated feature list; 'default' = the eleven-feature model"),
        Key("n_side", int, 40, "securities per side before small-universe shrinking"),
        Key("min_corr", float, 0.01, "stage-1 minimum |correlation| with forward returns"),
        Key("corr_cap", float, 0.7, "stage-3 maximum pairwise |correlation|"),
        Key("p_cutoff", float, 0.05, "stage-3 p-value cutoff"),
        Key("signs", str, "", "expected coefficient signs, e.g. book_market:+1,roa:+1"),
        Key("jobs", int, 1, "concurrent rebalance workers (output is independent of this)"),
        Key("transaction_cost_bps", float, 0.0, "reserved; must be 0"),
        Key("borrow_fee_bps", float, 0.0, "reserved; must be 0"),
    ]
}


def flag_name(key: str) -> str:
    return "--" + key.replace("_", "-")


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{p.name}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{p.name}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{p.name}:{lineno}: key {key!r} given twice")
        out[key] = value.strip()
    return out


class RunConfig(dict):
    """Parsed configuration values keyed by :data:`KEYS` names."""

    @classmethod
    def build(cls, file_values: dict[str, str] | None = None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        cfg = cls({k.name: k.default for k in KEYS.values()})
        for key, raw in (file_values or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            try:
                cfg[key] = KEYS[key].parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for {key}: {raw!r} ({exc})") from exc
        for key, value in (overrides or {}).items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            if value is None:
                continue
            if isinstance(value, str):
                try:
                    value = KEYS[key].parse(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid value for {key}: {value!r} ({exc})") from exc
            cfg[key] = value
        cfg.validate()
        return cfg

    def indicator_params(self) -> IndicatorParams:
        return IndicatorParams(
            rsi_window=self["rsi_window"],
            tsi_long=self["tsi_long"],
            tsi_short=self["tsi_short"],
            tm_lookback=self["tm_lookback"],
            tm_skip=self["tm_skip"],
            fundamental_window=self["fundamental_window"],
        )

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(
            start_date=self["start_date"],
            end_date=self["end_date"],
            method=self["method"],
            lam=self["lambda"],
            lasso_max_iter=self["lasso_max_iter"],
            lasso_tol=self["lasso_tol"],
            indicators=self.indicator_params(),
            cov_window=self["cov_window"],
            shrinkage=self["shrinkage"],
            beta_window=self["beta_window"],
            features=self["features"] or DEFAULT_FEATURES,
            n_side=self["n_side"],
            transaction_cost_bps=self["transaction_cost_bps"],
            borrow_fee_bps=self["borrow_fee_bps"],
        )

    def signs(self) -> dict[str, int]:
        return parse_signs(self["signs"])

    def validate(self) -> None:
        self.backtest_config()
        self.signs()
        if self["fundamentals_lag_days"] < 0:
            raise ConfigError("fundamentals_lag_days must be >= 0")
        if not 0 <= self["min_corr"] <= 1:
            raise ConfigError("min_corr must lie in [0, 1]")
        if not 0 < self["corr_cap"] <= 1:
            raise ConfigError("corr_cap must lie in (0, 1]")
        if not 0 < self["p_cutoff"] < 1:
            raise ConfigError("p_cutoff must lie in (0, 1)")
        if self["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
