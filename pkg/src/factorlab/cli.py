"""``factorlab`` command line.

Exit codes: 0 success, 1 bad input or configuration, 2 numerical failure
(including an empty feature selection), 3 infeasible portfolio.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import backtest, metrics
from .config import ENV_VAR, KEYS, RunConfig, flag_name, read_config_file
from .errors import ConfigError, FactorLabError, NoFeaturesSelectedError
from .feature_selection import pooled_panel, select_features
from .features import available_features, compute_features
from .market_data import SyntheticSpec, ingest_dir, write_synthetic
from .ranking import forward_returns

SELECT_KEYS = (
    "features", "fundamentals_lag_days", "rsi_window", "tsi_long", "tsi_short",
    "tm_lookback", "tm_skip", "fundamental_window", "min_corr", "corr_cap", "p_cutoff", "signs",
)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", default=None, help=f"key = value config file (default: ${ENV_VAR} if set)")
    for name in keys:
        key = KEYS[name]
        default = "auto" if key.default is None else key.default
        # argparse defaults stay None so unset flags do not mask file values
        p.add_argument(flag_name(name), dest=name, default=None, metavar=name.upper(),
                       help=f"{key.help} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorlab", description="Market-neutral multi-factor backtesting.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    d = SyntheticSpec()
    p = sub.add_parser("synth", help="write a synthetic panel with planted factors", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--securities", type=int, default=d.n_securities, help="number of securities (>= 80)")
    p.add_argument("--days", type=int, default=d.n_days, help="number of trading days")
    p.add_argument("--seed", type=int, default=d.seed, help="RNG seed; the only source of randomness")
    p.add_argument("--planted", default=",".join(f"{k}:{v}" for k, v in d.planted_betas.items()),
                   help="planted coefficients as factor:beta pairs; 'none' plants nothing")
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma, help="daily idiosyncratic volatility")
    p.add_argument("--market-sigma", type=float, default=d.market_sigma, help="daily benchmark volatility")
    p.add_argument("--beta-mean", type=float, default=d.beta_mean, help="mean market beta")
    p.add_argument("--beta-dispersion", type=float, default=d.beta_dispersion, help="half-width of the uniform beta spread")
    p.add_argument("--persistence", type=float, default=d.factor_persistence, help="monthly AR(1) persistence of factor values")
    p.add_argument("--beta-signal-link", type=float, default=d.beta_signal_link,
                   help="loading of market beta on the first planted factor's latent value")
    p.add_argument("--start-date", default=d.start_date, help="first calendar date")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest-check", help="validate panel files and print diagnostics", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="directory with the panel CSVs")
    _add_config_flags(p, ("fundamentals_lag_days",))
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("select", help="run the three-stage feature selection", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="directory with the panel CSVs")
    p.add_argument("--out", default="selection_report.csv", help="report path")
    _add_config_flags(p, SELECT_KEYS)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("backtest", help="run the monthly walk-forward backtest", formatter_class=_Formatter)
    p.add_argument("--data", required=True, help="directory with the panel CSVs")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, [k for k in KEYS if k not in ("min_corr", "corr_cap", "p_cutoff", "signs")])
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="recompute metrics from written backtest outputs", formatter_class=_Formatter)
    p.add_argument("--results", required=True, help="directory holding result.csv and coeffs.csv")
    p.add_argument("--out", default=None, help="output directory (default: the results directory)")
    p.set_defaults(func=cmd_report)
    return parser


def load_config(args: argparse.Namespace, keys) -> RunConfig:
    path = args.config or os.environ.get(ENV_VAR) or None
    file_values = read_config_file(path) if path else {}
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return RunConfig.build(file_values, overrides)


def _planted(text: str) -> dict[str, float]:
    if text.strip().lower() in ("", "none"):
        return {}
    out = {}
    for part in text.split(","):
        name, sep, value = part.partition(":")
        if not sep:
            raise ConfigError(f"planted entry {part!r} is not factor:beta")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"planted beta for {name.strip()!r} is not a number") from None
    return out


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_securities=args.securities,
        n_days=args.days,
        seed=args.seed,
        planted_betas=_planted(args.planted),
        noise_sigma=args.noise_sigma,
        market_sigma=args.market_sigma,
        beta_mean=args.beta_mean,
        beta_dispersion=args.beta_dispersion,
        factor_persistence=args.persistence,
        beta_signal_link=args.beta_signal_link,
        start_date=args.start_date,
    )
    paths = write_synthetic(spec, args.out, force=args.force)
    for path in paths.values():
        print(path)
    return 0


def cmd_ingest_check(args) -> int:
    cfg = load_config(args, ("fundamentals_lag_days",))
    store = ingest_dir(args.data, cfg["fundamentals_lag_days"])
    cal = store.calendar
    print("item,value")
    print(f"trading_days,{len(cal)}")
    print(f"first_date,{cal.dates[0].date()}")
    print(f"last_date,{cal.dates[-1].date()}")
    print(f"securities,{len(store.cusips)}")
    print(f"price_observations,{int(store.prices.notna().to_numpy().sum())}")
    print(f"fundamental_rows,{len(store.fundamentals)}")
    print(f"recommendation_rows,{len(store.recommendations)}")
    for key, count in sorted(store.diagnostics.items()):
        print(f"{key},{count}")
    return 0


def cmd_select(args) -> int:
    cfg = load_config(args, SELECT_KEYS)
    store = ingest_dir(args.data, cfg["fundamentals_lag_days"])
    names = cfg["features"] or available_features(store)
    feats = compute_features(store, cfg.indicator_params(), names)
    panel, target = pooled_panel(feats, forward_returns(store.prices.to_numpy(dtype=float)))
    try:
        kept, report = select_features(panel, target, cfg.signs(), cfg["min_corr"], cfg["corr_cap"], cfg["p_cutoff"])
    except NoFeaturesSelectedError as exc:
        exc.report.write_csv(args.out)
        raise
    report.write_csv(args.out)
    print("kept:", ",".join(kept))
    return 0


def cmd_backtest(args) -> int:
    keys = [k for k in KEYS if hasattr(args, k)]
    cfg = load_config(args, keys)
    config = cfg.backtest_config()
    store = ingest_dir(args.data, cfg["fundamentals_lag_days"])
    result = backtest.run(store, config, jobs=cfg["jobs"])
    backtest.write_outputs(result, args.out)
    metrics.report_result(result, args.out)
    return 0


def cmd_report(args) -> int:
    daily, bench, coeffs = backtest.read_result(args.results)
    metrics.report(daily, bench, coeffs, args.out or args.results)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FactorLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
