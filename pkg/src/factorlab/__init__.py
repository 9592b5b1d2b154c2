"""Market-neutral multi-factor backtesting engine."""

from .backtest import BacktestConfig, BacktestResult, run, verify_no_leak
from .features import DEFAULT_FEATURES, IndicatorParams, compute_features
from .market_data import PanelStore, SyntheticSpec, as_of, generate_synthetic, ingest, ingest_dir

__all__ = [
    "BacktestConfig",
    "BacktestResult",
    "DEFAULT_FEATURES",
    "IndicatorParams",
    "PanelStore",
    "SyntheticSpec",
    "as_of",
    "compute_features",
    "generate_synthetic",
    "ingest",
    "ingest_dir",
    "run",
    "verify_no_leak",
]

__version__ = "0.1.0"
