"""Shared fixtures: a seeded synthetic panel, its features and a default backtest."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from factorlab.backtest import BacktestConfig, run
from factorlab.features import DEFAULT_FEATURES, compute_features
from factorlab.market_data import (
    FUNDAMENTAL_COLUMNS,
    RECOMMENDATION_COLUMNS,
    PanelStore,
    SyntheticSpec,
    TradingCalendar,
    generate_synthetic,
)


def make_store(prices, benchmark=None, fundamentals=None, recommendations=None, start="2020-01-01"):
    """PanelStore from a (T x N) price array on a business-day calendar."""
    p = np.asarray(prices, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    dates = pd.bdate_range(start, periods=len(p))
    cal = TradingCalendar(dates)
    cusips = [f"TST{i:05d}X" for i in range(p.shape[1])]
    frame = pd.DataFrame(p, index=cal.dates, columns=cusips)
    bench = np.full(len(p), 100.0) if benchmark is None else np.asarray(benchmark, dtype=float)
    fund = fundamentals if fundamentals is not None else pd.DataFrame(columns=list(FUNDAMENTAL_COLUMNS))
    recs = recommendations if recommendations is not None else pd.DataFrame(columns=list(RECOMMENDATION_COLUMNS))
    return PanelStore(cal, frame, fund, recs, pd.Series(bench, index=cal.dates, name="level"))


def write_csv(path: Path, header: str, rows) -> Path:
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def synth_store():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def synth_features(synth_store):
    return compute_features(synth_store, names=DEFAULT_FEATURES)


@pytest.fixture(scope="session")
def rpp_result(synth_store, synth_features):
    return run(synth_store, BacktestConfig(), features=synth_features)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
