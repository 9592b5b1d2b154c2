"""Ingestion, point-in-time queries and the synthetic generator."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorlab.errors import ConfigError, DataError
from factorlab.features import zscore_cross_section
from factorlab.market_data import (
    PanelStore,
    SyntheticSpec,
    TradingCalendar,
    as_of,
    export,
    generate_synthetic,
    ingest,
    ingest_dir,
    is_valid_cusip,
    read_truth,
    write_synthetic,
)
from factorlab.ranking import forward_returns

from conftest import write_csv

A, B = "037833100", "594918104"


@pytest.fixture
def panel_dir(tmp_path):
    write_csv(tmp_path / "prices.csv", "date,cusip,close", [
        f"2010-03-12,{A},10.0",
        f"2010-03-15,{A},10.5",
        f"2010-03-16,{A},10.25",
        f"2010-03-12,{B},20.0",
        f"2010-03-15,{B},19.0",
        f"2010-03-16,{B},19.5",
    ])
    write_csv(tmp_path / "fundamentals.csv", "date,cusip,factor,value,available_date", [
        f"2010-02-28,{A},book_market,0.5,2010-03-15",
        f"2010-02-28,{B},book_market,0.7,",
    ])
    write_csv(tmp_path / "recommendations.csv", "announce_date,cusip,score", [
        f"2010-03-12,{A},3.0",
        f"2010-03-16,{A},4.0",
    ])
    write_csv(tmp_path / "benchmark.csv", "date,level", [
        "2010-03-12,1000", "2010-03-15,1010", "2010-03-16,1005",
    ])
    return tmp_path


def _ingest(d, **kw):
    return ingest(d / "prices.csv", d / "fundamentals.csv", d / "recommendations.csv", d / "benchmark.csv", **kw)


# ---------------------------------------------------------------------------
# Calendar
# ---------------------------------------------------------------------------

def test_calendar_month_starts():
    cal = TradingCalendar(pd.bdate_range("2021-01-28", "2021-03-03"))
    assert [d.strftime("%Y-%m-%d") for d in cal.month_starts] == ["2021-01-28", "2021-02-01", "2021-03-01"]
    assert all(d in cal for d in cal.month_starts)


def test_calendar_rejects_unsorted_dates():
    with pytest.raises(DataError):
        TradingCalendar(["2021-01-05", "2021-01-04"])


def test_position_names_nearest_date():
    cal = TradingCalendar(pd.bdate_range("2021-01-04", periods=10))
    with pytest.raises(DataError, match="nearest valid date is 2021-01-08"):
        cal.position("2021-01-09")


@pytest.mark.parametrize("value,ok", [("037833100", True), ("03783310", False), ("0378331000", False), ("03783310-", False), (12345678, False)])
def test_cusip_validation(value, ok):
    assert is_valid_cusip(value) is ok


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def test_three_row_price_file(tmp_path, panel_dir):
    write_csv(panel_dir / "prices.csv", "date,cusip,close", [f"2010-03-12,{A},10", f"2010-03-15,{A},11", f"2010-03-16,{A},12"])
    store = _ingest(panel_dir)
    assert int(store.prices.notna().to_numpy().sum()) == 3


def test_nonpositive_price_rejected_with_count(panel_dir):
    write_csv(panel_dir / "prices.csv", "date,cusip,close", [f"2010-03-12,{A},10", f"2010-03-15,{A},-1", f"2010-03-16,{A},12"])
    store = _ingest(panel_dir)
    assert store.diagnostics["prices_nonpositive"] == 1
    assert int(store.prices.notna().to_numpy().sum()) == 2


def test_malformed_cusip_counted(panel_dir):
    with (panel_dir / "prices.csv").open("a") as fh:
        fh.write("2010-03-16,BADID,5.0\n")
    store = _ingest(panel_dir)
    assert store.diagnostics["prices_malformed_cusip"] == 1
    assert store.cusips == [A, B]


def test_missing_file_is_fatal(panel_dir):
    (panel_dir / "benchmark.csv").unlink()
    with pytest.raises(DataError, match="benchmark.csv"):
        _ingest(panel_dir)


def test_schema_mismatch_names_column(panel_dir):
    write_csv(panel_dir / "prices.csv", "date,cusip,price", [f"2010-03-12,{A},10"])
    with pytest.raises(DataError, match="close"):
        _ingest(panel_dir)


def test_duplicate_key_reports_location(panel_dir):
    with (panel_dir / "prices.csv").open("a") as fh:
        fh.write(f"2010-03-15,{A},10.6\n")
    with pytest.raises(DataError, match="line"):
        _ingest(panel_dir)


def test_blank_available_date_uses_lag(panel_dir):
    store = _ingest(panel_dir, fundamentals_lag_days=3)
    row = store.fundamentals[store.fundamentals["cusip"] == B].iloc[0]
    assert row["available_date"] == pd.Timestamp("2010-03-03")


def test_negative_lag_rejected(panel_dir):
    with pytest.raises(ConfigError):
        _ingest(panel_dir, fundamentals_lag_days=-1)


# ---------------------------------------------------------------------------
# Point in time
# ---------------------------------------------------------------------------

def test_fundamental_visible_from_availability_date(panel_dir):
    store = _ingest(panel_dir)
    before = as_of(store, "2010-03-12").fundamentals
    on = as_of(store, "2010-03-15").fundamentals
    assert A not in set(before["cusip"])
    assert A in set(on["cusip"])


def test_recommendation_announce_boundary(panel_dir):
    store = _ingest(panel_dir)
    assert len(as_of(store, "2010-03-15").recommendations) == 1
    assert len(as_of(store, "2010-03-16").recommendations) == 2


def test_as_of_last_date_is_full_panel(panel_dir):
    store = _ingest(panel_dir)
    snap = store.as_of(store.calendar.dates[-1])
    assert snap.prices.equals(store.prices)
    assert len(snap.fundamentals) == len(store.fundamentals)
    assert len(snap.recommendations) == len(store.recommendations)


def test_as_of_before_first_availability(tmp_path, panel_dir):
    write_csv(panel_dir / "fundamentals.csv", "date,cusip,factor,value,available_date", [f"2010-03-01,{A},roa,0.1,2010-03-16"])
    write_csv(panel_dir / "recommendations.csv", "announce_date,cusip,score", [f"2010-03-16,{A},3.0"])
    store = _ingest(panel_dir)
    snap = as_of(store, "2010-03-12")
    assert snap.fundamentals.empty and snap.recommendations.empty


def test_as_of_off_calendar_names_nearest(panel_dir):
    store = _ingest(panel_dir)
    with pytest.raises(DataError, match="2010-03-12"):
        as_of(store, "2010-03-13")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 59), st.integers(0, 59))
def test_pit_monotone(i, j):
    store = generate_synthetic(SyntheticSpec(n_days=60, seed=4))
    d1, d2 = sorted((store.calendar.dates[i], store.calendar.dates[j]))
    s1, s2 = as_of(store, d1), as_of(store, d2)
    assert set(s1.fundamentals.index) <= set(s2.fundamentals.index)
    assert set(s1.recommendations.index) <= set(s2.recommendations.index)
    assert len(s1.prices) <= len(s2.prices)


def test_future_mutation_leaves_snapshot_unchanged():
    store = generate_synthetic(SyntheticSpec(n_days=90, seed=2))
    d = store.calendar.dates[45]
    fund = store.fundamentals.copy()
    fund.loc[fund["available_date"] > d, "value"] = -999.0
    recs = store.recommendations.copy()
    recs.loc[recs["announce_date"] > d, "score"] = 0.0
    prices = store.prices.copy()
    prices.iloc[46:] = 1.0
    bench = store.benchmark.copy()
    bench.iloc[46:] = 1.0
    mutated = PanelStore(store.calendar, prices, fund, recs, bench)
    a, b = as_of(store, d), as_of(mutated, d)
    pd.testing.assert_frame_equal(a.prices, b.prices)
    pd.testing.assert_frame_equal(a.fundamentals, b.fundamentals)
    pd.testing.assert_frame_equal(a.recommendations, b.recommendations)
    pd.testing.assert_series_equal(a.benchmark, b.benchmark)


def test_round_trip(tmp_path):
    store = generate_synthetic(SyntheticSpec(n_days=80, seed=9))
    export(store, tmp_path)
    again = ingest_dir(tmp_path)
    pd.testing.assert_frame_equal(store.prices, again.prices, check_freq=False)
    pd.testing.assert_frame_equal(store.fundamentals, again.fundamentals)
    pd.testing.assert_frame_equal(store.recommendations, again.recommendations)
    pd.testing.assert_series_equal(store.benchmark, again.benchmark, check_freq=False)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_files_are_deterministic(tmp_path):
    spec = SyntheticSpec(n_days=120, seed=1)
    a = write_synthetic(spec, tmp_path / "a")
    b = write_synthetic(spec, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    assert read_truth(a["truth"]).to_dict()["book_market"] == 0.006


def test_synthetic_refuses_overwrite(tmp_path):
    spec = SyntheticSpec(n_days=60)
    write_synthetic(spec, tmp_path)
    with pytest.raises(DataError, match="--force"):
        write_synthetic(spec, tmp_path)
    write_synthetic(spec, tmp_path, force=True)


def test_synthetic_needs_80_securities():
    with pytest.raises(ConfigError, match=">= 80"):
        SyntheticSpec(n_securities=50)


def test_synthetic_needs_positive_noise():
    with pytest.raises(ConfigError):
        SyntheticSpec(noise_sigma=0.0)


def _publication_correlations(store, factor):
    prices = store.prices.to_numpy()
    fwd = np.log1p(forward_returns(prices))
    f = store.fundamentals[store.fundamentals["factor"] == factor]
    pos = store.calendar.first_on_or_after(f["available_date"])
    table = f.assign(pos=pos).pivot(index="pos", columns="cusip", values="value")
    out = []
    for p, row in table.iterrows():
        if p + 21 >= len(prices):
            continue
        z = zscore_cross_section(row.reindex(store.prices.columns).to_numpy())
        out.append(np.corrcoef(z, fwd[p])[0, 1])
    return np.array(out)


def test_noiseless_planted_factor_drives_returns():
    # market component switched off so only idiosyncratic noise remains
    spec = SyntheticSpec(noise_sigma=1e-9, market_sigma=0.0, market_drift=0.0, seed=3, n_days=400)
    corr = _publication_correlations(generate_synthetic(spec), "book_market")
    assert corr.min() >= 0.99


def test_zero_betas_give_no_correlation():
    spec = SyntheticSpec(planted_betas={}, seed=5)
    store = generate_synthetic(spec)
    prices = store.prices.to_numpy()
    fwd = forward_returns(prices)
    for factor in spec.factors:
        f = store.fundamentals[store.fundamentals["factor"] == factor]
        pos = store.calendar.first_on_or_after(f["available_date"])
        table = f.assign(pos=pos).pivot(index="pos", columns="cusip", values="value")
        xs, ys = [], []
        for p, row in table.iterrows():
            if p + 21 < len(prices):
                xs.append(zscore_cross_section(row.to_numpy()))
                ys.append(fwd[p] - np.mean(fwd[p]))
        x, y = np.concatenate(xs), np.concatenate(ys)
        assert abs(np.corrcoef(x, y)[0, 1]) <= 3 / np.sqrt(len(x))


def test_synthetic_panel_shape(synth_store):
    assert synth_store.prices.shape == (1512, 120)
    assert synth_store.truth["book_market"] == 0.006
    assert (synth_store.truth.drop("book_market") == 0).all()
    assert synth_store.cusips[0] == "SYN00000X" and is_valid_cusip(synth_store.cusips[0])
