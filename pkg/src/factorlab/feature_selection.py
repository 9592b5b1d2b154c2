"""Three-stage screening of candidate features against forward monthly returns.

1. drop features whose pooled |Pearson correlation| with the target is below
   ``min_corr``;
2. drop features whose univariate OLS slope contradicts the expected sign;
3. greedily decorrelate the survivors (keep the stronger stage-1 member of
   any pair above ``corr_cap``), fit one multivariate OLS and keep features
   with p-value below ``p_cutoff``.

All statistics are computed on the pooled (date, security) panel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, NoFeaturesSelectedError, NumericalError
from .regression import ols_fit

logger = logging.getLogger(__name__)

MIN_PAIRS = 30

KEPT = "kept"
DROPPED_STAGE1 = "dropped_stage1"
DROPPED_STAGE2 = "dropped_stage2"
DROPPED_STAGE3 = "dropped_stage3"

REPORT_COLUMNS = ["feature", "stage1_corr", "stage2_slope", "pairwise_drop", "multivar_coef", "p_value", "status"]


@dataclass
class FeatureRecord:
    feature: str
    stage1_corr: float = float("nan")
    stage2_slope: float = float("nan")
    sign_ok: bool | None = None
    pairwise_drop: str = ""
    multivar_coef: float = float("nan")
    p_value: float = float("nan")
    status: str = ""
    note: str = ""


@dataclass
class SelectionReport:
    records: dict[str, FeatureRecord] = field(default_factory=dict)

    @property
    def kept(self) -> list[str]:
        return [f for f, r in self.records.items() if r.status == KEPT]

    def to_frame(self) -> pd.DataFrame:
        rows = [{c: getattr(r, c) for c in REPORT_COLUMNS} for r in self.records.values()]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def write_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


def parse_signs(text: str | None) -> dict[str, int]:
    """Parse ``"feat:+1,other:-1"`` into a sign mapping."""
    out: dict[str, int] = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition(":")
        if not sep:
            name, sep, value = item.partition("=")
        try:
            sign = int(value)
        except ValueError:
            sign = None
        if not sep or sign not in (-1, 0, 1):
            raise ConfigError(f"sign expectation {item!r} must look like name:+1, name:-1 or name:0")
        out[name.strip()] = sign
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc @ xc) * (yc @ yc))
    return float(xc @ yc / den) if den > 0 else 0.0


def _pairs(panel: pd.DataFrame, target: np.ndarray, name: str):
    x = panel[name].to_numpy(dtype=float)
    ok = ~np.isnan(x) & ~np.isnan(target)
    return x[ok], target[ok]


def stage1_correlation_filter(
    panel: pd.DataFrame,
    forward_returns,
    threshold: float = 0.01,
    report: SelectionReport | None = None,
) -> list[str]:
    """Keep columns of ``panel`` whose pooled |correlation| with the target is >= threshold."""
    target = np.asarray(forward_returns, dtype=float)
    report = report if report is not None else SelectionReport()
    survivors = []
    for name in panel.columns:
        rec = report.records.setdefault(name, FeatureRecord(name))
        x, y = _pairs(panel, target, name)
        if len(x) < MIN_PAIRS:
            rec.status = DROPPED_STAGE1
            rec.note = f"only {len(x)} paired observations"
            logger.info("stage 1: %s dropped (%s)", name, rec.note)
            continue
        rec.stage1_corr = _pearson(x, y)
        if abs(rec.stage1_corr) >= threshold:
            survivors.append(name)
        else:
            rec.status = DROPPED_STAGE1
    return survivors


def stage2_sign_screen(
    panel: pd.DataFrame,
    features: Sequence[str],
    forward_returns,
    expectations: Mapping[str, int] | None = None,
    report: SelectionReport | None = None,
) -> list[str]:
    """Drop features whose univariate slope sign contradicts a non-zero expectation."""
    target = np.asarray(forward_returns, dtype=float)
    expectations = expectations or {}
    report = report if report is not None else SelectionReport()
    survivors = []
    for name in features:
        rec = report.records.setdefault(name, FeatureRecord(name))
        x, y = _pairs(panel, target, name)
        try:
            slope = float(ols_fit(x, y).coefficients[0])
        except NumericalError as exc:
            rec.status = DROPPED_STAGE2
            rec.note = f"singular regression: {exc}"
            logger.info("stage 2: %s dropped (%s)", name, rec.note)
            continue
        rec.stage2_slope = slope
        expected = int(expectations.get(name, 0))
        rec.sign_ok = expected == 0 or np.sign(slope) == expected
        if rec.sign_ok:
            survivors.append(name)
        else:
            rec.status = DROPPED_STAGE2
    return survivors


def decorrelate(panel: pd.DataFrame, features: Sequence[str], strength: Mapping[str, float], cap: float = 0.7):
    """Greedy pass in order of decreasing strength; returns (kept, {dropped: partner})."""
    order = sorted(features, key=lambda f: (-abs(strength[f]), f))
    kept: list[str] = []
    dropped: dict[str, str] = {}
    for name in order:
        partner = None
        for other in kept:
            a = panel[name].to_numpy(dtype=float)
            b = panel[other].to_numpy(dtype=float)
            ok = ~np.isnan(a) & ~np.isnan(b)
            if ok.sum() >= 2 and abs(_pearson(a[ok], b[ok])) > cap:
                partner = other
                break
        if partner is None:
            kept.append(name)
        else:
            dropped[name] = partner
    return kept, dropped


def stage3_multivariate(
    panel: pd.DataFrame,
    features: Sequence[str],
    forward_returns,
    pairwise_corr_cap: float = 0.7,
    p_cutoff: float = 0.05,
    report: SelectionReport | None = None,
) -> tuple[list[str], SelectionReport]:
    """Decorrelate, fit one multivariate OLS, keep features significant at ``p_cutoff``."""
    target = np.asarray(forward_returns, dtype=float)
    report = report if report is not None else SelectionReport()
    if not features:
        raise NoFeaturesSelectedError("no features selected")
    for name in features:
        report.records.setdefault(name, FeatureRecord(name))
    strength = {f: report.records[f].stage1_corr for f in features}
    for f, v in strength.items():
        if np.isnan(v):
            x, y = _pairs(panel, target, f)
            strength[f] = _pearson(x, y)
    kept, dropped = decorrelate(panel, features, strength, pairwise_corr_cap)
    for name, partner in dropped.items():
        report.records[name].pairwise_drop = partner
        report.records[name].status = DROPPED_STAGE3
    # keep the incoming column order for the joint fit
    kept = [f for f in features if f in kept]
    data = panel[kept].to_numpy(dtype=float)
    ok = ~np.isnan(data).any(axis=1) & ~np.isnan(target)
    if ok.sum() <= len(kept) + 1:
        raise DataError(f"only {int(ok.sum())} complete rows for a {len(kept)}-feature regression")
    try:
        fit = ols_fit(data[ok], target[ok], column_names=kept, inference=True)
    except NumericalError as exc:
        raise NumericalError(f"rank-deficient design after decorrelation over {kept}: {exc}") from exc
    final = []
    for j, name in enumerate(kept):
        rec = report.records[name]
        rec.multivar_coef = float(fit.coefficients[j])
        rec.p_value = float(fit.p_values[j])
        if rec.p_value < p_cutoff:
            rec.status = KEPT
            final.append(name)
        else:
            rec.status = DROPPED_STAGE3
    if not final:
        raise NoFeaturesSelectedError("no features selected")
    return final, report


def select_features(
    panel: pd.DataFrame,
    forward_returns,
    expectations: Mapping[str, int] | None = None,
    min_corr: float = 0.01,
    corr_cap: float = 0.7,
    p_cutoff: float = 0.05,
) -> tuple[list[str], SelectionReport]:
    """Run all three stages.

    Raises :class:`NoFeaturesSelectedError` when nothing survives; the
    partial report is attached to the exception as ``.report``.
    """
    report = SelectionReport()
    for name in panel.columns:
        report.records[name] = FeatureRecord(name)
    s1 = stage1_correlation_filter(panel, forward_returns, min_corr, report)
    s2 = stage2_sign_screen(panel, s1, forward_returns, expectations, report)
    try:
        return stage3_multivariate(panel, s2, forward_returns, corr_cap, p_cutoff, report)
    except NoFeaturesSelectedError as exc:
        exc.report = report
        raise


def pooled_panel(features, forward: np.ndarray, dates=None) -> tuple[pd.DataFrame, np.ndarray]:
    """Stack a :class:`~factorlab.features.FeaturePanel` into (rows, features) with targets.

    ``forward`` is the (date x security) forward-return matrix; ``dates``
    restricts to a subset of calendar positions.
    """
    positions = np.arange(len(features.dates)) if dates is None else np.asarray(dates)
    z = features.z[positions].reshape(-1, len(features.names))
    y = forward[positions].reshape(-1)
    keep = ~np.isnan(y) & ~np.isnan(z).all(axis=1)
    return pd.DataFrame(z[keep], columns=features.names), y[keep]
