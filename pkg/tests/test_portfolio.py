"""Covariance and beta estimation plus the EWP / RPP / BNP constructors."""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorlab.errors import DataError, InfeasiblePortfolioError, InsufficientHistoryError, NumericalError
from factorlab.portfolio import (
    BNP,
    EWP,
    RPP,
    beta_neutral_magnitudes,
    construct,
    construct_bnp,
    construct_ewp,
    construct_rpp,
    estimate_betas,
    estimate_covariance,
    risk_contributions,
    risk_parity_magnitudes,
)
from factorlab.regression import ols_fit

from oracles import bnp_grid_ref, covariance_ref, risk_contributions_ref, rpp_gradient_ref


def random_spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0, np.log(cond), n))
    return (q * eig) @ q.T * 1e-4


def names(k, prefix="L"):
    return [f"{prefix}{i:08d}" for i in range(k)]


def rpp_objective(cov, x):
    return 0.5 * x @ cov @ x - np.log(x).sum() / len(x)


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------

def test_duplicate_series_raise_shrinkage(rng):
    a = rng.normal(0, 0.01, 300)
    est = estimate_covariance(pd.DataFrame({"a": a, "b": a, "c": rng.normal(0, 0.01, 300)}), shrinkage=0.0)
    assert est.shrinkage > 0
    assert np.linalg.eigvalsh(est.matrix)[0] >= 1e-10 * np.trace(est.matrix) / 3 * 0.999


def test_covariance_matches_two_pass_oracle(rng):
    R = rng.normal(0, 0.01, (260, 4))
    est = estimate_covariance(R, shrinkage=0.0)
    assert est.shrinkage == 0.0
    np.testing.assert_allclose(est.matrix, covariance_ref(R), rtol=0, atol=1e-12 * np.abs(est.matrix).max())


def test_full_shrinkage_is_diagonal(rng):
    R = rng.normal(0, 0.01, (100, 5))
    est = estimate_covariance(R, shrinkage=1.0)
    assert np.count_nonzero(est.matrix - np.diag(np.diag(est.matrix))) == 0
    np.testing.assert_allclose(np.diag(est.matrix), R.var(axis=0, ddof=1), rtol=1e-12)


def test_covariance_is_symmetric_pd(rng):
    R = rng.normal(0, 0.01, (252, 80))
    est = estimate_covariance(R)
    assert np.array_equal(est.matrix, est.matrix.T)
    assert np.linalg.eigvalsh(est.matrix)[0] > 0
    assert est.shrinkage == 0.1


def test_short_window_raises_floor(rng):
    est = estimate_covariance(rng.normal(0, 0.01, (30, 25)), shrinkage=0.1)
    assert est.shrinkage >= 0.5


def test_too_many_missing_names_security(rng):
    R = pd.DataFrame(rng.normal(0, 0.01, (100, 3)), columns=["a", "b", "c"])
    R.iloc[:21, 1] = np.nan
    with pytest.raises(DataError, match="security b"):
        estimate_covariance(R)
    R.iloc[:1, 1] = 0.0
    assert estimate_covariance(R).matrix.shape == (3, 3)


# ---------------------------------------------------------------------------
# Betas
# ---------------------------------------------------------------------------

def test_betas_exact_cases(rng):
    b = rng.normal(0, 0.01, 756)
    est = estimate_betas(pd.DataFrame({"same": b, "neg": -2 * b}), b)
    assert est.betas["same"] == pytest.approx(1.0, rel=1e-12)
    assert est.betas["neg"] == pytest.approx(-2.0, rel=1e-12)
    assert est.window == 756


def test_betas_match_ols(rng):
    b = rng.normal(0, 0.01, 756)
    r = 0.7 * b + rng.normal(0, 0.02, 756)
    est = estimate_betas(pd.DataFrame({"x": r}), b)
    assert est.betas["x"] == pytest.approx(ols_fit(b, r).coefficients[0], rel=1e-12)


def test_betas_window_half_pairs(rng):
    b = rng.normal(0, 0.01, 756)
    r = b.copy()
    r[:379] = np.nan
    with pytest.raises(InsufficientHistoryError, match="377"):
        estimate_betas(pd.DataFrame({"x": r}), b)


def test_betas_flat_benchmark(rng):
    with pytest.raises(NumericalError):
        estimate_betas(pd.DataFrame({"x": rng.normal(size=756)}), np.zeros(756))


# ---------------------------------------------------------------------------
# EWP
# ---------------------------------------------------------------------------

def test_ewp_forty_forty():
    w = construct_ewp(names(40), names(40, "S")).weights
    assert np.all(w[:40] == 0.0125) and np.all(w[40:] == -0.0125)
    assert w.abs().sum() == pytest.approx(1.0, abs=1e-15)


def test_ewp_one_each():
    w = construct_ewp(["A"], ["B"])
    assert w.weights.tolist() == [0.5, -0.5] and w.method == EWP


def test_empty_side_rejected():
    with pytest.raises(DataError):
        construct_ewp([], ["B"])
    with pytest.raises(DataError):
        construct_ewp(["A"], ["A"])


# ---------------------------------------------------------------------------
# RPP
# ---------------------------------------------------------------------------

def test_rpp_identity():
    np.testing.assert_allclose(risk_parity_magnitudes(np.eye(4)), 0.25, rtol=1e-12)


def test_rpp_diagonal_closed_form():
    np.testing.assert_allclose(risk_parity_magnitudes(np.diag([1.0, 4.0])), [2 / 3, 1 / 3], atol=1e-12)


def test_rpp_matches_first_order_oracle(rng):
    cov = random_spd(rng, 5)
    x = risk_parity_magnitudes(cov)
    ref = rpp_gradient_ref(cov)
    rc = np.array(risk_contributions_ref(cov, x))
    assert np.ptp(rc) / rc.mean() <= 1e-6
    np.testing.assert_allclose(x, ref, rtol=1e-8)
    # the unnormalised optimum satisfies x'Cx = 1
    assert rpp_objective(cov, x / np.sqrt(x @ cov @ x)) == pytest.approx(rpp_objective(cov, ref / np.sqrt(ref @ cov @ ref)), abs=1e-8)


def test_rpp_signs_and_exposure(rng):
    cov = random_spd(rng, 6)
    w = construct_rpp(names(3), names(3, "S"), cov).weights
    assert np.all(w[:3] > 0) and np.all(w[3:] < 0)
    assert w.abs().sum() == pytest.approx(1.0, abs=1e-12)


def test_rpp_newton_failure_reports_gradient(rng):
    with pytest.raises(NumericalError, match="gradient norm"):
        risk_parity_magnitudes(random_spd(rng, 10, cond=1e4), max_iter=1)


def test_rpp_rejects_indefinite():
    with pytest.raises(NumericalError):
        risk_parity_magnitudes(np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_rpp_scale_invariant(seed, c):
    cov = random_spd(np.random.default_rng(seed), 6)
    np.testing.assert_allclose(risk_parity_magnitudes(c * cov), risk_parity_magnitudes(cov), rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_rpp_permutation_equivariant(seed, perm):
    cov = random_spd(np.random.default_rng(seed), 5)
    perm = list(perm)
    np.testing.assert_allclose(risk_parity_magnitudes(cov[np.ix_(perm, perm)]), risk_parity_magnitudes(cov)[perm], rtol=1e-8)


def test_risk_contributions_helper(rng):
    cov = random_spd(rng, 4)
    x = rng.random(4)
    np.testing.assert_allclose(risk_contributions(x, cov), risk_contributions_ref(cov, x), rtol=1e-13)


# ---------------------------------------------------------------------------
# BNP
# ---------------------------------------------------------------------------

def test_bnp_two_asset_analytic():
    w = construct_bnp(["L"], ["S"], np.eye(2), pd.Series({"L": 1.2, "S": 0.8})).weights
    assert w["L"] == pytest.approx(0.4, abs=1e-10)
    assert w["S"] == pytest.approx(-0.6, abs=1e-10)


def test_bnp_equal_betas_split_half(rng):
    cov = random_spd(rng, 8)
    w = construct_bnp(names(4), names(4, "S"), cov, np.full(8, 0.9)).weights
    assert w[:4].sum() == pytest.approx(0.5, abs=1e-12)
    assert w[4:].sum() == pytest.approx(-0.5, abs=1e-12)


def test_bnp_slack_identity_is_equal_weight():
    x = beta_neutral_magnitudes(np.eye(6), np.r_[np.ones(3), -np.ones(3)], np.zeros(6))
    np.testing.assert_allclose(x, 1 / 6, rtol=1e-12)


def test_bnp_beats_grid_search(rng):
    for _ in range(5):
        cov = random_spd(rng, 3)
        signs = np.array([1.0, 1.0, -1.0])
        betas = rng.uniform(0.5, 1.5, 3)
        x = beta_neutral_magnitudes(cov, signs, betas)
        w = signs * x
        assert w @ betas == pytest.approx(0.0, abs=1e-12)
        assert w @ cov @ w <= bnp_grid_ref(cov, signs, betas) + 1e-15


def test_bnp_constraints_on_random_instances(rng):
    for _ in range(20):
        n = 20
        cov = random_spd(rng, n)
        betas = pd.Series(rng.uniform(0.3, 1.7, n), index=names(10) + names(10, "S"))
        p = construct_bnp(names(10), names(10, "S"), cov, betas)
        w = p.weights
        assert abs(betas @ w) <= 1e-8
        assert p.gross_exposure == pytest.approx(1.0, abs=1e-9)
        assert np.all(w[:10] >= 0) and np.all(w[10:] <= 0)


def test_bnp_infeasible():
    betas = pd.Series({"L1": 1.0, "L2": 0.5, "S1": -0.7, "S2": -1.1})
    with pytest.raises(InfeasiblePortfolioError, match="beta-neutral infeasible"):
        construct_bnp(["L1", "L2"], ["S1", "S2"], np.eye(4), betas)


def test_bnp_missing_beta():
    with pytest.raises(DataError, match="no beta"):
        construct_bnp(["A"], ["B"], np.eye(2), pd.Series({"A": 1.0}))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(6)))
def test_bnp_permutation_equivariant(seed, perm):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, 6)
    signs = np.r_[np.ones(3), -np.ones(3)]
    betas = rng.uniform(0.5, 1.5, 6)
    perm = list(perm)
    a = beta_neutral_magnitudes(cov, signs, betas)
    b = beta_neutral_magnitudes(cov[np.ix_(perm, perm)], signs[perm], betas[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def test_construct_dispatch(rng):
    cov = random_spd(rng, 4)
    betas = pd.Series(rng.uniform(0.5, 1.5, 4), index=["a", "b", "c", "d"])
    for method in (EWP, RPP, BNP):
        p = construct(method.lower(), ["a", "b"], ["c", "d"], cov, betas)
        assert p.method == method
        assert p.gross_exposure == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DataError):
        construct("mvo", ["a"], ["b"])
