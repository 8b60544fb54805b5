"""Scaling, engineered features, correlations, and correlated-feature drops."""

from __future__ import annotations

import math

import numpy as np
import pytest

from idstats.errors import DataError, DataQualityWarning
from idstats.preprocess import (
    EngineeredFeature,
    RobustScalerState,
    correlation_matrix,
    drop_correlated,
    engineer_features,
    iqr_outlier_mask,
    kendall_tau_b,
    pearson_corr,
    quantile,
    robust_fit,
    robust_transform,
)
from idstats.tabular import ColumnTable, LabelVocabulary


def table_from(**columns):
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in columns.items()}
    n = len(next(iter(cols.values())))
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    return ColumnTable(cols, labels, LabelVocabulary(names=("a", "b")))


def kendall_by_pairs(x, y):
    """O(n^2) tau-b: sign counting plus the textbook tie correction."""
    n = len(x)
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
            if s > 0:
                concordant += 1
            elif s < 0:
                discordant += 1
    n0 = n * (n - 1) // 2
    tie = lambda v: sum(c * (c - 1) // 2 for c in np.unique(v, return_counts=True)[1])
    denom = math.sqrt((n0 - tie(x)) * (n0 - tie(y)))
    return (concordant - discordant) / denom if denom > 0 else 0.0


def test_quantile_uses_linear_interpolation():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert quantile(x, 0.25) == 2.0
    assert quantile(x, 0.5) == 3.0
    assert quantile(x, 0.75) == 4.0
    # h = q(n-1): q=0.1 on [1..5] -> 1 + 0.4
    assert quantile(x, 0.1) == pytest.approx(1.4)


def test_robust_scaler_fixed_vector():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    state = robust_fit(x)
    assert state.median == 3.0
    assert state.iqr == 2.0
    out = robust_transform(x, state)
    assert out.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]


def test_robust_scaler_centers_median_zero_iqr_one():
    for seed in range(5):
        x = np.random.default_rng(seed).normal(3.0, 5.0, size=501)
        out = robust_transform(x, robust_fit(x))
        assert np.median(out) == pytest.approx(0.0, abs=1e-12)
        assert quantile(out, 0.75) - quantile(out, 0.25) == pytest.approx(1.0)


def test_robust_scaler_degenerate_iqr_keeps_values_finite():
    x = np.array([5.0, 5.0, 5.0, 5.0, 100.0])
    state = robust_fit(x)
    assert state.iqr == 0.0
    out = robust_transform(x, state)
    # divisor falls back to 1: pure centering
    assert out.tolist() == [0.0, 0.0, 0.0, 0.0, 95.0]


def test_robust_scaler_state_round_trip():
    state = RobustScalerState(median=2.5, iqr=1.25)
    clone = RobustScalerState.from_dict(state.to_dict())
    assert clone == state


def test_iqr_outlier_fences():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    # q1=2, q3=4 -> fences at -1 and 7: nothing flagged
    assert iqr_outlier_mask(x).sum() == 0
    # [1,2,3,4,5,100]: q1=2.25, q3=4.75, fences [-1.5, 8.5]
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 100.0])
    assert iqr_outlier_mask(y).tolist() == [False] * 5 + [True]
    with pytest.raises(DataError):
        iqr_outlier_mask(np.array([]))


def test_engineer_features_power_and_reciprocal():
    t = table_from(v=[-8.0, -1.0, 0.0, 1.0, 8.0], w=[1.0, 2.0, 4.0, 5.0, 10.0])
    spec = [
        EngineeredFeature("v", "power", 1.0 / 3.0),
        EngineeredFeature("w", "reciprocal"),
    ]
    out = engineer_features(t, spec)
    cube = out.column(spec[0].output_name)
    # sign-preserving power: odd symmetry
    assert cube[0] == pytest.approx(-2.0)
    assert cube[4] == pytest.approx(2.0)
    assert cube[2] == 0.0
    recip = out.column("w_recip")
    assert recip[0] == pytest.approx(1.0, rel=1e-8)
    assert recip[3] == pytest.approx(0.2, rel=1e-8)
    # source columns are untouched
    assert out.column("v").tolist() == [-8.0, -1.0, 0.0, 1.0, 8.0]


def test_engineered_feature_validation():
    with pytest.raises(DataError):
        EngineeredFeature("v", "log")
    with pytest.raises(DataError):
        EngineeredFeature("v", "power")  # exponent required
    assert EngineeredFeature("v", "power", 2.0).output_name == "v_pow2"
    assert EngineeredFeature("v", "reciprocal").output_name == "v_recip"


def test_pearson_known_values_and_degenerate_input():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_corr(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson_corr(x, -x) == pytest.approx(-1.0)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=2000), rng.normal(size=2000)
    assert abs(pearson_corr(a, b)) < 0.08
    with pytest.warns(DataQualityWarning):
        assert pearson_corr(np.ones(5), np.arange(5.0)) == 0.0
    with pytest.raises(DataError):
        pearson_corr(np.ones(3), np.ones(4))


def test_kendall_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(42)
    for trial in range(25):
        n = int(rng.integers(3, 200))
        # integer-valued draws force plenty of ties, including joint ties
        x = rng.integers(0, 6, size=n).astype(np.float64)
        y = rng.integers(0, 6, size=n).astype(np.float64)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        fast = kendall_tau_b(x, y)
        slow = kendall_by_pairs(x, y)
        assert fast == pytest.approx(slow, abs=1e-12), f"trial {trial}"


def test_kendall_continuous_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = int(rng.integers(5, 150))
        x = rng.normal(size=n)
        y = 0.6 * x + rng.normal(size=n)
        assert kendall_tau_b(x, y) == pytest.approx(kendall_by_pairs(x, y), abs=1e-12)


def test_kendall_perfect_and_constant_cases():
    x = np.arange(50.0)
    assert kendall_tau_b(x, x ** 3) == pytest.approx(1.0)  # monotone invariance
    assert kendall_tau_b(x, -x) == pytest.approx(-1.0)
    with pytest.warns(DataQualityWarning):
        assert kendall_tau_b(np.ones(10), np.arange(10.0)) == 0.0


def test_correlation_matrix_shape_and_symmetry():
    rng = np.random.default_rng(3)
    t = table_from(
        a=rng.normal(size=40), b=rng.normal(size=40), c=rng.normal(size=40)
    )
    for method in ("pearson", "kendall"):
        m = correlation_matrix(t, method)
        assert m.values.shape == (3, 3)
        assert np.allclose(m.values, m.values.T)
        assert np.allclose(np.diag(m.values), 1.0)
        assert m.lookup("a", "b") == pytest.approx(m.values[0, 1])
    with pytest.raises(DataError):
        correlation_matrix(t, "spearman")


def test_drop_correlated_removes_duplicate_column():
    rng = np.random.default_rng(5)
    base = rng.normal(size=200)
    t = table_from(
        x=base,
        x_copy=base * 3.0 + 0.5,  # perfectly correlated with x
        z=rng.normal(size=200),
    )
    retained, dropped = drop_correlated(t, threshold=0.9)
    assert retained == ["x", "z"]
    assert [d.name for d in dropped] == ["x_copy"]
    assert "x" in dropped[0].reason
    assert "0.9" in dropped[0].reason


def test_drop_correlated_no_drops_on_independent_noise():
    rng = np.random.default_rng(11)
    t = table_from(**{f"f{i}": rng.normal(size=1000) for i in range(4)})
    retained, dropped = drop_correlated(t, threshold=0.7)
    assert retained == [f"f{i}" for i in range(4)]
    assert dropped == []


def test_drop_correlated_catches_monotone_nonlinear_link():
    # Kendall flags monotone dependence that Pearson understates
    rng = np.random.default_rng(13)
    x = rng.uniform(0.0, 4.0, size=300)
    t = table_from(x=x, y=np.exp(2.5 * x), z=rng.normal(size=300))
    retained, dropped = drop_correlated(t, threshold=0.95)
    assert len(dropped) == 1
    assert dropped[0].name in ("x", "y")
    assert "kendall" in dropped[0].reason


def test_drop_correlated_requires_two_columns():
    t = table_from(only=np.arange(4.0))
    with pytest.raises(DataError):
        drop_correlated(t)


def test_drop_correlated_keeps_one_of_an_identical_trio():
    base = np.random.default_rng(17).normal(size=100)
    t = table_from(a=base, b=base.copy(), c=base.copy())
    retained, dropped = drop_correlated(t, threshold=0.99)
    assert len(retained) == 1
    assert len(dropped) == 2
