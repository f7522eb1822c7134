import numpy as np
import pytest
import scipy.sparse as sp

from stlgcp.model import LatentModel, subsample_zero_months
from stlgcp.simulate import (
    SimConfig,
    brute_force_posterior,
    sample_gmrf,
    simulate_dataset,
    simulate_station_series,
    two_peak_seasonal,
)
from stlgcp.variogram import ExponentialComponent, VariogramModel


# ------------------------------------------------------------------ GMRF sampling
def test_identity_precision_gives_unit_variance():
    x = sample_gmrf(sp.eye(50, format="csc"), 2000, seed=0)
    assert x.shape == (2000, 50)
    assert np.abs(x.var(axis=0).mean() - 1.0) < 0.05


def test_two_by_two_covariance():
    Q = sp.csc_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    x = sample_gmrf(Q, 20000, seed=1)
    np.testing.assert_allclose(np.cov(x.T), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=0.05)


def test_sampling_is_reproducible():
    Q = sp.csc_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    np.testing.assert_array_equal(sample_gmrf(Q, 10, 7), sample_gmrf(Q, 10, 7))
    assert not np.array_equal(sample_gmrf(Q, 10, 7), sample_gmrf(Q, 10, 8))


# ------------------------------------------------------------------ datasets
def small(**kw):
    base = dict(n_rows=6, n_cols=6, n_years=3, seed=0, variant="fixed_only")
    base.update(kw)
    return SimConfig(**base)


def test_zero_predictor_mean_count_equals_exposure():
    data = simulate_dataset(small(n_rows=20, n_cols=20, n_years=5, intercept=0.0, exposure=4.0))
    assert data.records["count"].mean() == pytest.approx(4.0, abs=0.05)


def test_very_negative_intercept_gives_all_zeros():
    data = simulate_dataset(small(intercept=-40.0))
    assert data.records["count"].sum() == 0


def test_overflowing_predictor_raises():
    with pytest.raises(OverflowError):
        simulate_dataset(small(intercept=31.0))


def test_sparse_regime_is_mostly_zero():
    data = simulate_dataset(SimConfig(n_rows=30, n_cols=30, n_years=10, intercept=-6.5,
                                      variant="fixed_only", seed=2))
    assert len(data.records) == 30 * 30 * 120
    zero = (data.records["count"] == 0).mean()
    p0 = np.exp(-4.0 * np.exp(-6.5))
    assert zero >= 0.99
    assert abs(zero - p0) < 4 * np.sqrt(p0 * (1 - p0) / len(data.records))


def test_dataset_reproducible_from_seed():
    cfg = dict(beta={"static_a": 0.3, "dynamic_b": -0.2, "time": 0.1}, intercept=-1.0)
    a = simulate_dataset(small(**cfg))
    b = simulate_dataset(small(**cfg))
    np.testing.assert_array_equal(a.records["count"], b.records["count"])
    c = simulate_dataset(small(seed=1, **cfg))
    assert not np.array_equal(a.records["count"], c.records["count"])
    assert set(a.covariates.names) == {"static_a", "dynamic_b", "time"}


def test_ar1_field_autocorrelation():
    rho = 0.8
    data = simulate_dataset(small(n_rows=4, n_cols=4, n_years=200, variant="ar1_yearly", rho=rho,
                                  range=10.0, sd=1.0, intercept=-10.0, max_edge_inner=4.0,
                                  max_edge_outer=8.0, margin=8.0))
    W = data.truth["field"]
    lag1 = np.mean([np.corrcoef(W[:-1, j], W[1:, j])[0, 1] for j in range(W.shape[1])])
    assert lag1 == pytest.approx(rho, abs=0.1)


def test_subsampling_preserves_total_count():
    data = simulate_dataset(small(n_years=4, intercept=-2.0))
    out = subsample_zero_months(data.records, 0)
    assert out["count"].sum() == data.records["count"].sum()
    assert len(out) < len(data.records)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(seed=None)
    with pytest.raises(ValueError):
        SimConfig(seasonal=np.ones(12))
    with pytest.raises(ValueError):
        SimConfig(variant="ar1_yearly", rho=1.0)
    with pytest.raises(ValueError):
        simulate_dataset(small(beta={"elevation": 1.0}))


def test_two_peak_seasonal():
    f = two_peak_seasonal()
    assert abs(f.sum()) < 1e-12
    assert np.argmax(f) + 1 == 8
    assert f[2] > f[1] and f[2] > f[3]


# ------------------------------------------------------------------ oracles
def test_brute_force_refuses_large_dimension():
    import pandas as pd

    rec = pd.DataFrame({"cell_id": 0, "month_index": np.arange(1, 13), "count": 0})
    m = LatentModel(rec, None, "fixed_only")
    with pytest.raises(ValueError, match="refused"):
        brute_force_posterior(m, [[0.0]], [np.zeros(3)] * m.dim)


def test_station_series_shape_and_variance():
    model = VariogramModel("separable", ExponentialComponent(1.0, 50.0), ExponentialComponent(1.0, 3.0), sill=2.0)
    xy = np.random.default_rng(0).uniform(0, 500, (30, 2))
    z = simulate_station_series(model, xy, 400, seed=3, mean=5.0)
    assert z.shape == (30, 400)
    assert z.mean() == pytest.approx(5.0, abs=0.5)
    assert z.var() == pytest.approx(2.0, rel=0.3)
