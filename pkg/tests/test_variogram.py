import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlgcp.kriging import KrigingError, SpaceTimeKriging, krige, kriging_weights
from stlgcp.variogram import (
    ExponentialComponent,
    SpaceTimeVariogram,
    StationData,
    VariogramModel,
    empirical_variogram,
    eval_variogram,
    fit_variogram,
    read_stations,
    write_stations,
)

TAVG = VariogramModel("product_sum", ExponentialComponent(46.29, 60.0), ExponentialComponent(99.98, 3.97), k=1.49e-8)
PRCP = VariogramModel("separable", ExponentialComponent(0.438, 60.0, 0.562),
                      ExponentialComponent(0.438, 5.33, 0.562), sill=0.019)


def exact_table(model, dists, lags):
    d, u = np.meshgrid(dists, lags, indexing="ij")
    return pd.DataFrame({"h_bin": np.repeat(np.arange(len(dists)), len(lags)), "u_lag": u.ravel(),
                         "dist": d.ravel(), "gamma": eval_variogram(model, d.ravel(), u.ravel()),
                         "n_pairs": 100})


# ------------------------------------------------------------------ model
def test_origin_is_zero():
    for m in (TAVG, PRCP):
        assert eval_variogram(m, 0.0, 0.0) == 0.0


def test_limits():
    assert TAVG.limit == pytest.approx(146.27, abs=5e-3)
    assert eval_variogram(TAVG, 1e6, 1e6) == pytest.approx(TAVG.limit)
    assert PRCP.limit == pytest.approx(0.019)
    assert eval_variogram(PRCP, 1e6, 1e6) == pytest.approx(0.019)


def test_nugget_applies_at_positive_lags():
    assert eval_variogram(PRCP, 1e-9, 0.0) == pytest.approx(0.019 * 0.562, rel=1e-6)


def test_invalid_models_rejected_at_construction():
    with pytest.raises(ValueError):
        ExponentialComponent(-1.0, 10.0)
    with pytest.raises(ValueError):
        ExponentialComponent(1.0, 0.0)
    with pytest.raises(ValueError):
        VariogramModel("product_sum", ExponentialComponent(2.0, 1.0), ExponentialComponent(4.0, 1.0), k=0.5)
    with pytest.raises(ValueError):
        VariogramModel("separable", ExponentialComponent(2.0, 1.0), ExponentialComponent(1.0, 1.0), sill=1.0)
    with pytest.raises(ValueError):
        VariogramModel("gaussian", ExponentialComponent(1.0, 1.0), ExponentialComponent(1.0, 1.0), sill=1.0)


models = st.builds(
    lambda ss, rs, ns, st_, rt, nt, frac: VariogramModel(
        "product_sum", ExponentialComponent(ss, rs, ns), ExponentialComponent(st_, rt, nt),
        k=frac / max(ss + ns, st_ + nt)),
    st.floats(0.1, 100), st.floats(1, 200), st.floats(0, 10),
    st.floats(0.1, 100), st.floats(0.5, 24), st.floats(0, 10), st.floats(0.01, 1.0))


@settings(max_examples=40, deadline=None)
@given(models)
def test_monotone_in_each_lag(model):
    h = np.linspace(0, 300, 31)
    u = np.arange(0, 13.0)
    H, U = np.meshgrid(h, u, indexing="ij")
    g = eval_variogram(model, H, U)
    tol = 1e-9 * model.limit
    assert np.all(np.diff(g, axis=0) >= -tol)
    assert np.all(np.diff(g, axis=1) >= -tol)


@settings(max_examples=30, deadline=None)
@given(models, st.integers(0, 2**31 - 1))
def test_product_sum_covariance_psd(model, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 200, (40, 2))
    t = rng.integers(0, 24, 40).astype(float)
    h = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    C = model.covariance(h, np.abs(t[:, None] - t[None]))
    assert np.linalg.eigvalsh(C).min() >= -1e-8 * max(1.0, model.limit)


def test_save_load_round_trip(tmp_path):
    for m in (TAVG, PRCP):
        m.save(tmp_path / "v.txt")
        assert VariogramModel.load(tmp_path / "v.txt") == m


# ------------------------------------------------------------------ empirical
def test_empirical_constant_series_is_zero():
    d = StationData(["a", "b"], [[0, 0], [10, 0]], np.full((2, 24), 3.0))
    emp = empirical_variogram(d)
    assert np.all(emp["gamma"] == 0.0)


def test_empirical_single_difference():
    vals = np.array([[1.0, np.nan], [3.0, np.nan]])
    emp = empirical_variogram(StationData(["a", "b"], [[0, 0], [5, 0]], vals), space_bins=[0, 10], max_lag=1)
    row = emp[(emp["u_lag"] == 0) & (emp["h_bin"] > 0)]
    assert len(row) == 1 and row["gamma"].iloc[0] == pytest.approx(2.0)
    assert row["n_pairs"].iloc[0] == 1


def test_empirical_white_noise():
    rng = np.random.default_rng(0)
    sigma2 = 2.5
    d = StationData(np.arange(10), rng.uniform(0, 100, (10, 2)), rng.normal(0, np.sqrt(sigma2), (10, 300)))
    emp = empirical_variogram(d)
    nz = emp[(emp["h_bin"] > 0) | (emp["u_lag"] > 0)]
    # 0.5 (z_i - z_j)^2 has variance sigma^4 for independent pairs; pairs overlap so allow 3 se
    se = sigma2 * np.sqrt(2.0 / nz["n_pairs"])
    assert np.all(np.abs(nz["gamma"] - sigma2) < 3 * se + 0.05)


def test_all_missing_variable_rejected():
    with pytest.raises(ValueError):
        empirical_variogram(StationData([0, 1], [[0, 0], [1, 1]], np.full((2, 5), np.nan)))


def test_station_csv_round_trip(tmp_path):
    vals = np.arange(12.0).reshape(3, 4)
    vals[1, 2] = np.nan
    d = StationData(["s1", "s2", "s3"], [[0, 0], [1, 0], [0, 2]], vals, "TAVG", first_month=5)
    write_stations(d, tmp_path / "s.csv")
    back = read_stations(tmp_path / "s.csv", "TAVG")
    np.testing.assert_array_equal(back.values, vals)
    assert back.first_month == 5 and list(back.station_id) == ["s1", "s2", "s3"]


# ------------------------------------------------------------------ fitting
@pytest.mark.parametrize("truth", [PRCP, VariogramModel("product_sum", ExponentialComponent(5.0, 50.0, 0.5),
                                                        ExponentialComponent(3.0, 4.0, 0.2), k=0.05)])
def test_fit_recovers_exact_table(truth):
    emp = exact_table(truth, np.linspace(5, 150, 10), np.arange(0, 13))
    from stlgcp.variogram import _from_vector, _to_vector

    init = _from_vector(truth.kind, _to_vector(truth) * np.linspace(0.75, 1.3, len(_to_vector(truth))))
    res = fit_variogram(emp, truth.kind, init)
    np.testing.assert_allclose(_to_vector(res.model), _to_vector(truth), rtol=1e-4)
    assert res.objective < 1e-10


def test_restricted_spatial_fit_pins_temporal():
    # the coupling stays at its initial fraction k * max(sill) of the validity bound
    init = VariogramModel("product_sum", ExponentialComponent(2.0, 20.0), ExponentialComponent(1.0, 2.0), k=0.1)
    truth = VariogramModel("product_sum", ExponentialComponent(5.0, 50.0), init.temporal, k=0.2 / 5.0)
    emp = exact_table(truth, np.linspace(5, 150, 10), [0])
    res = fit_variogram(emp, "product_sum", init)
    assert res.model.temporal == init.temporal
    assert res.model.k * res.model.spatial.total_sill == pytest.approx(0.2)
    assert res.model.spatial.sill == pytest.approx(5.0, rel=1e-4)
    assert res.model.spatial.range == pytest.approx(50.0, rel=1e-4)


def test_estimator_end_to_end():
    from stlgcp.simulate import simulate_station_series

    rng = np.random.default_rng(11)
    xy = rng.uniform(0, 300, (17, 2))
    vals = simulate_station_series(PRCP, xy, 120, 11)
    est = SpaceTimeVariogram("separable", random_state=0).fit(StationData(np.arange(17), xy, vals))
    assert est.model_.kind == "separable"
    assert est.model_.sill == pytest.approx(0.019, rel=0.3)
    assert set(est.empirical_.columns) == {"h_bin", "u_lag", "dist", "gamma", "n_pairs"}


# ------------------------------------------------------------------ kriging
def test_kriging_reproduces_data_and_constants():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 100, (6, 2))
    vals = rng.normal(10, 2, (6, 8))
    d = StationData(np.arange(6), xy, vals)
    res = krige(TAVG, d, xy)
    np.testing.assert_allclose(res["prediction"].to_numpy().reshape(8, 6).T, vals, atol=1e-8)
    assert res["variance"].max() < 1e-8
    const = StationData(np.arange(6), xy, np.full((6, 8), 4.2))
    targets = rng.uniform(-50, 150, (20, 2))
    np.testing.assert_allclose(krige(PRCP, const, targets)["prediction"], 4.2, atol=1e-10)


def test_kriging_weights_match_dense_oracle():
    x = np.array([[0.0, 0.0], [10.0, 0.0], [25.0, 0.0], [40.0, 0.0]])
    t = np.array([1.0, 1.0, 2.0, 3.0])
    tx, tt = np.array([[17.0, 0.0]]), np.array([2.0])
    lam, mu, var = kriging_weights(PRCP, x, t, tx, tt)
    # hand-assembled variogram-form ordinary kriging system
    n = len(x)
    G = np.zeros((n + 1, n + 1))
    for i in range(n):
        for j in range(n):
            G[i, j] = eval_variogram(PRCP, abs(x[i, 0] - x[j, 0]), abs(t[i] - t[j]))
    G[n, :n] = G[:n, n] = 1.0
    g0 = np.append(eval_variogram(PRCP, np.abs(x[:, 0] - tx[0, 0]), np.abs(t - tt[0])), 1.0)
    sol = np.linalg.solve(G, g0)
    np.testing.assert_allclose(lam[0], sol[:n], atol=1e-10)
    assert var[0] == pytest.approx(sol[:n] @ g0[:n] + sol[n], abs=1e-12)
    assert lam.sum() == pytest.approx(1.0, abs=1e-10)


def test_sqrt_kriging_is_nonnegative():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 100, (8, 2))
    vals = rng.gamma(0.5, 1.0, (8, 12))
    d = StationData(np.arange(8), xy, vals)
    est = SpaceTimeKriging(PRCP, transform="sqrt").fit(d)
    pred = est.predict(rng.uniform(0, 100, (30, 2)))
    assert pred.shape == (30, 12) and np.all(pred >= 0)
    with pytest.raises(ValueError):
        krige(PRCP, d.transformed(lambda v: v - 10), xy, transform="sqrt")


def test_target_without_neighbourhood():
    d = StationData([0, 1], [[0, 0], [1, 1]], np.array([[1.0, np.nan], [2.0, np.nan]]))
    with pytest.raises(KrigingError):
        krige(PRCP, d, [[0.5, 0.5]], target_months=[20], window=6)
