import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from stlgcp.grid import GridSpec
from stlgcp.mesh import build_mesh
from stlgcp.model import (
    LatentModel,
    ModelVariant,
    NonFiniteError,
    ar1_precision,
    check_counts,
    subsample_zero_months,
)
from stlgcp.priors import PriorSpec


def records(counts_by_month, cell=0, first_month=1):
    n = len(counts_by_month)
    return pd.DataFrame({"cell_id": cell, "month_index": np.arange(first_month, first_month + n),
                         "count": counts_by_month})


# ------------------------------------------------------------------ subsampling
def test_all_zero_year_collapses_to_one_record():
    out = subsample_zero_months(records(np.zeros(12, int)), 0)
    assert len(out) == 1
    assert out["exposure"].iloc[0] == 48.0 and out["n_months"].iloc[0] == 12
    assert out["sampled_month"].iloc[0] == out["month_index"].iloc[0]


def test_year_with_fires_every_month_unchanged():
    rec = records(np.arange(1, 13))
    out = subsample_zero_months(rec, 0)
    assert len(out) == 12
    np.testing.assert_array_equal(out["count"], rec["count"])
    assert np.all(out["exposure"] == 4.0)


def test_partial_last_year():
    # a final year with only six observed months
    rec = records(np.zeros(18, int))
    out = subsample_zero_months(rec, 3)
    assert len(out) == 2
    assert sorted(out["n_months"]) == [6, 12]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_subsampling_invariants(seed, rate):
    rng = np.random.default_rng(seed)
    rec = pd.concat([records(rng.poisson(rate, 30), cell=c) for c in range(5)], ignore_index=True)
    out = subsample_zero_months(rec, seed)
    assert out["count"].sum() == rec["count"].sum()
    assert out["exposure"].sum() == pytest.approx(4.0 * len(rec), abs=1e-9)
    pd.testing.assert_frame_equal(out, subsample_zero_months(rec, seed))
    # one zero record per (cell, year) that had any zero month
    zero = rec[rec["count"] == 0]
    n_groups = len(zero.groupby(["cell_id", (zero["month_index"] - 1) // 12]))
    assert (out["count"] == 0).sum() == n_groups


def test_subsampling_likelihood_equivalence():
    rec = records(np.array([0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0]))
    out = subsample_zero_months(rec, 5)
    eta = -1.3

    def ll(df):
        e = df["exposure"].to_numpy(float) if "exposure" in df else np.full(len(df), 4.0)
        y = df["count"].to_numpy(float)
        return np.sum(y * (np.log(e) + eta) - e * np.exp(eta) - gammaln(y + 1))

    assert ll(out) == pytest.approx(ll(rec), rel=1e-12)


def test_check_counts_validation():
    with pytest.raises(ValueError):
        check_counts(pd.DataFrame({"cell_id": [0], "month_index": [1], "count": [-1]}))
    with pytest.raises(ValueError):
        check_counts(pd.DataFrame({"cell_id": [0], "month_index": [1]}))
    with pytest.raises(ValueError):
        check_counts(pd.DataFrame({"cell_id": [0], "month_index": [0], "count": [1]}))


# ------------------------------------------------------------------ likelihood
def test_likelihood_examples():
    m = LatentModel(pd.DataFrame({"cell_id": [0, 0], "month_index": [1, 2], "count": [0, 1]}), None,
                    "fixed_only", seasonal=False)
    val, grad, w = m.loglik_eta(np.zeros(2))
    assert val == pytest.approx(-8.0)
    np.testing.assert_allclose(grad, [-4.0, -3.0])
    np.testing.assert_allclose(w, [4.0, 4.0])


def test_non_finite_eta_names_record():
    m = LatentModel(records([0, 1, 0]), None, "fixed_only", seasonal=False)
    with pytest.raises(NonFiniteError, match="record 1"):
        m.loglik_eta(np.array([0.0, np.nan, 0.0]))


def test_predictor_assembly_with_zero_effects():
    rng = np.random.default_rng(0)
    rec = records(rng.poisson(1, 24))
    m = LatentModel(rec, np.zeros((24, 2)), "fixed_only")
    x = np.zeros(m.dim)
    x[0] = -2.5
    np.testing.assert_allclose(m.linear_predictor(x), -2.5)


# ------------------------------------------------------------------ priors and precisions
def test_ar1_precision_closed_form():
    T = ar1_precision(0.5, 3).toarray()
    assert T[1, 1] == pytest.approx(5 / 3)
    assert T[0, 0] == pytest.approx(4 / 3) and T[0, 1] == pytest.approx(-2 / 3)
    assert T[0, 2] == 0.0
    np.testing.assert_allclose(np.diag(np.linalg.inv(ar1_precision(0.89, 24).toarray())), 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        ar1_precision(1.0, 3)


@pytest.fixture(scope="module")
def spatial_setup():
    grid = GridSpec((0.0, 0.0), 2.0, 4, 4)
    mesh = build_mesh(grid, 4.0, 8.0, 6.0)
    rng = np.random.default_rng(1)
    cells = np.repeat(grid.cell_ids(), 36)
    months = np.tile(np.arange(1, 37), grid.n_active)
    rec = pd.DataFrame({"cell_id": cells, "month_index": months, "count": rng.poisson(0.5, len(cells))})
    return rec, mesh, grid


def test_rho_zero_matches_independent(spatial_setup):
    rec, mesh, grid = spatial_setup
    ar1 = LatentModel(rec, None, "ar1_yearly", mesh=mesh, grid=grid)
    ind = LatentModel(rec, None, "independent_yearly", mesh=mesh, grid=grid)
    Qa = ar1.prior_precision(ar1.pack(range=10, sd=1, rho=0.0, seasonal_precision=4))
    Qi = ind.prior_precision(ind.pack(range=10, sd=1, seasonal_precision=4))
    assert abs(Qa - Qi).max() < 1e-12


def test_yearly_fields_are_stationary(spatial_setup):
    rec, mesh, grid = spatial_setup
    m = LatentModel(rec, None, "ar1_yearly", mesh=mesh, grid=grid)
    Q = m.spatial_precision(m.pack(range=10, sd=1.3, rho=0.8, seasonal_precision=4)).toarray()
    var = np.diag(np.linalg.inv(Q)).reshape(m.n_years, m.n_s)
    np.testing.assert_allclose(var[0], var[-1], rtol=1e-10)
    Qs_block = m.spatial_precision(m.pack(range=10, sd=1.3, rho=0.8, seasonal_precision=4))
    assert abs(Qs_block - Qs_block.T).max() < 1e-12 * abs(Qs_block).max()


def test_shared_spatial_uses_one_field(spatial_setup):
    rec, mesh, grid = spatial_setup
    m = LatentModel(rec, None, "shared_spatial", mesh=mesh, grid=grid)
    assert m.n_w == m.n_s
    assert m.theta_names == ModelVariant.SHARED_SPATIAL.theta_names


def test_log_joint_decomposition(spatial_setup):
    rec, mesh, grid = spatial_setup
    m = LatentModel(rec, None, "ar1_yearly", mesh=mesh, grid=grid)
    theta = m.pack(range=12, sd=0.8, rho=0.6, seasonal_precision=3)
    x = np.random.default_rng(2).normal(0, 0.3, m.dim)
    Q = m.prior_precision(theta).toarray()
    ll = m.log_likelihood(x)[0]
    gauss = 0.5 * np.linalg.slogdet(Q)[1] - 0.5 * m.dim * np.log(2 * np.pi) - 0.5 * x @ Q @ x
    assert m.log_joint(x, theta) == pytest.approx(ll + gauss, abs=1e-10 * abs(ll + gauss))


def test_hyperprior_domain():
    m = LatentModel(records([0, 1, 0]), None, "fixed_only")
    assert np.isfinite(m.log_prior_hyper(m.default_theta()))
    assert m.log_prior_hyper(np.array([np.inf])) == -np.inf
    assert m.log_prior_hyper(np.array([1.0, 2.0])) == -np.inf


def test_variant_parsing():
    assert ModelVariant.parse("AR1_YEARLY") is ModelVariant.AR1_YEARLY
    with pytest.raises(ValueError):
        ModelVariant.parse("quarterly")


def test_spatial_variant_requires_mesh():
    with pytest.raises(ValueError):
        LatentModel(records([0, 1]), None, "ar1_yearly")


def test_custom_priors_used():
    m = LatentModel(records([0, 1, 0]), None, "fixed_only", PriorSpec(fixed_effect_precision=2.0))
    assert m.z_precision(m.default_theta())[0, 0] == 2.0
