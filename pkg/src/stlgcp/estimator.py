"""Scikit-learn style front end for the count model."""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count_frame, check_seed, check_target_frame
from .grid import CovariateTable, GridSpec
from .laplace import fit as laplace_fit
from .laplace import predict_intensity, seasonal_odds_ratio
from .mesh import build_mesh
from .model import LatentModel, ModelVariant, subsample_zero_months
from .priors import PriorSpec

__all__ = ["LGCPRegressor"]


class LGCPRegressor(RegressorMixin, BaseEstimator):
    """Spatio-temporal log-Gaussian Cox model for monthly cell counts.

    Fits the latent Gaussian model by empirical-Bayes Laplace approximation and
    predicts the posterior mean log intensity (per km^2 and month).

    Parameters
    ----------
    variant : str, default "ar1_yearly"
        One of ``fixed_only``, ``shared_spatial``, ``independent_yearly``,
        ``ar1_yearly``.
    priors : PriorSpec or None
    subsample : bool, default True
        Collapse the zero months of each cell-year before fitting.
    max_edge_inner, max_edge_outer, margin : float
        Mesh resolution (km) inside the study region, outside it, and the
        width of the extension.
    budget : int
        Laplace evaluations available to the hyperparameter search.
    theta_init : array-like or None
        Starting hyperparameters on the transformed scale.
    random_state : int
        Seed of the zero-month subsampling.
    """

    def __init__(self, variant="ar1_yearly", priors=None, subsample=True, max_edge_inner=6.0,
                 max_edge_outer=15.0, margin=25.0, budget=250, n_restarts=3, theta_init=None,
                 random_state=0):
        self.variant = variant
        self.priors = priors
        self.subsample = subsample
        self.max_edge_inner = max_edge_inner
        self.max_edge_outer = max_edge_outer
        self.margin = margin
        self.budget = budget
        self.n_restarts = n_restarts
        self.theta_init = theta_init
        self.random_state = random_state

    def fit(self, X, y=None, *, covariates: CovariateTable | None = None, grid: GridSpec | None = None,
            mesh=None):
        """Fit to count records ``X`` (``cell_id, month_index[, exposure, count]``)."""
        records = check_count_frame(X, y)
        seed = check_seed(self.random_state, "random_state")
        variant = ModelVariant.parse(self.variant)
        if variant.has_spatial and grid is None:
            raise ValueError(f"variant {variant.value} needs the analysis grid")
        if self.subsample:
            cell_area = grid.cell_area if grid is not None else 4.0
            records = subsample_zero_months(records, seed, cell_area=cell_area)
        if variant.has_spatial and mesh is None:
            mesh = build_mesh(grid, self.max_edge_inner, self.max_edge_outer, self.margin)
        n_years = int((records["month_index"].max() - 1) // 12 + 1)
        self.model_ = LatentModel(records, covariates, variant, self.priors or PriorSpec(),
                                  mesh=mesh, grid=grid, n_years=n_years)
        self.fit_ = laplace_fit(self.model_, self.theta_init, budget=self.budget,
                                n_restarts=self.n_restarts)
        self.records_ = records
        self.covariates_ = covariates
        return self

    # summaries -----------------------------------------------------------
    @property
    def hyperparameters_(self) -> pd.DataFrame:
        check_is_fitted(self, "fit_")
        return self.fit_.hyperparameters

    @property
    def fixed_effects_(self) -> pd.DataFrame:
        check_is_fitted(self, "fit_")
        return self.fit_.fixed_effects

    @property
    def log_marginal_(self) -> float:
        check_is_fitted(self, "fit_")
        return self.fit_.log_marginal

    def seasonal_odds_ratio(self, reference_month: int = 6) -> pd.DataFrame:
        check_is_fitted(self, "fit_")
        return seasonal_odds_ratio(self.fit_, reference_month)

    # prediction ----------------------------------------------------------
    def predict_intensity(self, X, covariates=None) -> pd.DataFrame:
        """Posterior mean and sd of the log intensity at ``(cell_id, month_index)`` targets."""
        check_is_fitted(self, "fit_")
        targets = check_target_frame(X)
        cov = self.covariates_ if covariates is None else covariates
        return predict_intensity(self.fit_, self.model_, targets, cov)

    def predict(self, X, covariates=None) -> np.ndarray:
        """Posterior mean log intensity (per km^2 and month)."""
        return self.predict_intensity(X, covariates)["mean"].to_numpy()

    def predict_counts(self, X, covariates=None) -> np.ndarray:
        """Plug-in expected counts ``exposure * exp(eta)`` (exposure defaults to the cell area)."""
        pred = self.predict(X, covariates)
        exposure = X["exposure"].to_numpy(float) if "exposure" in X else 4.0
        return exposure * np.exp(pred)

    def score(self, X, y, covariates=None):
        """Mean Poisson log-likelihood of counts ``y`` under the plug-in intensity."""
        from scipy.stats import poisson

        mu = self.predict_counts(X, covariates)
        return float(np.mean(poisson.logpmf(np.asarray(y), mu)))
