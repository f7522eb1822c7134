"""Ordinary space-time kriging of station series onto grid cells."""
from __future__ import annotations

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from .variogram import StationData, VariogramModel

__all__ = ["KrigingError", "kriging_weights", "krige", "SpaceTimeKriging"]


class KrigingError(RuntimeError):
    pass


def _solve_system(K, rhs, jitter_levels=(0.0, 1e-10, 1e-8)):
    """Solve the bordered ordinary-kriging system, retrying with diagonal jitter."""
    n = K.shape[0] - 1
    scale = float(np.mean(np.abs(np.diag(K)[:n]))) or 1.0
    last = None
    for eps in jitter_levels:
        M = K.copy()
        M[np.arange(n), np.arange(n)] += eps * scale
        try:
            lu = sla.lu_factor(M, check_finite=True)
            if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * scale:
                raise np.linalg.LinAlgError("numerically singular kriging matrix")
            return sla.lu_solve(lu, rhs), eps
        except (np.linalg.LinAlgError, ValueError) as exc:
            last = exc
    raise KrigingError(f"singular kriging system ({last})")


def kriging_weights(model: VariogramModel, data_xy, data_t, target_xy, target_t):
    """Ordinary-kriging weights for each target.

    Returns ``(weights (n_targets, n_data), lagrange (n_targets,), variance (n_targets,))``.
    The system is ``C lam + mu 1 = c0, 1' lam = 1`` with ``C`` the covariance
    ``gamma(inf, inf) - gamma(h, u)``; the variance is ``C(0,0) - lam' c0 - mu``.
    """
    data_xy = np.asarray(data_xy, dtype=float).reshape(-1, 2)
    target_xy = np.asarray(target_xy, dtype=float).reshape(-1, 2)
    data_t = np.asarray(data_t, dtype=float).ravel()
    target_t = np.asarray(target_t, dtype=float).ravel()
    n = len(data_xy)
    if n == 0:
        raise KrigingError("no data in the kriging neighbourhood")
    C = model.covariance(cdist(data_xy, data_xy), np.abs(data_t[:, None] - data_t[None, :]))
    c0 = model.covariance(cdist(data_xy, target_xy), np.abs(data_t[:, None] - target_t[None, :]))
    K = np.ones((n + 1, n + 1))
    K[:n, :n] = C
    K[n, n] = 0.0
    rhs = np.vstack([c0, np.ones((1, len(target_xy)))])
    sol, _ = _solve_system(K, rhs)
    lam = sol[:n].T
    mu = sol[n]
    var = model.limit - np.einsum("ij,ji->i", lam, c0) - mu
    return lam, mu, np.maximum(var, 0.0)


def krige(model: VariogramModel, data: StationData, target_xy, target_months=None, *, window: int = 6,
          transform: str | None = None) -> pd.DataFrame:
    """Predict at every (target location, month) pair.

    Each target month uses all non-missing station values within ``window``
    months of it. With ``transform="sqrt"`` the data are kriged on the
    square-root scale and the predictions are squared (the variance column
    then refers to the square-root scale).

    Returns a long DataFrame with ``target, month_index, prediction, variance``.
    """
    target_xy = np.asarray(target_xy, dtype=float).reshape(-1, 2)
    values = data.values
    if transform == "sqrt":
        if np.nanmin(values) < 0:
            raise ValueError("square-root transform needs non-negative data")
        values = np.sqrt(values)
    elif transform is not None:
        raise ValueError(f"unknown transform {transform!r}")
    months = data.month_index if target_months is None else np.asarray(target_months, dtype=int)
    out = []
    all_months = data.month_index
    for m in months:
        sel = np.flatnonzero(np.abs(all_months - m) <= window)
        sub = values[:, sel]
        ok = np.isfinite(sub)
        if not ok.any():
            raise KrigingError(f"target month {m} has no station data within {window} months")
        st, tm = np.nonzero(ok)
        lam, _, var = kriging_weights(model, data.xy[st], all_months[sel][tm], target_xy,
                                      np.full(len(target_xy), m))
        pred = lam @ sub[st, tm]
        if transform == "sqrt":
            pred = pred * pred
        out.append(pd.DataFrame({"target": np.arange(len(target_xy)), "month_index": m,
                                 "prediction": pred, "variance": var}))
    return pd.concat(out, ignore_index=True)


class SpaceTimeKriging(BaseEstimator):
    """Ordinary space-time kriging estimator.

    Parameters
    ----------
    model : VariogramModel
    window : int, default 6
        Half-width (months) of the temporal neighbourhood.
    transform : {None, "sqrt"}
        Krige the square root of the data and square the predictions.
    """

    def __init__(self, model=None, window=6, transform=None):
        self.model = model
        self.window = window
        self.transform = transform

    def fit(self, data: StationData, y=None):
        if self.model is None:
            raise ValueError("a variogram model is required")
        if not isinstance(data, StationData):
            raise TypeError("fit expects StationData")
        self.data_ = data
        return self

    def predict(self, target_xy, target_months=None, return_variance=False):
        if not hasattr(self, "data_"):
            raise RuntimeError("SpaceTimeKriging is not fitted")
        res = krige(self.model, self.data_, target_xy, target_months, window=self.window,
                    transform=self.transform)
        n = len(np.asarray(target_xy).reshape(-1, 2))
        pred = res["prediction"].to_numpy().reshape(-1, n).T
        if return_variance:
            return pred, res["variance"].to_numpy().reshape(-1, n).T
        return pred
