"""Penalised-complexity priors on the hyperparameter scale used for optimisation.

All log densities are with respect to the transformed coordinates
(log range, log sd, log precision, atanh rho), Jacobians included.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PriorSpec",
    "pc_matern_range_logpdf",
    "pc_sd_logpdf",
    "pc_precision_logpdf",
    "pc_correlation_logpdf",
    "correlation_distance",
]


@dataclass(frozen=True)
class PriorSpec:
    """Prior thresholds: ``P(range < range0) = range_prob``, ``P(sd > sd0) = sd_prob``,
    ``P(seasonal variance > seasonal_var0) = seasonal_prob`` and
    ``P(|rho| > rho0) = rho_prob``."""

    fixed_effect_precision: float = 0.1
    range0: float = 50.0
    range_prob: float = 0.5
    sd0: float = 1.0
    sd_prob: float = 0.5
    seasonal_var0: float = 0.25
    seasonal_prob: float = 0.5
    rho0: float = 0.5
    rho_prob: float = 0.5

    def __post_init__(self):
        for name in ("range_prob", "sd_prob", "seasonal_prob", "rho_prob"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {p}")
        for name in ("fixed_effect_precision", "range0", "sd0", "seasonal_var0", "rho0"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.rho0 >= 1:
            raise ValueError("rho0 must be below 1")

    @property
    def range_rate(self) -> float:
        # 2-D Matérn: P(range < r0) = exp(-lambda / r0)
        return -np.log(self.range_prob) * self.range0

    @property
    def sd_rate(self) -> float:
        return -np.log(self.sd_prob) / self.sd0

    @property
    def seasonal_rate(self) -> float:
        return -np.log(self.seasonal_prob) / np.sqrt(self.seasonal_var0)

    @property
    def rho_rate(self) -> float:
        return -np.log(self.rho_prob) / correlation_distance(self.rho0)


def correlation_distance(rho):
    """KLD distance ``sqrt(-log(1 - rho^2))`` of an AR(1) from independence."""
    rho = np.asarray(rho, dtype=float)
    return np.sqrt(-np.log1p(-rho * rho))


def pc_matern_range_logpdf(log_range, rate):
    # range ~ rate r^-2 exp(-rate / r)  =>  log-density on log r
    return np.log(rate) - log_range - rate * np.exp(-log_range)


def pc_sd_logpdf(log_sd, rate):
    return np.log(rate) + log_sd - rate * np.exp(log_sd)


def pc_precision_logpdf(log_prec, rate):
    """Exponential prior on ``1/sqrt(precision)``, density on log precision."""
    return np.log(rate / 2.0) - 0.5 * log_prec - rate * np.exp(-0.5 * log_prec)


def pc_correlation_logpdf(z, rate):
    """Symmetric PC prior for a correlation with base 0, density on ``z = atanh(rho)``.

    pi(rho) = rate/2 exp(-rate d) |d'(rho)|, d = sqrt(-log(1-rho^2)); with
    drho/dz = 1 - rho^2 the Jacobian cancels to ``rate/2 exp(-rate d) |rho| / d``.
    """
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    # -log(1 - tanh^2 z) = 2 log cosh z, computed stably
    d = np.sqrt(2.0 * (az + np.log1p(np.exp(-2.0 * az)) - np.log(2.0)))
    rho = np.tanh(az)
    small = az < 1e-4
    ratio = np.where(small, 1.0 - az**2 / 4.0, rho / np.where(small, 1.0, d))
    return np.log(rate / 2.0) - rate * d + np.log(ratio)
