"""Matérn (smoothness 1) Gaussian Markov random fields from the SPDE construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma, kv

__all__ = [
    "MaternHyper",
    "matern_precision",
    "matern_correlation",
    "kappa_from_range",
    "tau_from_sd",
    "write_triplets",
]


def kappa_from_range(range_km, smoothness: float = 1.0):
    return np.sqrt(8.0 * smoothness) / np.asarray(range_km, dtype=float)


def tau_from_sd(sd, kappa, smoothness: float = 1.0):
    """Scale so that the stationary 2-D marginal variance equals ``sd**2``."""
    var = gamma(smoothness) / (gamma(smoothness + 1.0) * 4.0 * np.pi * kappa ** (2 * smoothness))
    return np.sqrt(var) / np.asarray(sd, dtype=float)


@dataclass(frozen=True)
class MaternHyper:
    range: float
    sd: float
    smoothness: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.range) and np.isfinite(self.sd)):
            raise ValueError(f"non-finite Matérn parameters range={self.range}, sd={self.sd}")
        if self.range <= 0 or self.sd <= 0:
            raise ValueError(f"Matérn range and sd must be positive (got {self.range}, {self.sd})")
        if self.smoothness != 1.0:
            raise ValueError("only smoothness 1 is supported")

    @property
    def kappa(self) -> float:
        return float(kappa_from_range(self.range, self.smoothness))

    @property
    def tau(self) -> float:
        return float(tau_from_sd(self.sd, self.kappa, self.smoothness))


def matern_precision(hyper: MaternHyper, C, G) -> sp.csc_matrix:
    """``tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)`` for a lumped mass matrix ``C``."""
    k2 = hyper.kappa**2
    c = C.diagonal()
    if np.any(c <= 0):
        raise ValueError("mass matrix must have a positive diagonal")
    G = sp.csc_matrix(G)
    Q = hyper.tau**2 * (k2**2 * sp.diags(c) + 2.0 * k2 * G + G @ sp.diags(1.0 / c) @ G)
    Q = sp.csc_matrix(0.5 * (Q + Q.T))
    Q.sort_indices()
    return Q


def matern_correlation(distance, range_km: float, smoothness: float = 1.0):
    """Matérn correlation with ``range`` the distance of correlation ~0.1 (nu = 1: ``kr K1(kr)``)."""
    d = np.asarray(distance, dtype=float)
    kr = kappa_from_range(range_km, smoothness) * d
    out = np.ones_like(kr)
    pos = kr > 0
    nu = smoothness
    out[pos] = 2.0 ** (1 - nu) / gamma(nu) * kr[pos] ** nu * kv(nu, kr[pos])
    return out


def write_triplets(path, Q) -> None:
    """Upper triangle (i <= j) of a symmetric matrix as 0-based ``i j value`` lines."""
    U = sp.triu(sp.coo_matrix(Q)).tocoo()
    order = np.lexsort((U.col, U.row))
    with open(path, "w") as fh:
        fh.write(f"# n={Q.shape[0]} symmetric upper-triangle 0-based\n")
        for i, j, v in zip(U.row[order], U.col[order], U.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")
