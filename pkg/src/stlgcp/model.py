"""Latent Gaussian count model: design, prior precisions, likelihood, subsampling."""
from __future__ import annotations

from enum import Enum

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import gammaln

from .grid import CovariateTable, GridSpec, calendar_month, year_index
from .mesh import Mesh, fem_matrices, projector
from .priors import (
    PriorSpec,
    pc_correlation_logpdf,
    pc_matern_range_logpdf,
    pc_precision_logpdf,
    pc_sd_logpdf,
)
from .sparse import SparseCholesky
from .spde import MaternHyper, matern_precision

__all__ = [
    "ModelVariant",
    "LatentModel",
    "NonFiniteError",
    "subsample_zero_months",
    "cyclic_rw1_structure",
    "scaled_cyclic_rw1",
    "sum_to_zero_basis",
    "ar1_precision",
    "log_prior_hyper",
    "check_counts",
]


class NonFiniteError(FloatingPointError):
    pass


class ModelVariant(str, Enum):
    FIXED_ONLY = "fixed_only"
    SHARED_SPATIAL = "shared_spatial"
    INDEPENDENT_YEARLY = "independent_yearly"
    AR1_YEARLY = "ar1_yearly"

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        aliases = {"1": cls.FIXED_ONLY, "2": cls.SHARED_SPATIAL, "3": cls.INDEPENDENT_YEARLY,
                   "4": cls.AR1_YEARLY}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown model variant {value!r}")

    @property
    def has_spatial(self) -> bool:
        return self is not ModelVariant.FIXED_ONLY

    @property
    def theta_names(self) -> list[str]:
        names = []
        if self.has_spatial:
            names += ["log_range", "log_sd"]
        if self is ModelVariant.AR1_YEARLY:
            names.append("atanh_rho")
        names.append("log_seasonal_precision")
        return names


def check_counts(records: pd.DataFrame, months_per_year: int = 12) -> pd.DataFrame:
    """Validate a count table and add the ``year`` / ``month`` helper columns."""
    missing = {"cell_id", "month_index", "count"} - set(records.columns)
    if missing:
        raise ValueError(f"count table lacks columns {sorted(missing)}")
    out = records.copy()
    if "exposure" not in out:
        out["exposure"] = 4.0
    counts = out["count"].to_numpy()
    if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
        raise ValueError("counts must be non-negative integers")
    if np.any(out["exposure"].to_numpy(float) <= 0):
        raise ValueError("exposures must be positive")
    if np.any(out["month_index"].to_numpy() < 1):
        raise ValueError("month_index is 1-based")
    out["count"] = out["count"].astype(np.int64)
    out["exposure"] = out["exposure"].astype(float)
    out["year"] = year_index(out["month_index"].to_numpy(), months_per_year)
    out["month"] = calendar_month(out["month_index"].to_numpy(), months_per_year)
    return out


def subsample_zero_months(records: pd.DataFrame, rng_seed: int, months_per_year: int = 12,
                          cell_area: float = 4.0) -> pd.DataFrame:
    """Collapse each cell-year's zero-count months into one randomly chosen month.

    Positive counts are kept as they are. Among the ``k`` zero months of a
    (cell, year) one is drawn uniformly; it is kept with exposure
    ``k * cell_area`` and the others are dropped. Draws come from a Philox
    stream keyed by ``rng_seed``, one uniform per cell-year in sorted order.
    """
    df = check_counts(records, months_per_year)
    if "exposure" in records:
        unit = df["exposure"].to_numpy(float)
    else:
        unit = np.full(len(df), float(cell_area))
    df = df.assign(_unit=unit).sort_values(["cell_id", "year", "month_index"], kind="stable")
    zero = df["count"].to_numpy() == 0

    pos = df[~zero].copy()
    pos["n_months"] = 1

    z = df[zero]
    keys = z["cell_id"].to_numpy(np.int64), z["year"].to_numpy(np.int64)
    grp = pd.MultiIndex.from_arrays(keys).factorize()[0] if len(z) else np.zeros(0, int)
    n_groups = grp.max() + 1 if len(z) else 0
    k = np.bincount(grp, minlength=n_groups)
    first = np.concatenate([[0], np.cumsum(k)[:-1]]) if n_groups else np.zeros(0, int)
    gen = np.random.Generator(np.random.Philox(key=int(rng_seed)))
    u = gen.random(n_groups)
    pick = first + np.minimum((u * k).astype(np.int64), k - 1)
    kept = z.iloc[pick].copy()
    kept["exposure"] = np.bincount(grp, weights=z["_unit"].to_numpy(), minlength=n_groups)
    kept["n_months"] = k

    out = pd.concat([pos, kept]).sort_values(["cell_id", "month_index"], kind="stable")
    out["sampled_month"] = np.where(out["count"].to_numpy() == 0, out["month_index"], 0)
    cols = [c for c in records.columns if c not in ("exposure",)] + ["exposure", "n_months", "sampled_month"]
    return out[cols].reset_index(drop=True)


def cyclic_rw1_structure(n: int = 12) -> np.ndarray:
    R = 2.0 * np.eye(n)
    idx = np.arange(n)
    R[idx, (idx + 1) % n] -= 1.0
    R[idx, (idx - 1) % n] -= 1.0
    return R


def scaled_cyclic_rw1(n: int = 12) -> np.ndarray:
    """Cyclic RW1 structure scaled to unit generalised variance."""
    R = cyclic_rw1_structure(n)
    d = np.diag(np.linalg.pinv(R))
    return R * np.exp(np.mean(np.log(d)))


def sum_to_zero_basis(n: int = 12) -> np.ndarray:
    """Orthonormal basis (n, n-1) of vectors summing to zero."""
    M = np.eye(n) - 1.0 / n
    q, _ = np.linalg.qr(M[:, : n - 1])
    return q


def ar1_precision(rho: float, n: int) -> sp.csc_matrix:
    """Precision of a stationary unit-variance AR(1) of length ``n``."""
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if n == 1:
        return sp.csc_matrix(np.ones((1, 1)))
    diag = np.full(n, 1.0 + rho * rho)
    diag[[0, -1]] = 1.0
    off = np.full(n - 1, -rho)
    return sp.csc_matrix(sp.diags([off, diag, off], [-1, 0, 1]) / (1.0 - rho * rho))


def log_prior_hyper(theta, priors: PriorSpec, variant: ModelVariant) -> float:
    """Sum of PC prior log densities over the transformed hyperparameters."""
    variant = ModelVariant.parse(variant)
    theta = np.asarray(theta, dtype=float)
    names = variant.theta_names
    if theta.shape != (len(names),) or not np.all(np.isfinite(theta)):
        return -np.inf
    th = dict(zip(names, theta))
    lp = pc_precision_logpdf(th["log_seasonal_precision"], priors.seasonal_rate)
    if variant.has_spatial:
        lp += pc_matern_range_logpdf(th["log_range"], priors.range_rate)
        lp += pc_sd_logpdf(th["log_sd"], priors.sd_rate)
    if variant is ModelVariant.AR1_YEARLY:
        lp += pc_correlation_logpdf(th["atanh_rho"], priors.rho_rate)
    return float(lp)


class LatentModel:
    """Assembled latent Gaussian model for monthly cell counts.

    The latent vector is ``[beta (intercept, covariates), seasonal (n-1 sum-to-zero
    coordinates), spatial]``; the spatial part is one mesh field per year
    (independent or AR(1) coupled), a single shared field, or absent.

    Parameters
    ----------
    records : DataFrame
        Columns ``cell_id, month_index, count, exposure``.
    covariates : array (n_records, q), CovariateTable or None
        Covariate rows aligned with ``records`` (already standardised).
    variant : ModelVariant or str
    mesh, grid : needed for spatial variants
    family : "poisson" or "gaussian"
        The Gaussian family (``count`` read as a real response with known
        ``noise_precision``, identity link) serves testing.
    """

    def __init__(self, records, covariates=None, variant="ar1_yearly", priors=None, *,
                 mesh: Mesh | None = None, grid: GridSpec | None = None,
                 covariate_names=None, months_per_year: int = 12, n_years: int | None = None,
                 seasonal: bool = True, family: str = "poisson", noise_precision: float = 1.0):
        self.variant = ModelVariant.parse(variant)
        self.priors = priors or PriorSpec()
        self.months_per_year = months_per_year
        self.family = family
        if family not in ("poisson", "gaussian"):
            raise ValueError(f"unknown family {family!r}")
        self.noise_precision = float(noise_precision)

        if family == "gaussian":
            df = records.copy()
            df["year"] = year_index(df["month_index"].to_numpy(), months_per_year)
            df["month"] = calendar_month(df["month_index"].to_numpy(), months_per_year)
            if "exposure" not in df:
                df["exposure"] = 1.0
        else:
            df = check_counts(records, months_per_year)
        self.records = df.reset_index(drop=True)
        self.y = df["count"].to_numpy(float)
        self.E = df["exposure"].to_numpy(float)
        self.log_factorial = gammaln(self.y + 1.0) if family == "poisson" else None

        if isinstance(covariates, CovariateTable):
            covariate_names = covariates.names
            X = covariates.design(df["cell_id"].to_numpy(), df["month_index"].to_numpy())
        elif covariates is None:
            X = np.zeros((len(df), 0))
            covariate_names = []
        else:
            X = np.asarray(covariates, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if len(X) != len(df):
                raise ValueError("covariate rows do not match records")
            if covariate_names is None:
                covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates contain non-finite values")
        self.covariate_names = list(covariate_names)
        self.fixed_names = ["intercept"] + self.covariate_names
        self.n_fixed = 1 + X.shape[1]

        self.seasonal = seasonal
        if seasonal:
            self._basis = sum_to_zero_basis(months_per_year)
            self._seasonal_structure = self._basis.T @ scaled_cyclic_rw1(months_per_year) @ self._basis
            Bm = self._basis[df["month"].to_numpy() - 1]
            self.n_seasonal = months_per_year - 1
        else:
            self._basis = np.zeros((months_per_year, 0))
            Bm = np.zeros((len(df), 0))
            self.n_seasonal = 0
        self.Z = np.hstack([np.ones((len(df), 1)), X, Bm])
        self.n_z = self.Z.shape[1]

        years = df["year"].to_numpy()
        self.n_years = int(n_years if n_years is not None else years.max() + 1)
        if years.max() >= self.n_years:
            raise ValueError("records extend beyond n_years")

        self.mesh = mesh
        self.grid = grid
        if self.variant.has_spatial:
            if mesh is None or grid is None:
                raise ValueError(f"variant {self.variant.value} needs a mesh and a grid")
            self.C, self.G = fem_matrices(mesh)
            self.n_s = mesh.n_vertices
            cells, inv = np.unique(df["cell_id"].to_numpy(), return_inverse=True)
            self.cells = cells
            self.A_cell = projector(mesh, grid.centers(cells))
            n_blocks = 1 if self.variant is ModelVariant.SHARED_SPATIAL else self.n_years
            block = years if n_blocks > 1 else np.zeros_like(years)
            # records sharing (cell, year) share their spatial design row
            uniq, self.group = np.unique(inv * n_blocks + block, return_inverse=True)
            g_cell, g_block = uniq // n_blocks, uniq % n_blocks
            rows = self.A_cell[g_cell].tocoo()
            self.S_group = sp.csr_matrix(
                (rows.data, (rows.row, rows.col + g_block[rows.row] * self.n_s)),
                shape=(len(uniq), n_blocks * self.n_s),
            )
            self.aggregator = sp.csr_matrix(
                (np.ones(len(df)), (self.group, np.arange(len(df)))), shape=(len(uniq), len(df))
            )
            self.S = sp.csr_matrix(self.aggregator.T @ self.S_group)
            self.n_blocks = n_blocks
        else:
            self.n_s = 0
            self.n_blocks = 0
            self.S = sp.csr_matrix((len(df), 0))
        self.n_w = self.S.shape[1]
        self.dim = self.n_z + self.n_w

    # -- hyperparameters -------------------------------------------------
    @property
    def theta_names(self) -> list[str]:
        names = self.variant.theta_names
        if not self.seasonal:
            names = [n for n in names if n != "log_seasonal_precision"]
        return names

    def unpack(self, theta) -> dict:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.theta_names),):
            raise ValueError(f"theta must have length {len(self.theta_names)} ({self.theta_names})")
        th = dict(zip(self.theta_names, theta))
        out = {}
        if "log_range" in th:
            out["range"] = float(np.exp(th["log_range"]))
            out["sd"] = float(np.exp(th["log_sd"]))
        if "atanh_rho" in th:
            out["rho"] = float(np.tanh(th["atanh_rho"]))
        if "log_seasonal_precision" in th:
            out["seasonal_precision"] = float(np.exp(th["log_seasonal_precision"]))
        return out

    def pack(self, range=None, sd=None, rho=None, seasonal_precision=None) -> np.ndarray:
        vals = {"log_range": None if range is None else np.log(range),
                "log_sd": None if sd is None else np.log(sd),
                "atanh_rho": None if rho is None else np.arctanh(rho),
                "log_seasonal_precision": None if seasonal_precision is None else np.log(seasonal_precision)}
        out = []
        for name in self.theta_names:
            if vals[name] is None:
                raise ValueError(f"missing value for {name}")
            out.append(vals[name])
        return np.array(out, dtype=float)

    def default_theta(self) -> np.ndarray:
        """Prior medians: range0, sd0, rho 0.5 and seasonal variance ``seasonal_var0``."""
        p = self.priors
        kw = dict(range=p.range0, sd=p.sd0, rho=p.rho0, seasonal_precision=1.0 / p.seasonal_var0)
        return self.pack(**{k: v for k, v in kw.items()
                            if k != "rho" or self.variant is ModelVariant.AR1_YEARLY})

    def log_prior_hyper(self, theta) -> float:
        if not self.seasonal:
            raise NotImplementedError("hyperprior assumes a seasonal block")
        return log_prior_hyper(theta, self.priors, self.variant)

    # -- prior precision -------------------------------------------------
    def z_precision(self, theta) -> np.ndarray:
        h = self.unpack(theta)
        q = np.full(self.n_fixed, self.priors.fixed_effect_precision)
        Q = np.diag(q)
        if self.seasonal:
            Q = np.block([
                [Q, np.zeros((self.n_fixed, self.n_seasonal))],
                [np.zeros((self.n_seasonal, self.n_fixed)), h["seasonal_precision"] * self._seasonal_structure],
            ])
        return Q

    def spatial_precision(self, theta) -> sp.csc_matrix:
        if not self.variant.has_spatial:
            return sp.csc_matrix((0, 0))
        h = self.unpack(theta)
        Qs = matern_precision(MaternHyper(h["range"], h["sd"]), self.C, self.G)
        if self.variant is ModelVariant.SHARED_SPATIAL:
            return Qs
        if self.variant is ModelVariant.INDEPENDENT_YEARLY:
            T = sp.identity(self.n_years, format="csc")
        else:
            T = ar1_precision(h["rho"], self.n_years)
        Q = sp.kron(T, Qs, format="csc")
        Q.sort_indices()
        return Q

    def prior_precision(self, theta) -> sp.csc_matrix:
        """Joint prior precision of the whole latent vector."""
        return sp.block_diag([sp.csc_matrix(self.z_precision(theta)), self.spatial_precision(theta)],
                             format="csc")

    # -- likelihood ------------------------------------------------------
    def linear_predictor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"latent vector has length {x.shape}, expected {self.dim}")
        eta = self.Z @ x[: self.n_z]
        if self.n_w:
            eta = eta + self.S @ x[self.n_z:]
        return eta

    def loglik_eta(self, eta):
        """Log-likelihood, its gradient and negative second derivative in ``eta``."""
        eta = np.asarray(eta, dtype=float)
        bad = ~np.isfinite(eta)
        if bad.any():
            raise NonFiniteError(f"non-finite linear predictor at record {int(np.flatnonzero(bad)[0])}")
        if self.family == "gaussian":
            r = self.y - eta
            tau = self.noise_precision
            val = 0.5 * len(r) * np.log(tau / (2 * np.pi)) - 0.5 * tau * r @ r
            return float(val), tau * r, np.full_like(r, tau)
        with np.errstate(over="raise"):
            try:
                mu = self.E * np.exp(eta)
            except FloatingPointError:
                i = int(np.argmax(eta))
                raise NonFiniteError(f"exp overflow in linear predictor at record {i}") from None
        val = float(self.y @ eta - mu.sum() - self.log_factorial.sum())
        return val, self.y - mu, mu

    def log_likelihood(self, x):
        """``(value, gradient wrt eta, -d2/deta2)`` at latent vector ``x``."""
        return self.loglik_eta(self.linear_predictor(x))

    def gradient(self, x) -> np.ndarray:
        """Gradient of the log-likelihood with respect to the latent vector."""
        _, g, _ = self.log_likelihood(x)
        out = self.Z.T @ g
        if self.n_w:
            out = np.concatenate([out, self.S.T @ g])
        return out

    def hessian(self, x) -> sp.csc_matrix:
        """Negative Hessian of the log-likelihood in the latent vector (sparse)."""
        _, _, w = self.log_likelihood(x)
        D = sp.hstack([sp.csr_matrix(self.Z), self.S], format="csr")
        return sp.csc_matrix(D.T @ sp.diags(w) @ D)

    def log_joint(self, x, theta) -> float:
        """Log density of (y, x | theta), prior normalising constants included."""
        Q = self.prior_precision(theta)
        ll = self.log_likelihood(x)[0]
        ld = SparseCholesky(Q).logdet()
        return float(ll + 0.5 * ld - 0.5 * self.dim * np.log(2 * np.pi) - 0.5 * x @ (Q @ x))

    # -- helpers ---------------------------------------------------------
    def seasonal_effect(self, x) -> np.ndarray:
        """Month effects ``f(1..12)`` from a latent vector."""
        if not self.seasonal:
            raise ValueError("model has no seasonal block")
        return self._basis @ np.asarray(x)[self.n_fixed:self.n_z]

    @property
    def seasonal_basis(self) -> np.ndarray:
        return self._basis

    def latent_names(self) -> list[str]:
        names = list(self.fixed_names)
        names += [f"seasonal_coord_{j + 1}" for j in range(self.n_seasonal)]
        if self.n_w:
            if self.n_blocks == 1:
                names += [f"w_node{v}" for v in range(self.n_s)]
            else:
                names += [f"w_y{a}_node{v}" for a in range(self.n_blocks) for v in range(self.n_s)]
        return names

    def target_design(self, cell_id, month_index, covariates=None):
        """Design rows ``(Z, S)`` for arbitrary (cell, month) targets."""
        cell_id = np.asarray(cell_id, dtype=np.int64)
        month_index = np.asarray(month_index, dtype=np.int64)
        if isinstance(covariates, CovariateTable):
            X = covariates.design(cell_id, month_index)
        elif covariates is None:
            if self.n_fixed > 1:
                raise ValueError(f"targets need covariates {self.covariate_names}")
            X = np.zeros((len(cell_id), 0))
        else:
            X = np.asarray(covariates, dtype=float).reshape(len(cell_id), -1)
        if X.shape[1] != self.n_fixed - 1:
            raise ValueError(f"expected {self.n_fixed - 1} covariate columns, got {X.shape[1]}")
        bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
        if bad.size:
            raise ValueError("missing covariates at targets " + ", ".join(
                f"(cell {cell_id[i]}, month {month_index[i]})" for i in bad[:10]))
        month = calendar_month(month_index, self.months_per_year)
        Z = np.hstack([np.ones((len(cell_id), 1)), X, self._basis[month - 1]])
        if not self.n_w:
            return Z, sp.csr_matrix((len(cell_id), 0))
        years = year_index(month_index, self.months_per_year)
        if self.n_blocks > 1 and (years.max() >= self.n_blocks or years.min() < 0):
            raise ValueError("target months outside the fitted years")
        A = projector(self.mesh, self.grid.centers(cell_id)).tocoo()
        shift = years[A.row] * self.n_s if self.n_blocks > 1 else 0
        S = sp.csr_matrix((A.data, (A.row, A.col + shift)), shape=(len(cell_id), self.n_w))
        return Z, S
