"""Synthetic datasets with known truth, and brute-force oracles for small models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .grid import CovariateTable, GridSpec, calendar_month, year_index
from .mesh import Mesh, build_mesh, fem_matrices, projector
from .model import LatentModel, ModelVariant
from .sparse import SparseCholesky
from .spde import MaternHyper, matern_precision

__all__ = [
    "SimConfig",
    "SimulatedData",
    "sample_gmrf",
    "simulate_dataset",
    "brute_force_posterior",
    "two_peak_seasonal",
    "simulate_station_series",
    "ETA_MAX",
]

ETA_MAX = 30.0


def _rng(seed, *stream):
    """Philox generator for sub-stream ``stream`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def sample_gmrf(precision, n_samples: int, seed: int) -> np.ndarray:
    """Draws from N(0, Q^{-1}) by back substitution with the Cholesky factor; shape (n_samples, n)."""
    chol = SparseCholesky(precision)
    z = _rng(seed, 0).standard_normal((chol.n, n_samples))
    return chol.solve_Lt(z).T


def two_peak_seasonal(months_per_year: int = 12, spring_peak: int = 3, summer_peak: int = 8,
                      spring_height: float = 0.5, summer_height: float = 1.2,
                      width: float = 1.0) -> np.ndarray:
    """Sum-to-zero monthly effect with a small late-winter peak and a large summer peak."""
    m = np.arange(1, months_per_year + 1)

    def bump(c):
        d = np.minimum(np.abs(m - c), months_per_year - np.abs(m - c))
        return np.exp(-0.5 * (d / width) ** 2)

    f = spring_height * bump(spring_peak) + summer_height * bump(summer_peak)
    return f - f.mean()


@dataclass
class SimConfig:
    """Generative configuration. ``beta`` maps covariate names to coefficients;
    names starting with ``static_`` / ``dynamic_`` get synthetic covariates of
    kind ``covariate_kind`` ("white", "smooth" or "constant"); ``time`` is the
    normalised time trend."""

    n_rows: int = 30
    n_cols: int = 30
    cell_size: float = 2.0
    n_years: int = 24
    months_per_year: int = 12
    n_months: int | None = None
    intercept: float = -4.0
    beta: dict = field(default_factory=dict)
    seasonal: np.ndarray | None = None
    variant: ModelVariant | str = ModelVariant.AR1_YEARLY
    range: float = 20.0
    sd: float = 1.36
    rho: float = 0.89
    seed: int = 0
    covariate_kind: str = "white"
    max_edge_inner: float = 5.0
    max_edge_outer: float = 12.0
    margin: float = 30.0
    exposure: float | None = None

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if self.seasonal is None:
            self.seasonal = np.zeros(self.months_per_year)
        self.seasonal = np.asarray(self.seasonal, dtype=float)
        if self.seasonal.shape != (self.months_per_year,):
            raise ValueError("seasonal effect needs one value per calendar month")
        if abs(self.seasonal.sum()) > 1e-8:
            raise ValueError("seasonal effect must sum to zero")
        if self.variant.has_spatial and not (self.range > 0 and self.sd > 0):
            raise ValueError("range and sd must be positive")
        if self.variant is ModelVariant.AR1_YEARLY and not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if self.n_months is None:
            self.n_months = self.n_years * self.months_per_year
        if not 0 < self.n_months <= self.n_years * self.months_per_year:
            raise ValueError("n_months inconsistent with n_years")
        if self.covariate_kind not in ("white", "smooth", "constant"):
            raise ValueError(f"unknown covariate kind {self.covariate_kind!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec((0.0, 0.0), self.cell_size, self.n_rows, self.n_cols)


@dataclass
class SimulatedData:
    records: pd.DataFrame
    covariates: CovariateTable
    grid: GridSpec
    mesh: Mesh | None
    truth: dict


def _smooth_field(grid, rng, length=10.0):
    xy = grid.active_centers()
    k = rng.standard_normal((40, 2)) / length
    ph = rng.uniform(0, 2 * np.pi, 40)
    return np.sqrt(2.0 / 40) * np.cos(xy @ k.T + ph).sum(axis=1)


def _covariate_values(kind, shape, rng, grid=None):
    if kind == "constant":
        return np.full(shape, 1.0)
    if kind == "smooth" and grid is not None and len(shape) == 1:
        return _smooth_field(grid, rng)
    return rng.standard_normal(shape)


def simulate_dataset(config: SimConfig, mesh: Mesh | None = None) -> SimulatedData:
    """Counts ``N ~ Poisson(exposure * exp(eta))`` for every active cell and month."""
    grid = config.grid
    cells = grid.cell_ids()
    months = np.arange(1, config.n_months + 1)
    n_c, n_t = len(cells), len(months)

    static = pd.DataFrame(index=pd.Index(cells, name="cell_id"))
    dyn_cols = {}
    for j, name in enumerate(sorted(config.beta)):
        rng = _rng(config.seed, 1, j)
        if name.startswith("static_"):
            static[name] = _covariate_values(config.covariate_kind, (n_c,), rng, grid)
        elif name.startswith("dynamic_"):
            dyn_cols[name] = _covariate_values(config.covariate_kind, (n_c, n_t), rng).ravel()
        elif name != "time":
            raise ValueError(f"cannot generate covariate {name!r}")
    idx = pd.MultiIndex.from_product([cells, months], names=["cell_id", "month_index"])
    dynamic = pd.DataFrame(dyn_cols, index=idx)
    table = CovariateTable.assemble(static, dynamic)
    if "time" not in config.beta:
        table.dynamic = table.dynamic.drop(columns="time")

    cell_col = np.repeat(cells, n_t)
    month_col = np.tile(months, n_c)
    X = table.design(cell_col, month_col)
    beta = np.array([config.beta[name] for name in table.names])
    eta = config.intercept + X @ beta + config.seasonal[calendar_month(month_col, config.months_per_year) - 1]

    truth = {"intercept": config.intercept, "beta": dict(zip(table.names, beta)),
             "seasonal": config.seasonal.copy(), "variant": config.variant.value}
    if config.variant.has_spatial:
        if mesh is None:
            mesh = build_mesh(grid, config.max_edge_inner, config.max_edge_outer, config.margin)
        C, G = fem_matrices(mesh)
        Qs = matern_precision(MaternHyper(config.range, config.sd), C, G)
        eps = sample_gmrf(Qs, config.n_years, seed=int(_rng(config.seed, 2).integers(2**32)))
        if config.variant is ModelVariant.SHARED_SPATIAL:
            W = np.repeat(eps[:1], config.n_years, axis=0)
        elif config.variant is ModelVariant.INDEPENDENT_YEARLY:
            W = eps
        else:
            W = np.empty_like(eps)
            W[0] = eps[0]
            s = np.sqrt(1.0 - config.rho**2)
            for a in range(1, config.n_years):
                W[a] = config.rho * W[a - 1] + s * eps[a]
        A = projector(mesh, grid.centers(cells))
        w_cell = (A @ W.T).T  # (years, cells)
        years = year_index(month_col, config.months_per_year)
        eta = eta + w_cell[years, np.searchsorted(cells, cell_col)]
        truth.update(range=config.range, sd=config.sd, rho=config.rho, field=W, w_cell=w_cell)
    else:
        mesh = None

    if np.max(eta) > ETA_MAX:
        raise OverflowError(
            f"linear predictor reaches {np.max(eta):.1f} > {ETA_MAX}; lower the intercept or effects"
        )
    exposure = grid.cell_area if config.exposure is None else config.exposure
    mu = exposure * np.exp(eta)
    counts = _rng(config.seed, 3).poisson(mu)
    records = pd.DataFrame({"cell_id": cell_col, "month_index": month_col,
                            "count": counts.astype(np.int64), "exposure": float(exposure)})
    truth["eta"] = eta
    return SimulatedData(records, table, grid, mesh, truth)


def brute_force_posterior(model: LatentModel, theta_grid, latent_grid, log_prior_theta=None):
    """Direct quadrature of ``p(y | theta)`` over a tensor latent grid.

    ``latent_grid`` is a list with one 1-D node array per latent coordinate
    (at most 3). Returns a DataFrame with one row per theta, holding the log
    marginal likelihood and the posterior normalised over the theta grid
    with trapezoid weights (a single theta gets posterior 1).
    """
    if model.dim > 3:
        raise ValueError(f"brute-force integration refused for latent dimension {model.dim} > 3")
    if len(latent_grid) != model.dim:
        raise ValueError("need one grid per latent coordinate")
    theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=float))
    if theta_grid.size == 0:
        theta_grid = np.zeros((1, 0))
    D = np.hstack([model.Z, model.S.toarray()])
    mesh_pts = np.meshgrid(*latent_grid, indexing="ij")
    X = np.stack([m.ravel() for m in mesh_pts], axis=1)
    eta = X @ D.T
    if model.family == "poisson":
        ll = (eta * model.y).sum(axis=1) - (model.E * np.exp(eta)).sum(axis=1) - model.log_factorial.sum()
    else:
        r = model.y - eta
        tau = model.noise_precision
        ll = 0.5 * len(model.y) * np.log(tau / (2 * np.pi)) - 0.5 * tau * (r * r).sum(axis=1)
    out = []
    for th in theta_grid:
        Q = model.prior_precision(th).toarray()
        sign, ld = np.linalg.slogdet(Q)
        lp = 0.5 * ld - 0.5 * model.dim * np.log(2 * np.pi) - 0.5 * np.einsum("ij,jk,ik->i", X, Q, X)
        logf = (ll + lp).reshape(mesh_pts[0].shape)
        shift = logf.max()
        vals = np.exp(logf - shift)
        for ax in range(model.dim - 1, -1, -1):
            vals = trapezoid(vals, latent_grid[ax], axis=ax)
        out.append(np.log(vals) + shift)
    log_marg = np.array(out)
    df = pd.DataFrame(theta_grid, columns=model.theta_names) if theta_grid.shape[1] else pd.DataFrame(index=range(1))
    df["log_marginal"] = log_marg
    lpt = np.zeros(len(theta_grid))
    if log_prior_theta is not None:
        lpt = np.array([log_prior_theta(th) for th in theta_grid])
    logpost = log_marg + lpt
    if len(theta_grid) == 1:
        post = np.ones(1)
    else:
        if theta_grid.shape[1] != 1:
            raise ValueError("theta normalisation implemented for a 1-D theta grid")
        t = theta_grid[:, 0]
        w = np.exp(logpost - logsumexp(logpost))
        post = w / trapezoid(w, t)
    df["posterior"] = post
    return df


def simulate_station_series(model, xy, n_months: int, seed: int, mean: float = 0.0) -> np.ndarray:
    """Gaussian space-time series (stations, months) with the covariance of a variogram model.

    Separable models are sampled through the Kronecker factorisation of the
    covariance; product-sum models through a dense Cholesky factor.
    """
    from scipy.spatial.distance import cdist

    xy = np.asarray(xy, dtype=float)
    H = cdist(xy, xy)
    t = np.arange(n_months, dtype=float)
    U = np.abs(t[:, None] - t[None, :])
    rng = _rng(seed, 4)
    jitter = 1e-10
    if model.kind == "separable":
        Cs = 1.0 - model.spatial(H)
        Ct = 1.0 - model.temporal(U)
        Ls = np.linalg.cholesky(Cs + jitter * np.eye(len(xy)))
        Lt = np.linalg.cholesky(Ct + jitter * np.eye(n_months))
        z = rng.standard_normal((len(xy), n_months))
        return mean + np.sqrt(model.sill) * Ls @ z @ Lt.T
    HH = np.repeat(np.repeat(H, n_months, axis=0), n_months, axis=1)
    UU = np.tile(U, (len(xy), len(xy)))
    C = model.covariance(HH, UU)
    L = np.linalg.cholesky(C + jitter * model.limit * np.eye(len(C)))
    return mean + (L @ rng.standard_normal(len(C))).reshape(len(xy), n_months)
