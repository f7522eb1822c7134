"""Analysis grid, fine-raster aggregation and covariate assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "ConfigurationError",
    "GridSpec",
    "FineRaster",
    "CellAggregate",
    "CovariateTable",
    "aggregate_mean_sd",
    "interface_covariate",
    "monthly_anomalies",
    "sqrt_transform",
    "calendar_month",
    "year_index",
    "normalized_time",
    "CovariateStandardizer",
    "MonthlyAnomalies",
    "read_ascii_grid",
    "write_ascii_grid",
    "read_xyz_csv",
]


class ConfigurationError(ValueError):
    """Inputs are inconsistent with each other (geometry, resolution, keys)."""


def calendar_month(month_index, months_per_year: int = 12):
    """Calendar month 1..12 of a 1-based running month index."""
    return (np.asarray(month_index) - 1) % months_per_year + 1


def year_index(month_index, months_per_year: int = 12):
    """0-based year of a 1-based running month index."""
    return (np.asarray(month_index) - 1) // months_per_year


def normalized_time(month_index, t_min=None, t_max=None):
    t = np.asarray(month_index, dtype=float)
    t_min = t.min() if t_min is None else t_min
    t_max = t.max() if t_max is None else t_max
    if t_max == t_min:
        return np.zeros_like(t)
    return (t - t_min) / (t_max - t_min)


@dataclass(frozen=True)
class GridSpec:
    """Regular coarse grid; row 0 is the southern row."""

    origin: tuple[float, float]
    cell_size: float
    n_rows: int
    n_cols: int
    active_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigurationError("cell_size must be positive")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigurationError("grid needs at least one row and one column")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        mask = self.active_mask
        if mask is None:
            mask = np.ones((self.n_rows, self.n_cols), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_rows, self.n_cols):
            raise ConfigurationError(
                f"active_mask shape {mask.shape} != ({self.n_rows}, {self.n_cols})"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "active_mask", mask)

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    def cell_ids(self) -> np.ndarray:
        """Ids (row * n_cols + col) of active cells, ascending."""
        return np.flatnonzero(self.active_mask.ravel())

    def row_col(self, cell_id):
        cell_id = np.asarray(cell_id)
        return cell_id // self.n_cols, cell_id % self.n_cols

    def centers(self, cell_id) -> np.ndarray:
        r, c = self.row_col(cell_id)
        x = self.origin[0] + (c + 0.5) * self.cell_size
        y = self.origin[1] + (r + 0.5) * self.cell_size
        return np.column_stack([x, y]).astype(float)

    def active_centers(self) -> np.ndarray:
        return self.centers(self.cell_ids())

    @property
    def extent(self):
        x0, y0 = self.origin
        return x0, y0, x0 + self.n_cols * self.cell_size, y0 + self.n_rows * self.cell_size


@dataclass(frozen=True)
class FineRaster:
    """Fine-resolution raster; ``values[0]`` is the southern row."""

    values: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    variable_name: str = "value"
    missing_code: float | None = -9999.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ConfigurationError("raster values must be a 2-D array")
        if not self.resolution > 0:
            raise ConfigurationError("raster resolution must be positive")
        object.__setattr__(self, "values", v)

    def valid(self) -> np.ndarray:
        ok = np.isfinite(self.values)
        if self.missing_code is not None:
            ok &= self.values != self.missing_code
        return ok


@dataclass
class CellAggregate:
    cell_id: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    n_valid: np.ndarray
    missing_cells: list = field(default_factory=list)

    def to_frame(self, prefix: str = "") -> pd.DataFrame:
        return pd.DataFrame(
            {f"{prefix}mean": self.mean, f"{prefix}sd": self.sd},
            index=pd.Index(self.cell_id, name="cell_id"),
        )


def _integer_ratio(a, b, what):
    r = a / b
    k = int(round(r))
    if abs(r - k) > 1e-9 * max(1.0, abs(r)):
        raise ConfigurationError(f"{what}: {a} is not a multiple of {b}")
    return k


def aggregate_mean_sd(raster: FineRaster, grid: GridSpec) -> CellAggregate:
    """Mean and population standard deviation of the fine pixels inside each active cell.

    Missing pixels are ignored. Active cells without a single valid pixel get
    NaN statistics and are listed in ``missing_cells``.
    """
    f = _integer_ratio(grid.cell_size, raster.resolution, "cell_size vs raster resolution")
    if f < 1:
        raise ConfigurationError("raster resolution coarser than the grid")
    off_c = _integer_ratio(grid.origin[0] - raster.origin[0], raster.resolution, "x offset")
    off_r = _integer_ratio(grid.origin[1] - raster.origin[1], raster.resolution, "y offset")
    if off_c < 0 or off_r < 0:
        raise ConfigurationError("raster does not cover the grid origin")
    nr, nc = grid.n_rows * f, grid.n_cols * f
    if raster.values.shape[0] < off_r + nr or raster.values.shape[1] < off_c + nc:
        raise ConfigurationError("raster does not cover the grid extent")

    vals = raster.values[off_r:off_r + nr, off_c:off_c + nc]
    ok = raster.valid()[off_r:off_r + nr, off_c:off_c + nc]
    blocks = vals.reshape(grid.n_rows, f, grid.n_cols, f).swapaxes(1, 2).reshape(grid.n_rows, grid.n_cols, f * f)
    okb = ok.reshape(grid.n_rows, f, grid.n_cols, f).swapaxes(1, 2).reshape(grid.n_rows, grid.n_cols, f * f)

    ids = grid.cell_ids()
    r, c = grid.row_col(ids)
    b = blocks[r, c]
    m = okb[r, c]
    n = m.sum(axis=1)
    x = np.where(m, b, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = x.sum(axis=1) / n
        dev = np.where(m, b - mean[:, None], 0.0)
        sd = np.sqrt((dev**2).sum(axis=1) / n)
    empty = n == 0
    mean[empty] = np.nan
    sd[empty] = np.nan
    return CellAggregate(ids, mean, sd, n, missing_cells=ids[empty].tolist())


def interface_covariate(a, b) -> pd.Series:
    """Elementwise product of two raw per-cell covariates (a pd.Series or array each)."""
    if isinstance(a, pd.Series) or isinstance(b, pd.Series):
        if not (isinstance(a, pd.Series) and isinstance(b, pd.Series)):
            raise ConfigurationError("both inputs must be keyed by cell_id")
        if not a.index.sort_values().equals(b.index.sort_values()):
            raise ConfigurationError("interface covariate inputs cover different cells")
        return a * b.reindex(a.index)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    return a * b


def sqrt_transform(values):
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        raise ValueError("square-root transform needs non-negative values")
    return np.sqrt(values)


def monthly_anomalies(values, months_per_year: int = 12, first_month: int = 1):
    """Remove the global calendar-month mean from a (cells, months) array.

    Returns ``(anomalies, means)``; ``means[m - 1]`` is the average over all
    cells and years of calendar month ``m``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("values must be shaped (n_cells, n_months)")
    if not np.all(np.isfinite(values)):
        raise ValueError("values contain missing entries")
    months = calendar_month(np.arange(first_month, first_month + values.shape[1]), months_per_year)
    means = np.full(months_per_year, np.nan)
    anomalies = np.empty_like(values)
    for m in range(1, months_per_year + 1):
        cols = months == m
        if cols.any():
            means[m - 1] = values[:, cols].mean()
            anomalies[:, cols] = values[:, cols] - means[m - 1]
    return anomalies, means


class MonthlyAnomalies(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`monthly_anomalies` for (cells, months) arrays."""

    def __init__(self, months_per_year=12, first_month=1, sqrt=False):
        self.months_per_year = months_per_year
        self.first_month = first_month
        self.sqrt = sqrt

    def fit(self, X, y=None):
        X = sqrt_transform(X) if self.sqrt else np.asarray(X, dtype=float)
        _, self.monthly_means_ = monthly_anomalies(X, self.months_per_year, self.first_month)
        return self

    def transform(self, X):
        check_is_fitted(self, "monthly_means_")
        X = sqrt_transform(X) if self.sqrt else np.asarray(X, dtype=float)
        months = calendar_month(
            np.arange(self.first_month, self.first_month + X.shape[1]), self.months_per_year
        )
        return X - self.monthly_means_[months - 1][None, :]


class CovariateStandardizer(TransformerMixin, BaseEstimator):
    """Centre and scale columns to mean 0 and sample (ddof=1) sd 1.

    Columns listed in ``passthrough`` are left untouched.
    """

    def __init__(self, passthrough=("time",)):
        self.passthrough = passthrough

    def fit(self, X, y=None):
        X = pd.DataFrame(X)
        cols = [c for c in X.columns if c not in set(self.passthrough or ())]
        self.mean_ = X[cols].mean()
        sd = X[cols].std(ddof=1)
        self.scale_ = sd.where(sd > 0, 1.0)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = pd.DataFrame(X).copy()
        cols = list(self.mean_.index)
        X[cols] = (X[cols] - self.mean_) / self.scale_
        return X


@dataclass
class CovariateTable:
    """Standardised static (per cell) and dynamic (per cell and month) covariates."""

    static: pd.DataFrame
    dynamic: pd.DataFrame
    standardization: dict = field(default_factory=dict)
    time_name: str = "time"

    @classmethod
    def assemble(cls, static: pd.DataFrame, dynamic: pd.DataFrame | None = None,
                 month_index=None, time_name: str = "time", standardize: bool = True):
        """Validate, add the normalised time covariate and standardise.

        ``static`` is indexed by cell_id; ``dynamic`` by (cell_id, month_index).
        If ``dynamic`` is None, ``month_index`` must list the months.
        """
        static = static.copy()
        static.index.name = "cell_id"
        cells = static.index.to_numpy()
        if dynamic is None:
            if month_index is None:
                raise ConfigurationError("month_index required without dynamic covariates")
            months = np.asarray(month_index)
            idx = pd.MultiIndex.from_product([cells, months], names=["cell_id", "month_index"])
            dynamic = pd.DataFrame(index=idx)
        else:
            dynamic = dynamic.copy()
            dynamic.index.names = ["cell_id", "month_index"]
            months = np.unique(dynamic.index.get_level_values("month_index"))
            full = pd.MultiIndex.from_product([cells, months], names=["cell_id", "month_index"])
            if len(dynamic.index.unique()) != len(full) or not full.isin(dynamic.index).all():
                raise ConfigurationError("dynamic covariates missing (cell, month) pairs")
            dynamic = dynamic.reindex(full)
        if static.isna().any().any() or dynamic.isna().any().any():
            bad = list(static.columns[static.isna().any()]) + list(dynamic.columns[dynamic.isna().any()])
            raise ConfigurationError(f"missing covariate values in {bad}")
        dynamic[time_name] = normalized_time(dynamic.index.get_level_values("month_index"))

        standardization = {}
        if standardize:
            for frame in (static, dynamic):
                sc = CovariateStandardizer(passthrough=(time_name,)).fit(frame)
                frame[list(sc.mean_.index)] = sc.transform(frame)[list(sc.mean_.index)]
                for name in sc.mean_.index:
                    standardization[name] = (float(sc.mean_[name]), float(sc.scale_[name]))
        return cls(static, dynamic, standardization, time_name)

    @property
    def names(self) -> list[str]:
        return list(self.dynamic.columns) + list(self.static.columns)

    def design(self, cell_id, month_index) -> np.ndarray:
        """Covariate rows for records, columns ordered as ``names``."""
        cell_id = np.asarray(cell_id)
        month_index = np.asarray(month_index)
        key = pd.MultiIndex.from_arrays([cell_id, month_index])
        dyn = self.dynamic.reindex(key).to_numpy(float)
        st = self.static.reindex(cell_id).to_numpy(float)
        out = np.hstack([dyn, st])
        if np.isnan(out).any():
            bad = np.flatnonzero(np.isnan(out).any(axis=1))
            raise KeyError(
                "no covariates for records "
                + ", ".join(f"(cell {cell_id[i]}, month {month_index[i]})" for i in bad[:5])
                + (" ..." if bad.size > 5 else "")
            )
        return out

    def to_csv(self, static_path, dynamic_path) -> None:
        self.static.to_csv(static_path, float_format="%.17g")
        self.dynamic.to_csv(dynamic_path, float_format="%.17g")

    @classmethod
    def from_csv(cls, static_path, dynamic_path, time_name: str = "time"):
        static = pd.read_csv(static_path, index_col="cell_id", float_precision="round_trip")
        dynamic = pd.read_csv(dynamic_path, index_col=["cell_id", "month_index"],
                              float_precision="round_trip")
        return cls(static, dynamic, {}, time_name)


def read_ascii_grid(path, variable_name: str | None = None) -> FineRaster:
    """Read a headered text raster (ncols, nrows, xllcorner, yllcorner, cellsize, NODATA_value)."""
    path = Path(path)
    header = {}
    with path.open() as fh:
        for _ in range(6):
            pos = fh.tell()
            line = fh.readline()
            parts = line.split()
            if len(parts) != 2 or parts[0][0].isdigit() or parts[0][0] == "-":
                fh.seek(pos)
                break
            header[parts[0].lower()] = float(parts[1])
        data = np.loadtxt(fh, ndmin=2)
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if data.shape != (nrows, ncols):
        raise ConfigurationError(f"{path}: expected {nrows}x{ncols} values, found {data.shape}")
    x0 = header.get("xllcorner", header.get("xllcenter"))
    y0 = header.get("yllcorner", header.get("yllcenter"))
    res = header["cellsize"]
    if "xllcenter" in header:
        x0 -= 0.5 * res
        y0 -= 0.5 * res
    return FineRaster(
        values=data[::-1].copy(),
        resolution=res,
        origin=(x0, y0),
        variable_name=variable_name or path.stem,
        missing_code=header.get("nodata_value"),
    )


def write_ascii_grid(path, values, origin, cellsize, nodata=-9999.0) -> None:
    """Write a south-first array as a headered text raster (north row first on disk)."""
    values = np.asarray(values, dtype=float)
    out = np.where(np.isfinite(values), values, nodata)[::-1]
    with Path(path).open("w") as fh:
        fh.write(f"ncols {values.shape[1]}\nnrows {values.shape[0]}\n")
        fh.write(f"xllcorner {origin[0]!r}\nyllcorner {origin[1]!r}\n")
        fh.write(f"cellsize {cellsize!r}\nNODATA_value {nodata!r}\n")
        np.savetxt(fh, out, fmt="%.17g")


def read_xyz_csv(path, resolution: float, variable_name: str = "value", missing_code=-9999.0) -> FineRaster:
    """Columnar (x, y, value) pixel-centre CSV onto a regular raster."""
    df = pd.read_csv(path, float_precision="round_trip")
    x = df["x"].to_numpy(float)
    y = df["y"].to_numpy(float)
    x0 = x.min() - 0.5 * resolution
    y0 = y.min() - 0.5 * resolution
    c = np.rint((x - x0) / resolution - 0.5).astype(int)
    r = np.rint((y - y0) / resolution - 0.5).astype(int)
    values = np.full((r.max() + 1, c.max() + 1), np.nan)
    values[r, c] = df["value"].to_numpy(float)
    return FineRaster(values, resolution, (x0, y0), variable_name, missing_code)
