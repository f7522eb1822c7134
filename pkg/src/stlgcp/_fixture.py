"""Generator of the small synthetic fixture bundled with the package.

The fixture holds raw pipeline inputs: a grid file, two fine land-cover
rasters, monthly weather station series, a fitted variogram for each weather
variable, and fire counts simulated from covariates built by the pipeline
itself. ``stlgcp.fixture_path()`` locates the bundled copy; run this module
to regenerate it::

    python -m stlgcp._fixture OUT_DIR
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .grid import FineRaster, GridSpec, aggregate_mean_sd, calendar_month, monthly_anomalies, write_ascii_grid
from .grid import CovariateTable, interface_covariate, sqrt_transform, year_index
from .io import write_grid_spec, write_key_values
from .kriging import krige
from .mesh import build_mesh, fem_matrices, projector
from .model import ar1_precision
from .simulate import _rng, sample_gmrf, simulate_station_series, two_peak_seasonal
from .spde import MaternHyper, matern_precision
from .variogram import ExponentialComponent, StationData, VariogramModel, write_stations

N_ROWS, N_COLS, CELL, RES = 12, 12, 2.0, 0.2
N_YEARS = 3
SEED = 20170
MESH = dict(max_edge_inner=5.0, max_edge_outer=12.0, margin=15.0)
TRUE = dict(intercept=-2.5, range=15.0, sd=1.0, rho=0.8)


def _smooth_raster(rng, shape, length_px):
    """Smooth field in [0, 1] from random Fourier features."""
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(float)
    k = rng.standard_normal((30, 2)) / length_px
    ph = rng.uniform(0, 2 * np.pi, 30)
    f = np.cos(xx[..., None] * k[:, 0] + yy[..., None] * k[:, 1] + ph).sum(-1)
    return 1.0 / (1.0 + np.exp(-f / np.sqrt(15)))


def build_fixture(out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mask = np.ones((N_ROWS, N_COLS), dtype=bool)
    mask[-3:, -4:] = False  # an inactive corner (sea)
    grid = GridSpec((0.0, 0.0), CELL, N_ROWS, N_COLS, mask)
    write_grid_spec(out / "grid.txt", grid, "grid_mask.asc")

    # fine land-cover rasters, one pixel = 0.2 km; a few missing pixels
    f = int(CELL / RES)
    shape = (N_ROWS * f, N_COLS * f)
    forest = _smooth_raster(_rng(SEED, 10), shape, 25.0)
    urban = 0.6 * _smooth_raster(_rng(SEED, 11), shape, 12.0) ** 3
    holes = _rng(SEED, 12).random(shape) < 0.02
    forest[holes] = -9999.0
    write_ascii_grid(out / "forest.asc", forest, (0.0, 0.0), RES)
    write_ascii_grid(out / "urban.asc", urban, (0.0, 0.0), RES)

    # weather stations around and inside the grid
    n_months = 12 * N_YEARS
    st_rng = _rng(SEED, 13)
    xy = st_rng.uniform(-10, 34, (6, 2))
    months = np.arange(1, n_months + 1)
    season = np.cos(2 * np.pi * (calendar_month(months) - 7) / 12)
    tavg_model = VariogramModel("product_sum", ExponentialComponent(4.0, 60.0, 0.1),
                                ExponentialComponent(3.0, 4.0, 0.1), k=0.05)
    prcp_model = VariogramModel("separable", ExponentialComponent(0.438, 60.0, 0.562),
                                ExponentialComponent(0.438, 5.33, 0.562), sill=0.019)
    tavg = 15 + 8 * season + simulate_station_series(tavg_model, xy, n_months, SEED + 1)
    sq = 0.5 - 0.15 * season + simulate_station_series(prcp_model, xy, n_months, SEED + 2)
    prcp = np.maximum(sq, 0.0) ** 2
    rows = []
    for var, vals in (("TAVG", tavg), ("PRCP", prcp)):
        vals = vals.copy()
        vals[0, 5] = np.nan  # a missing station-month
        d = StationData([f"S{i:02d}" for i in range(6)], xy, vals, var)
        p = out / f"_{var}.csv"
        write_stations(d, p)
        rows.append(pd.read_csv(p))
        p.unlink()
    pd.concat(rows).to_csv(out / "stations.csv", index=False, float_format="%.10g")
    tavg_model.save(out / "variogram_TAVG.txt")
    prcp_model.save(out / "variogram_PRCP.txt")

    # covariates exactly as the pipeline builds them, then counts
    cells = grid.cell_ids()
    centers = grid.centers(cells)
    fr = aggregate_mean_sd(FineRaster(forest, RES), grid).to_frame("forest_")
    ur = aggregate_mean_sd(FineRaster(urban, RES), grid).to_frame("urban_")
    static = fr.join(ur)
    static["forest_urban"] = interface_covariate(static["forest_mean"], static["urban_mean"])
    dyn = {}
    for var, vals, model, tr in (("TAVG", tavg, tavg_model, None), ("PRCP", prcp, prcp_model, "sqrt")):
        vals = vals.copy()
        vals[0, 5] = np.nan
        k = krige(model, StationData(np.arange(6), xy, vals, var), centers, transform=tr)
        wide = k["prediction"].to_numpy().reshape(n_months, len(cells)).T
        dyn[f"{var}_anom"] = monthly_anomalies(wide)[0]
        if var == "PRCP":
            dyn["sqrt_PRCP_anom"] = monthly_anomalies(sqrt_transform(wide))[0]
    idx = pd.MultiIndex.from_product([cells, months], names=["cell_id", "month_index"])
    dynamic = pd.DataFrame({k: v.ravel() for k, v in dyn.items()}, index=idx)
    table = CovariateTable.assemble(static, dynamic)
    beta = {"TAVG_anom": 0.4, "PRCP_anom": -0.2, "sqrt_PRCP_anom": -0.1, "time": 0.0,
            "forest_mean": 0.5, "forest_sd": 0.0, "urban_mean": -0.3, "urban_sd": 0.0, "forest_urban": 0.2}
    cell_col = np.repeat(cells, n_months)
    month_col = np.tile(months, len(cells))
    X = table.design(cell_col, month_col)
    eta = TRUE["intercept"] + X @ np.array([beta[n] for n in table.names])
    eta += two_peak_seasonal()[calendar_month(month_col) - 1]

    mesh = build_mesh(grid, **MESH)
    C, G = fem_matrices(mesh)
    Qs = matern_precision(MaternHyper(TRUE["range"], TRUE["sd"]), C, G)
    T = ar1_precision(TRUE["rho"], N_YEARS)
    import scipy.sparse as sp

    W = sample_gmrf(sp.kron(T, Qs, format="csc"), 1, SEED + 3)[0].reshape(N_YEARS, -1)
    A = projector(mesh, centers)
    w_cell = (A @ W.T).T
    eta += w_cell[year_index(month_col), np.searchsorted(cells, cell_col)]
    counts = _rng(SEED, 14).poisson(grid.cell_area * np.exp(eta))
    pd.DataFrame({"cell_id": cell_col, "month_index": month_col, "count": counts}).to_csv(
        out / "counts.csv", index=False)

    write_key_values(out / "fit_config.txt", {
        "variant": "ar1_yearly", "budget": 120, "n_restarts": 1, **{k: float(v) for k, v in MESH.items()},
    })


if __name__ == "__main__":  # pragma: no cover
    build_fixture(sys.argv[1] if len(sys.argv) > 1 else "fixture")
