"""File formats: key-value configs, grid specs, fit outputs, manifests and rasters."""
from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import pandas as pd

from .grid import ConfigurationError, GridSpec, read_ascii_grid, write_ascii_grid

__all__ = [
    "read_key_values",
    "write_key_values",
    "read_grid_spec",
    "write_grid_spec",
    "file_digest",
    "package_versions",
    "write_manifest",
    "write_fit_result",
    "render_rasters",
    "month_label",
]


def read_key_values(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise ConfigurationError(f"{path}:{n}: expected 'key = value', got {line!r}")
            key = key.strip()
            if key in out:
                raise ConfigurationError(f"{path}:{n}: duplicate key {key!r}")
            out[key] = val.strip()
    return out


def write_key_values(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key, val in values.items():
            if isinstance(val, float):
                val = repr(val)
            fh.write(f"{key} = {val}\n")


_GRID_KEYS = {"origin_x", "origin_y", "cell_size", "n_rows", "n_cols", "active_mask"}


def read_grid_spec(path) -> GridSpec:
    """Grid description file; ``active_mask`` optionally names a 0/1 text raster (relative paths
    are resolved next to the grid file)."""
    kv = read_key_values(path)
    unknown = set(kv) - _GRID_KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown grid keys {sorted(unknown)}")
    try:
        origin = (float(kv.get("origin_x", 0.0)), float(kv.get("origin_y", 0.0)))
        cell_size = float(kv["cell_size"])
        n_rows, n_cols = int(kv["n_rows"]), int(kv["n_cols"])
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing grid key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    mask = None
    if kv.get("active_mask"):
        mpath = Path(kv["active_mask"])
        if not mpath.is_absolute():
            mpath = Path(path).parent / mpath
        raster = read_ascii_grid(mpath)
        mask = np.asarray(raster.values) > 0
    return GridSpec(origin, cell_size, n_rows, n_cols, mask)


def write_grid_spec(path, grid: GridSpec, mask_name: str | None = None) -> None:
    values = {"origin_x": grid.origin[0], "origin_y": grid.origin[1], "cell_size": float(grid.cell_size),
              "n_rows": grid.n_rows, "n_cols": grid.n_cols}
    if not grid.active_mask.all():
        mask_name = mask_name or Path(path).stem + "_mask.asc"
        write_ascii_grid(Path(path).parent / mask_name, grid.active_mask.astype(float), grid.origin,
                         grid.cell_size)
        values["active_mask"] = mask_name
    write_key_values(path, values)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def package_versions() -> dict:
    import cvxopt
    import scipy
    import sklearn

    from . import __version__

    return {"stlgcp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "scikit-learn": sklearn.__version__,
            "cvxopt": cvxopt.__version__}


def write_manifest(out_dir, verb: str, argv, config: dict, inputs, outputs, seed, threads) -> Path:
    """Record what is needed to rerun a verb and check its outputs.

    ``inputs`` and ``outputs`` are paths; the manifest stores their SHA-256
    digests. It carries no timestamps so reruns produce identical manifests.
    """
    out_dir = Path(out_dir)
    manifest = {
        "verb": verb,
        "argv": list(argv),
        "config": {k: (v if isinstance(v, (int, float, str, bool, list, type(None))) else str(v))
                   for k, v in sorted(config.items())},
        "seed": seed,
        "threads": threads,
        "inputs": {str(p): file_digest(p) for p in sorted(set(map(str, inputs)))},
        "outputs": {Path(p).relative_to(out_dir).as_posix(): file_digest(p)
                    for p in sorted(set(map(str, outputs)))},
        "versions": package_versions(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _csv(frame: pd.DataFrame, path, index=False):
    frame.to_csv(path, index=index, float_format="%.17g")
    return Path(path)


def write_fit_result(fit, model, out_dir) -> list[Path]:
    """Hyperparameter, fixed-effect, seasonal and latent tables plus run metadata."""
    from .laplace import seasonal_odds_ratio

    out_dir = Path(out_dir)
    hyp = fit.hyperparameters.reset_index()
    hyp.insert(3, "theta", fit.theta_hat)
    hyp.insert(4, "theta_sd", fit.theta_se)
    fe = fit.fixed_effects.reset_index()
    seas = seasonal_odds_ratio(fit, 6)
    seas.insert(1, "effect", fit.seasonal_mean)
    latent = fit.latent_frame(model.latent_names())
    meta = {
        "variant": fit.variant.value,
        "theta_names": fit.theta_names,
        "theta_hat": [float(v) for v in fit.theta_hat],
        "theta_cov": [[float(v) for v in row] for row in fit.theta_cov],
        "log_marginal": fit.log_marginal,
        "log_posterior": fit.log_posterior,
        "converged": fit.converged,
        "diagnostics": {k: v for k, v in fit.diagnostics.items() if k != "seconds"},
        "covariate_names": model.covariate_names,
        "n_records": int(len(model.y)),
        "latent_dimension": int(model.dim),
    }
    paths = [
        _csv(hyp, out_dir / "hyperparameters.csv"),
        _csv(fe, out_dir / "fixed_effects.csv"),
        _csv(seas, out_dir / "seasonal_effect.csv"),
        _csv(latent, out_dir / "latent.csv"),
    ]
    meta_path = out_dir / "run_metadata.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")
    paths.append(meta_path)
    return paths


def month_label(month_index: int, start_year: int, start_month: int = 1) -> str:
    k = (start_month - 1) + int(month_index) - 1
    return f"{start_year + k // 12:04d}-{k % 12 + 1:02d}"


def render_rasters(predictions: pd.DataFrame, grid: GridSpec, out_dir, months=None, column: str = "mean",
                   start_year: int = 2000, start_month: int = 1, prefix: str = "log_intensity",
                   nodata: float = -9999.0) -> list[Path]:
    """One headered text raster per month; inactive cells carry ``nodata``.

    File names encode the calendar year and month, e.g. ``log_intensity_2017-07.asc``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    need = {"cell_id", "month_index", column}
    if need - set(predictions.columns):
        raise ValueError(f"predictions lack columns {sorted(need - set(predictions.columns))}")
    available = np.unique(predictions["month_index"].to_numpy())
    months = available if months is None else np.asarray(months, dtype=int)
    unknown = np.setdiff1d(months, available)
    if unknown.size:
        raise ValueError(f"no predictions for month(s) {unknown.tolist()}")
    active = grid.cell_ids()
    paths = []
    for m in months:
        sub = predictions[predictions["month_index"] == m]
        vals = pd.Series(sub[column].to_numpy(float), index=sub["cell_id"].to_numpy())
        missing = np.setdiff1d(active, vals.index.to_numpy())
        if missing.size:
            raise ValueError(f"month {m}: predictions missing for active cells {missing[:10].tolist()}")
        img = np.full(grid.n_rows * grid.n_cols, np.nan)
        img[active] = vals.reindex(active).to_numpy()
        path = out_dir / f"{prefix}_{month_label(m, start_year, start_month)}.asc"
        write_ascii_grid(path, img.reshape(grid.n_rows, grid.n_cols), grid.origin, grid.cell_size, nodata)
        paths.append(path)
    return paths
