"""Command-line entry point: ``stlgcp <verb> [options]``.

Every verb writes its outputs and a ``manifest.json`` into ``--out``. Exit
codes: 0 success, 2 invalid configuration or input, 3 numerical failure (a
``diagnostics.json`` is written beside the outputs). Failures also print a
single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import io as sio
from .grid import (
    ConfigurationError,
    CovariateTable,
    aggregate_mean_sd,
    interface_covariate,
    monthly_anomalies,
    read_ascii_grid,
    read_xyz_csv,
    sqrt_transform,
)
from .kriging import KrigingError, krige
from .laplace import ConvergenceError, fit as laplace_fit, log_posterior_theta, predict_intensity
from .mesh import MeshError, build_mesh, read_mesh, write_mesh
from .model import LatentModel, ModelVariant, NonFiniteError, subsample_zero_months
from .priors import PriorSpec
from .simulate import SimConfig, simulate_dataset, two_peak_seasonal
from .sparse import NotPositiveDefiniteError
from .variogram import (
    VariogramFitError,
    VariogramModel,
    default_init,
    empirical_variogram,
    fit_variogram,
    read_stations,
)

log = logging.getLogger("stlgcp")

class ReplayMismatchError(RuntimeError):
    """A replayed run did not reproduce the outputs recorded in its manifest."""


EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (ConvergenceError, NotPositiveDefiniteError, NonFiniteError, KrigingError,
                  VariogramFitError, OverflowError, FloatingPointError, np.linalg.LinAlgError,
                  ReplayMismatchError)
CONFIG_ERRORS = (ConfigurationError, MeshError, ValueError, KeyError, FileNotFoundError, TypeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


# --------------------------------------------------------------------------- option tables
# Options settable from --config (and --model-config for fit): name -> (type, default)
_PRIOR_KEYS = {f"prior_{k}": (float, getattr(PriorSpec(), k)) for k in (
    "fixed_effect_precision", "range0", "range_prob", "sd0", "sd_prob", "seasonal_var0",
    "seasonal_prob", "rho0", "rho_prob")}

OPTIONS = {
    "aggregate": {"grid": (str, None), "resolution": (float, None), "missing_code": (float, -9999.0)},
    "anomalies": {"sqrt_variables": (str, "")},
    "variogram": {"stations": (str, None), "variable": (str, None), "transform": (str, None),
                  "n_space_bins": (int, 10), "max_lag": (int, 12), "empirical": (str, None),
                  "kind": (str, "separable"), "init": (str, None), "n_restarts": (int, 5)},
    "krige": {"model": (str, None), "stations": (str, None), "variable": (str, None),
              "targets": (str, None), "months": (str, None), "transform": (str, None), "window": (int, 6)},
    "subsample": {"counts": (str, None), "cell_area": (float, 4.0)},
    "simulate": {"n_rows": (int, 30), "n_cols": (int, 30), "cell_size": (float, 2.0), "n_years": (int, 24),
                 "intercept": (float, -4.0), "variant": (str, "ar1_yearly"), "range": (float, 20.0),
                 "sd": (float, 1.36), "rho": (float, 0.89), "beta": (str, ""), "seasonal": (str, "two_peak"),
                 "covariate_kind": (str, "white"), "max_edge_inner": (float, 6.0),
                 "max_edge_outer": (float, 15.0), "margin": (float, 25.0)},
    "fit": {"counts": (str, None), "grid": (str, None), "variant": (str, "ar1_yearly"),
            "budget": (int, 250), "n_restarts": (int, 3), "init_range": (float, None),
            "init_sd": (float, None), "init_rho": (float, None), "init_seasonal_precision": (float, None),
            "max_edge_inner": (float, 6.0), "max_edge_outer": (float, 15.0), "margin": (float, 25.0),
            "mesh_vertices": (str, None), "mesh_triangles": (str, None),
            "time_trend": (str, "true"), "n_years": (int, None), **_PRIOR_KEYS},
    "predict": {"fit": (str, None), "months": (str, None), "targets": (str, None)},
    "render": {"predictions": (str, None), "grid": (str, None), "months": (str, None),
               "column": (str, "mean"), "start_year": (int, 2000), "start_month": (int, 1),
               "prefix": (str, "log_intensity")},
    "replay": {"manifest": (str, None)},
}
LIST_OPTIONS = {"aggregate": {"raster": [], "interface": []}, "fit": {"covariates": []},
                "anomalies": {"input": []}, "predict": {"covariates": []}}
GLOBAL_KEYS = {"seed": (int, 0), "threads": (int, 1)}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file with option defaults")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stlgcp", description="Spatio-temporal log-Gaussian Cox process toolkit")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def add(verb, help_, **extra):
        p = sub.add_parser(verb, parents=[common], help=help_, **extra)
        for name, (typ, _) in OPTIONS[verb].items():
            p.add_argument(_flag(name), dest=name, type=typ if typ is not str else str, default=None)
        for name in LIST_OPTIONS.get(verb, {}):
            p.add_argument(_flag(name), dest=name, action="append", default=None)
        return p

    add("aggregate", "per-cell mean/sd of fine rasters and interface covariates")
    add("anomalies", "calendar-month anomalies of gridded weather")
    v = add("variogram", "empirical variogram estimation and model fitting")
    v.add_argument("action", choices=["estimate", "fit"])
    add("krige", "ordinary space-time kriging onto grid cells")
    add("subsample", "collapse zero months of each cell-year")
    add("simulate", "synthetic counts, covariates and truth")
    f = add("fit", "empirical-Bayes Laplace fit")
    f.add_argument("--model-config", dest="model_config", default=None)
    add("predict", "posterior log-intensity at cells and months")
    add("render", "text rasters of predictions, one per month")
    add("replay", "rerun a manifest and compare output digests")
    return parser


def _convert(verb, key, raw):
    table = {**OPTIONS.get(verb, {}), **GLOBAL_KEYS}
    typ = table[key][0]
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"config field {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def resolve_options(args) -> dict:
    """Merge defaults < --config < --model-config < explicit flags; reject unknown keys."""
    verb = args.verb
    allowed = set(OPTIONS[verb]) | set(GLOBAL_KEYS) | set(LIST_OPTIONS.get(verb, {}))
    opts = {k: d for k, (_, d) in {**OPTIONS[verb], **GLOBAL_KEYS}.items()}
    opts.update({k: list(v) for k, v in LIST_OPTIONS.get(verb, {}).items()})
    for path in (args.config, getattr(args, "model_config", None)):
        if not path:
            continue
        kv = sio.read_key_values(path)
        unknown = sorted(set(kv) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown config field(s) {unknown} for verb {verb!r}")
        for k, raw in kv.items():
            if k in LIST_OPTIONS.get(verb, {}):
                opts[k] = [s.strip() for s in raw.split(",") if s.strip()]
            else:
                opts[k] = _convert(verb, k, raw)
    for k in allowed:
        val = getattr(args, k, None)
        if val is not None:
            opts[k] = val
    if args.out is None:
        raise ConfigurationError("--out is required")
    if opts["threads"] < 1:
        raise ConfigurationError("threads must be >= 1")
    if opts["seed"] < 0:
        raise ConfigurationError("seed must be non-negative")
    return opts


def _require(opts, *names):
    for n in names:
        if opts.get(n) in (None, "", []):
            raise ConfigurationError(f"missing required option {_flag(n)}")


def _check_inputs(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _months(spec, available=None):
    if spec is None:
        return None if available is None else np.asarray(available)
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigurationError(f"empty month specification {spec!r}")
    return np.asarray(out)


def _truthy(s) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


# --------------------------------------------------------------------------- verbs
def cmd_aggregate(opts, out):
    _require(opts, "grid", "raster")
    _check_inputs(opts["grid"], *opts["raster"])
    grid = sio.read_grid_spec(opts["grid"])
    table = pd.DataFrame(index=pd.Index(grid.cell_ids(), name="cell_id"))
    flagged = []
    for spec in opts["raster"]:
        path = Path(spec)
        if path.suffix.lower() == ".csv":
            if opts["resolution"] is None:
                raise ConfigurationError("--resolution is required for x,y,value rasters")
            raster = read_xyz_csv(path, opts["resolution"], path.stem, opts["missing_code"])
        else:
            raster = read_ascii_grid(path, path.stem)
        agg = aggregate_mean_sd(raster, grid)
        frame = agg.to_frame(prefix=f"{raster.variable_name}_")
        table = table.join(frame)
        flagged += [(c, raster.variable_name) for c in agg.missing_cells]
    for spec in opts["interface"]:
        name, _, expr = spec.partition("=")
        a, _, b = expr.partition("*")
        if not (name and a and b):
            raise ConfigurationError(f"interface spec must be name=colA*colB, got {spec!r}")
        missing = {a.strip(), b.strip()} - set(table.columns)
        if missing:
            raise ConfigurationError(f"interface {name!r} refers to unknown columns {sorted(missing)}")
        table[name.strip()] = interface_covariate(table[a.strip()], table[b.strip()])
    paths = [out / "static_covariates.csv"]
    table.to_csv(paths[0], float_format="%.17g")
    if flagged:
        p = out / "missing_cells.csv"
        pd.DataFrame(flagged, columns=["cell_id", "variable"]).to_csv(p, index=False)
        paths.append(p)
        log.warning("%d cell/raster pairs have no valid pixels", len(flagged))
    return [opts["grid"], *opts["raster"]], paths


def cmd_anomalies(opts, out):
    _require(opts, "input")
    _check_inputs(*opts["input"])
    df = pd.concat([pd.read_csv(p, float_precision="round_trip") for p in opts["input"]], ignore_index=True)
    need = {"cell_id", "month_index", "variable", "value"}
    if need - set(df.columns):
        raise ConfigurationError(f"weather table lacks columns {sorted(need - set(df.columns))}")
    sqrt_vars = {s.strip() for s in opts["sqrt_variables"].split(",") if s.strip()}
    result, means = [], []
    for var, sub in df.groupby("variable", sort=True):
        wide = sub.pivot(index="cell_id", columns="month_index", values="value").sort_index()
        first = int(wide.columns.min())
        wide = wide.reindex(columns=range(first, int(wide.columns.max()) + 1))
        variants = [(f"{var}_anom", wide.to_numpy(float))]
        if var in sqrt_vars:
            variants.append((f"sqrt_{var}_anom", sqrt_transform(wide.to_numpy(float))))
        for name, vals in variants:
            anom, mm = monthly_anomalies(vals, first_month=first)
            s = pd.DataFrame(anom, index=wide.index, columns=wide.columns).stack()
            s.name = name
            result.append(s)
            means.append(pd.DataFrame({"covariate": name, "month": np.arange(1, 13), "mean": mm}))
    missing = sqrt_vars - set(df["variable"].unique())
    if missing:
        raise ConfigurationError(f"sqrt variables not in input: {sorted(missing)}")
    dyn = pd.concat(result, axis=1)
    dyn.index.names = ["cell_id", "month_index"]
    paths = [out / "dynamic_covariates.csv", out / "monthly_means.csv"]
    dyn.to_csv(paths[0], float_format="%.17g")
    pd.concat(means).to_csv(paths[1], index=False, float_format="%.17g")
    return list(opts["input"]), paths


def cmd_variogram(opts, out, action):
    if action == "estimate":
        _require(opts, "stations")
        _check_inputs(opts["stations"])
        data = read_stations(opts["stations"], opts["variable"])
        if opts["transform"] == "sqrt":
            data = data.transformed(sqrt_transform)
        elif opts["transform"] is not None:
            raise ConfigurationError(f"unknown transform {opts['transform']!r}")
        emp = empirical_variogram(data, n_space_bins=opts["n_space_bins"], max_lag=opts["max_lag"])
        path = out / "empirical_variogram.csv"
        emp.to_csv(path, index=False, float_format="%.17g")
        return [opts["stations"]], [path]
    _require(opts, "empirical")
    _check_inputs(opts["empirical"], opts["init"])
    emp = pd.read_csv(opts["empirical"], float_precision="round_trip")
    if opts["kind"] not in ("separable", "product_sum"):
        raise ConfigurationError(f"config field 'kind' must be separable or product_sum, got {opts['kind']!r}")
    init = VariogramModel.load(opts["init"]) if opts["init"] else default_init(opts["kind"], emp)
    res = fit_variogram(emp, opts["kind"], init, n_restarts=opts["n_restarts"], seed=opts["seed"])
    paths = [out / "variogram_model.txt", out / "variogram_fit.json"]
    res.model.save(paths[0])
    paths[1].write_text(json.dumps({"objective": res.objective, **res.diagnostics}, indent=2) + "\n")
    return [opts["empirical"]] + ([opts["init"]] if opts["init"] else []), paths


def _targets_xy(path):
    p = Path(path)
    try:
        grid = sio.read_grid_spec(p)
    except ConfigurationError:
        df = pd.read_csv(p, float_precision="round_trip")
        if {"cell_id", "x_km", "y_km"} - set(df.columns):
            raise ConfigurationError("targets must be a grid file or a CSV with cell_id, x_km, y_km") from None
        return df["cell_id"].to_numpy(), df[["x_km", "y_km"]].to_numpy(float)
    ids = grid.cell_ids()
    return ids, grid.centers(ids)


def cmd_krige(opts, out):
    _require(opts, "model", "stations", "targets")
    _check_inputs(opts["model"], opts["stations"], opts["targets"])
    model = VariogramModel.load(opts["model"])
    data = read_stations(opts["stations"], opts["variable"])
    ids, xy = _targets_xy(opts["targets"])
    months = _months(opts["months"], data.month_index)
    res = krige(model, data, xy, months, window=opts["window"], transform=opts["transform"])
    res.insert(0, "cell_id", ids[res["target"].to_numpy()])
    res = res.drop(columns="target")
    res.insert(2, "variable", data.variable)
    res = res.rename(columns={"prediction": "value"})
    path = out / "kriged.csv"
    res.to_csv(path, index=False, float_format="%.17g")
    return [opts["model"], opts["stations"], opts["targets"]], [path]


def cmd_subsample(opts, out):
    _require(opts, "counts")
    _check_inputs(opts["counts"])
    counts = pd.read_csv(opts["counts"], float_precision="round_trip")
    res = subsample_zero_months(counts, opts["seed"], cell_area=opts["cell_area"])
    path = out / "counts_subsampled.csv"
    res.to_csv(path, index=False, float_format="%.17g")
    log.info("records %d -> %d (factor %.2f)", len(counts), len(res), len(counts) / max(len(res), 1))
    return [opts["counts"]], [path]


def _parse_beta(spec):
    beta = {}
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, val = part.partition(":")
        if not sep:
            raise ConfigurationError(f"beta entries must be name:value, got {part!r}")
        beta[name.strip()] = float(val)
    return beta


def cmd_simulate(opts, out):
    if opts["seasonal"] == "two_peak":
        seasonal = two_peak_seasonal()
    elif opts["seasonal"] == "none":
        seasonal = np.zeros(12)
    else:
        seasonal = np.array([float(v) for v in opts["seasonal"].split(",")])
        seasonal = seasonal - seasonal.mean()
    if not abs(opts["rho"]) < 1:
        raise ConfigurationError(f"config field 'rho' must satisfy |rho| < 1, got {opts['rho']}")
    cfg = SimConfig(n_rows=opts["n_rows"], n_cols=opts["n_cols"], cell_size=opts["cell_size"],
                    n_years=opts["n_years"], intercept=opts["intercept"], beta=_parse_beta(opts["beta"]),
                    seasonal=seasonal, variant=opts["variant"], range=opts["range"], sd=opts["sd"],
                    rho=opts["rho"], seed=opts["seed"], covariate_kind=opts["covariate_kind"],
                    max_edge_inner=opts["max_edge_inner"], max_edge_outer=opts["max_edge_outer"],
                    margin=opts["margin"])
    data = simulate_dataset(cfg)
    paths = [out / "counts.csv", out / "grid.txt", out / "truth.json"]
    data.records.to_csv(paths[0], index=False, float_format="%.17g")
    sio.write_grid_spec(paths[1], data.grid)
    truth = {k: v for k, v in data.truth.items() if k not in ("field", "w_cell", "eta")}
    truth["seasonal"] = [float(v) for v in truth["seasonal"]]
    truth["beta"] = {k: float(v) for k, v in truth["beta"].items()}
    paths[2].write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    table = data.covariates
    static_cols = [c for c in table.static.columns]
    dyn_cols = [c for c in table.dynamic.columns if c != table.time_name]
    if static_cols:
        p = out / "static_covariates.csv"
        table.static.to_csv(p, float_format="%.17g")
        paths.append(p)
    if dyn_cols:
        p = out / "dynamic_covariates.csv"
        table.dynamic[dyn_cols].to_csv(p, float_format="%.17g")
        paths.append(p)
    if "w_cell" in data.truth:
        p = out / "true_field.csv"
        w = data.truth["w_cell"]
        pd.DataFrame({"year": np.repeat(np.arange(w.shape[0]), w.shape[1]),
                      "cell_id": np.tile(data.grid.cell_ids(), w.shape[0]),
                      "w": w.ravel()}).to_csv(p, index=False, float_format="%.17g")
        paths.append(p)
    return [], paths


def _load_covariates(files, records, time_trend: bool):
    static, dynamic = None, None
    for f in files:
        df = pd.read_csv(f, float_precision="round_trip")
        if "cell_id" not in df:
            raise ConfigurationError(f"{f}: covariate file needs a cell_id column")
        if "month_index" in df:
            if dynamic is not None:
                raise ConfigurationError("more than one dynamic covariate file")
            dynamic = df.set_index(["cell_id", "month_index"])
        else:
            if static is not None:
                raise ConfigurationError("more than one static covariate file")
            static = df.set_index("cell_id")
    cells = np.unique(records["cell_id"].to_numpy())
    if static is None:
        static = pd.DataFrame(index=pd.Index(cells, name="cell_id"))
    months = np.arange(1, int(records["month_index"].max()) + 1)
    if dynamic is not None:
        months = np.unique(dynamic.index.get_level_values(1))
    table = CovariateTable.assemble(static, dynamic, month_index=months)
    if not time_trend:
        table.dynamic = table.dynamic.drop(columns=table.time_name)
    return table


def _build_model(opts, inputs):
    """Assemble the LatentModel described by fit options."""
    _require(opts, "counts")
    _check_inputs(opts["counts"], opts["grid"], *opts["covariates"])
    inputs += [opts["counts"], *opts["covariates"]]
    variant = ModelVariant.parse(opts["variant"])
    records = pd.read_csv(opts["counts"], float_precision="round_trip")
    table = _load_covariates(opts["covariates"], records, _truthy(opts["time_trend"]))
    priors = PriorSpec(**{k[len("prior_"):]: opts[k] for k in _PRIOR_KEYS})
    grid = mesh = None
    if variant.has_spatial:
        _require(opts, "grid")
        inputs.append(opts["grid"])
        grid = sio.read_grid_spec(opts["grid"])
        if opts["mesh_vertices"]:
            _check_inputs(opts["mesh_vertices"], opts["mesh_triangles"])
            mesh = read_mesh(opts["mesh_vertices"], opts["mesh_triangles"])
            inputs += [opts["mesh_vertices"], opts["mesh_triangles"]]
        else:
            mesh = build_mesh(grid, opts["max_edge_inner"], opts["max_edge_outer"], opts["margin"])
    n_years = opts["n_years"]
    if n_years is None:
        n_years = int((int(records["month_index"].max()) - 1) // 12 + 1)
    model = LatentModel(records, table, variant, priors, mesh=mesh, grid=grid, n_years=n_years)
    return model, table, mesh


def _theta_init(opts, model):
    given = {k: opts[f"init_{k}"] for k in ("range", "sd", "rho", "seasonal_precision")}
    if given["rho"] is not None and not abs(given["rho"]) < 1:
        raise ConfigurationError(f"config field 'init_rho' must satisfy |rho| < 1, got {given['rho']}")
    for k in ("range", "sd", "seasonal_precision"):
        if given[k] is not None and not given[k] > 0:
            raise ConfigurationError(f"config field 'init_{k}' must be positive, got {given[k]}")
    if all(v is None for v in given.values()):
        return None
    default = model.unpack(model.default_theta())
    vals = {k: (given[k] if given[k] is not None else default.get(k)) for k in default}
    return model.pack(**vals)


def cmd_fit(opts, out):
    if opts["budget"] < 1:
        raise ConfigurationError("config field 'budget' must be positive")
    ModelVariant.parse(opts["variant"])
    if opts["init_rho"] is not None and not abs(opts["init_rho"]) < 1:
        raise ConfigurationError(f"config field 'init_rho' must satisfy |rho| < 1, got {opts['init_rho']}")
    inputs = []
    model, _, mesh = _build_model(opts, inputs)
    theta0 = _theta_init(opts, model)
    result = laplace_fit(model, theta0, budget=opts["budget"], n_restarts=opts["n_restarts"])
    log.info("fit finished: log marginal %.3f, converged=%s", result.log_marginal, result.converged)
    paths = sio.write_fit_result(result, model, out)
    if mesh is not None:
        vp, tp = out / "mesh_vertices.csv", out / "mesh_triangles.csv"
        write_mesh(mesh, vp, tp)
        paths += [vp, tp]
    # portable record of the fit: inputs by digest (their paths live in the
    # run manifest), the mesh by file name inside the fit directory
    fit_opts = {k: v for k, v in opts.items() if k not in ("threads", "counts", "grid", "covariates")}
    fit_opts["input_digests"] = {
        "counts": sio.file_digest(opts["counts"]),
        "grid": sio.file_digest(opts["grid"]) if opts.get("grid") else None,
        "covariates": [sio.file_digest(c) for c in opts["covariates"]],
    }
    if mesh is not None:
        fit_opts["mesh_vertices"], fit_opts["mesh_triangles"] = vp.name, tp.name
    p = out / "fit_options.json"
    p.write_text(json.dumps(fit_opts, indent=2, sort_keys=True) + "\n")
    return inputs, paths + [p]


def _fit_options(fit_dir):
    """Fit options with input paths restored from the fit manifest and checked by digest."""
    _check_inputs(fit_dir / "fit_options.json", fit_dir / "manifest.json")
    opts = json.loads((fit_dir / "fit_options.json").read_text())
    config = json.loads((fit_dir / "manifest.json").read_text())["config"]
    digests = opts.pop("input_digests")
    opts["counts"], opts["grid"], opts["covariates"] = config["counts"], config["grid"], config["covariates"]
    pairs = [(opts["counts"], digests["counts"]), (opts["grid"], digests["grid"])]
    pairs += list(zip(opts["covariates"], digests["covariates"]))
    for path, digest in pairs:
        if path is None:
            continue
        _check_inputs(path)
        if sio.file_digest(path) != digest:
            raise ConfigurationError(f"fit input {path} changed since the fit (digest mismatch)")
    for k in ("mesh_vertices", "mesh_triangles"):
        if opts.get(k):
            opts[k] = str(fit_dir / opts[k])
    return opts


def cmd_predict(opts, out):
    _require(opts, "fit")
    fit_dir = Path(opts["fit"])
    _check_inputs(fit_dir / "fit_options.json", fit_dir / "run_metadata.json", fit_dir / "latent.csv")
    fit_opts = _fit_options(fit_dir)
    meta = json.loads((fit_dir / "run_metadata.json").read_text())
    inputs = [fit_dir / "fit_options.json", fit_dir / "run_metadata.json", fit_dir / "latent.csv"]
    model, table, _ = _build_model(fit_opts, inputs)
    if opts["covariates"]:
        table = _load_covariates(opts["covariates"], model.records, _truthy(fit_opts["time_trend"]))
        inputs += opts["covariates"]
    theta = np.asarray(meta["theta_hat"], dtype=float)
    x0 = pd.read_csv(fit_dir / "latent.csv", float_precision="round_trip")["mean"].to_numpy(float)
    _, inner = log_posterior_theta(model, theta, x0)

    class _Fit:  # the parts of FitResult that prediction needs
        latent_mean = inner.mode
        approx = inner.approx

    if opts["targets"]:
        _check_inputs(opts["targets"])
        targets = pd.read_csv(opts["targets"], float_precision="round_trip")[["cell_id", "month_index"]]
        inputs.append(opts["targets"])
    else:
        cells = table.static.index.to_numpy()
        months = np.unique(table.dynamic.index.get_level_values("month_index"))
        months = _months(opts["months"], months)
        targets = pd.DataFrame({"cell_id": np.repeat(cells, len(months)),
                                "month_index": np.tile(months, len(cells))})
    pred = predict_intensity(_Fit, model, targets, table)
    path = out / "predictions.csv"
    pred.to_csv(path, index=False, float_format="%.17g")
    return inputs, [path]


def cmd_render(opts, out):
    _require(opts, "predictions", "grid")
    _check_inputs(opts["predictions"], opts["grid"])
    pred = pd.read_csv(opts["predictions"], float_precision="round_trip")
    grid = sio.read_grid_spec(opts["grid"])
    paths = sio.render_rasters(pred, grid, out, _months(opts["months"]), column=opts["column"],
                               start_year=opts["start_year"], start_month=opts["start_month"],
                               prefix=opts["prefix"])
    return [opts["predictions"], opts["grid"]], paths


def cmd_replay(opts, out):
    _require(opts, "manifest")
    _check_inputs(opts["manifest"])
    manifest = json.loads(Path(opts["manifest"]).read_text())
    argv = list(manifest["argv"])
    i = argv.index("--out")
    argv[i + 1] = str(out / "rerun")
    code = main(argv)
    if code != EXIT_OK:
        raise ReplayMismatchError(f"replayed run exited with code {code}")
    rerun = json.loads((out / "rerun" / "manifest.json").read_text())
    diff = sorted(k for k in set(manifest["outputs"]) | set(rerun["outputs"])
                  if manifest["outputs"].get(k) != rerun["outputs"].get(k))
    report = {"identical": not diff, "differing_outputs": diff}
    path = out / "replay_report.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    if diff:
        raise ReplayMismatchError(f"replay differs from manifest in {diff}")
    return [opts["manifest"]], [path]


# --------------------------------------------------------------------------- driver
def _emit_error(code, exc, diagnostics=None):
    line = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if diagnostics:
        line["diagnostics"] = str(diagnostics)
    print(json.dumps(line), file=sys.stderr)


def run(argv=None) -> int:
    """Execute one verb; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    out = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve_options(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        verb = args.verb
        with threadpool_limits(limits=opts["threads"]):
            if verb == "variogram":
                inputs, outputs = cmd_variogram(opts, out, args.action)
            else:
                inputs, outputs = globals()[f"cmd_{verb}"](opts, out)
        if verb != "replay":
            sio.write_manifest(out, verb if verb != "variogram" else f"variogram {args.action}", argv,
                               opts, [p for p in inputs if p], outputs, opts["seed"], opts["threads"])
        return EXIT_OK
    except NUMERIC_ERRORS as exc:
        diag = None
        if out is not None:
            diag = out / "diagnostics.json"
            info = {"error": type(exc).__name__, "message": str(exc),
                    "traceback": traceback.format_exc()}
            for attr in ("trace", "diagnostics"):
                if getattr(exc, attr, None):
                    info[attr] = getattr(exc, attr)
            best = getattr(exc, "best", None)
            if best is not None:
                info["best"] = np.asarray(best).tolist()
            diag.write_text(json.dumps(info, indent=2, default=str) + "\n")
        _emit_error(EXIT_NUMERIC, exc, diag)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as exc:
        _emit_error(EXIT_CONFIG, exc)
        return EXIT_CONFIG


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
