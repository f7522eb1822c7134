"""The end-to-end pipeline on the bundled synthetic fixture, expressed as CLI calls."""
from __future__ import annotations

from pathlib import Path

from .cli import EXIT_OK, run

__all__ = ["fixture_path", "fixture_steps", "run_fixture_pipeline"]


def fixture_path() -> Path:
    return Path(__file__).parent / "data" / "fixture"


def fixture_steps(out_dir, fixture=None, seed: int = 7, threads: int = 1) -> list[tuple[str, list[str]]]:
    """``(name, argv)`` for aggregate -> krige -> anomalies -> subsample -> fit -> predict -> render."""
    fx = Path(fixture) if fixture is not None else fixture_path()
    out = Path(out_dir)
    g = ["--seed", str(seed), "--threads", str(threads)]
    steps = [
        ("aggregate", ["aggregate", "--grid", fx / "grid.txt", "--raster", fx / "forest.asc",
                       "--raster", fx / "urban.asc", "--interface", "forest_urban=forest_mean*urban_mean"]),
        ("krige_tavg", ["krige", "--model", fx / "variogram_TAVG.txt", "--stations", fx / "stations.csv",
                        "--variable", "TAVG", "--targets", fx / "grid.txt"]),
        ("krige_prcp", ["krige", "--model", fx / "variogram_PRCP.txt", "--stations", fx / "stations.csv",
                        "--variable", "PRCP", "--targets", fx / "grid.txt", "--transform", "sqrt"]),
        ("anomalies", ["anomalies", "--input", out / "krige_tavg" / "kriged.csv",
                       "--input", out / "krige_prcp" / "kriged.csv", "--sqrt-variables", "PRCP"]),
        ("subsample", ["subsample", "--counts", fx / "counts.csv"]),
        ("fit", ["fit", "--model-config", fx / "fit_config.txt",
                 "--counts", out / "subsample" / "counts_subsampled.csv",
                 "--covariates", out / "aggregate" / "static_covariates.csv",
                 "--covariates", out / "anomalies" / "dynamic_covariates.csv", "--grid", fx / "grid.txt"]),
        ("predict", ["predict", "--fit", out / "fit", "--months", "25-36"]),
        ("render", ["render", "--predictions", out / "predict" / "predictions.csv", "--grid", fx / "grid.txt",
                    "--start-year", "2015"]),
    ]
    return [(name, [str(a) for a in argv] + g + ["--out", str(out / name)]) for name, argv in steps]


def run_fixture_pipeline(out_dir, fixture=None, seed: int = 7, threads: int = 1) -> dict:
    """Run every step; returns ``{step: output directory}``. Raises on a non-zero exit."""
    dirs = {}
    for name, argv in fixture_steps(out_dir, fixture, seed, threads):
        code = run(argv)
        if code != EXIT_OK:
            raise RuntimeError(f"pipeline step {name!r} exited with code {code}")
        dirs[name] = Path(out_dir) / name
    return dirs
