"""Small input-validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
import pandas as pd

from .grid import ConfigurationError


def check_seed(seed, name="seed") -> int:
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (numbers.Integral, np.integer)):
        raise ConfigurationError(f"{name} must be an integer, got {seed!r}")
    if seed < 0:
        raise ConfigurationError(f"{name} must be non-negative")
    return int(seed)


def check_positive(value, name, allow_zero=False) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a number, got {value!r}") from None
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ConfigurationError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return v


def check_correlation(value, name="rho") -> float:
    v = float(value)
    if not abs(v) < 1:
        raise ConfigurationError(f"{name} must satisfy |{name}| < 1, got {value!r}")
    return v


def check_count_frame(X, y=None) -> pd.DataFrame:
    """Records frame with ``cell_id, month_index, count`` (``count`` may come from ``y``)."""
    if not isinstance(X, pd.DataFrame):
        raise TypeError("records must be a pandas DataFrame")
    df = X.copy()
    if y is not None:
        y = np.asarray(y)
        if len(y) != len(df):
            raise ValueError(f"y has {len(y)} rows, records have {len(df)}")
        df["count"] = y
    missing = {"cell_id", "month_index", "count"} - set(df.columns)
    if missing:
        raise ValueError(f"records lack columns {sorted(missing)}")
    if df[["cell_id", "month_index", "count"]].isna().any().any():
        raise ValueError("records contain missing values")
    return df


def check_target_frame(X) -> pd.DataFrame:
    if not isinstance(X, pd.DataFrame):
        raise TypeError("targets must be a pandas DataFrame")
    missing = {"cell_id", "month_index"} - set(X.columns)
    if missing:
        raise ValueError(f"targets lack columns {sorted(missing)}")
    return X
