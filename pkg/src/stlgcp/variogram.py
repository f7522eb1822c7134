"""Space-time variograms with exponential components: estimation, models and fitting.

Components follow the usual geostatistics convention
``gamma(h) = nugget * 1[h > 0] + psill * (1 - exp(-h / range))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator

__all__ = [
    "ExponentialComponent",
    "VariogramModel",
    "VariogramFitError",
    "StationData",
    "empirical_variogram",
    "eval_variogram",
    "fit_variogram",
    "read_stations",
    "write_stations",
    "SpaceTimeVariogram",
]


class VariogramFitError(RuntimeError):
    """Raised when no restart of the variogram fit converged."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ExponentialComponent:
    """Exponential variogram: ``nugget`` jump at the origin plus partial sill ``sill``."""

    sill: float
    range: float
    nugget: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.sill) and np.isfinite(self.range) and np.isfinite(self.nugget)):
            raise ValueError("component parameters must be finite")
        if self.sill <= 0 or self.range <= 0 or self.nugget < 0:
            raise ValueError(
                f"need sill > 0, range > 0, nugget >= 0 (got {self.sill}, {self.range}, {self.nugget})"
            )

    @property
    def total_sill(self) -> float:
        return self.nugget + self.sill

    def __call__(self, lag):
        lag = np.asarray(lag, dtype=float)
        return np.where(lag > 0, self.nugget + self.sill * -np.expm1(-lag / self.range), 0.0)


@dataclass(frozen=True)
class VariogramModel:
    """Separable or product-sum space-time variogram.

    For ``kind="separable"`` both components must have unit total sill and
    ``sill`` is the overall sill. For ``kind="product_sum"`` the components carry
    their own sills and ``k`` couples them.
    """

    kind: str
    spatial: ExponentialComponent
    temporal: ExponentialComponent
    k: float | None = None
    sill: float | None = None

    def __post_init__(self):
        if self.kind == "separable":
            for comp in (self.spatial, self.temporal):
                if abs(comp.total_sill - 1.0) > 1e-9:
                    raise ValueError("separable components need nugget + sill = 1")
            if self.sill is None or not self.sill > 0:
                raise ValueError("separable model needs an overall sill > 0")
        elif self.kind == "product_sum":
            if self.k is None or not self.k > 0:
                raise ValueError("product-sum model needs k > 0")
            kmax = 1.0 / max(self.spatial.total_sill, self.temporal.total_sill)
            if self.k > kmax * (1 + 1e-12):
                raise ValueError(f"k = {self.k} exceeds the validity bound 1/max(sill_s, sill_t) = {kmax}")
        else:
            raise ValueError(f"unknown variogram kind {self.kind!r}")

    @property
    def limit(self) -> float:
        """``gamma(inf, inf)``, the variance of the process."""
        if self.kind == "separable":
            return float(self.sill)
        ss, st = self.spatial.total_sill, self.temporal.total_sill
        return ss + st + self.k * ss * st

    def __call__(self, h, u):
        return eval_variogram(self, h, u)

    def covariance(self, h, u):
        """``C(h, u) = gamma(inf, inf) - gamma(h, u)``."""
        return self.limit - eval_variogram(self, h, u)

    # persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "spatial_nugget": self.spatial.nugget,
            "spatial_sill": self.spatial.sill,
            "spatial_range_km": self.spatial.range,
            "temporal_nugget": self.temporal.nugget,
            "temporal_sill": self.temporal.sill,
            "temporal_range_months": self.temporal.range,
        }
        if self.kind == "separable":
            d["sill"] = self.sill
        else:
            d["k"] = self.k
        return d

    @classmethod
    def from_dict(cls, d) -> "VariogramModel":
        try:
            kind = str(d["kind"])
            sp_ = ExponentialComponent(float(d["spatial_sill"]), float(d["spatial_range_km"]),
                                       float(d.get("spatial_nugget", 0.0)))
            tp_ = ExponentialComponent(float(d["temporal_sill"]), float(d["temporal_range_months"]),
                                       float(d.get("temporal_nugget", 0.0)))
        except KeyError as exc:
            raise ValueError(f"variogram file lacks key {exc.args[0]!r}") from None
        if kind == "separable":
            return cls(kind, sp_, tp_, sill=float(d["sill"]))
        return cls(kind, sp_, tp_, k=float(d["k"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for key, val in self.to_dict().items():
                fh.write(f"{key} = {val if isinstance(val, str) else repr(float(val))}\n")

    @classmethod
    def load(cls, path) -> "VariogramModel":
        d = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                if not sep:
                    raise ValueError(f"malformed line in {path}: {line!r}")
                d[key.strip()] = val.strip()
        return cls.from_dict(d)


def eval_variogram(model: VariogramModel, h, u):
    """``gamma(h, u)``; zero at the origin, nuggets apply at any positive lag."""
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(h < 0) or np.any(u < 0):
        raise ValueError("lags must be non-negative")
    gs = model.spatial(h)
    gt = model.temporal(u)
    if model.kind == "separable":
        return model.sill * (gs + gt - gs * gt)
    k = model.k
    return (k * model.temporal.total_sill + 1) * gs + (k * model.spatial.total_sill + 1) * gt - k * gs * gt


# ---------------------------------------------------------------------------
# station data


@dataclass
class StationData:
    """Monthly series at weather stations; ``values`` is (stations, months), NaN = missing."""

    station_id: np.ndarray
    xy: np.ndarray
    values: np.ndarray
    variable: str = "value"
    first_month: int = 1

    def __post_init__(self):
        self.station_id = np.asarray(self.station_id)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or len(self.values) != len(self.xy) or len(self.station_id) != len(self.xy):
            raise ValueError("values must be (n_stations, n_months) matching the station list")
        if len(np.unique(self.xy, axis=0)) != len(self.xy):
            raise ValueError("station locations must be distinct")

    @property
    def n_stations(self) -> int:
        return len(self.xy)

    @property
    def n_months(self) -> int:
        return self.values.shape[1]

    @property
    def month_index(self) -> np.ndarray:
        return np.arange(self.first_month, self.first_month + self.n_months)

    def transformed(self, func) -> "StationData":
        return replace(self, values=func(self.values))


def read_stations(path_or_frame, variable: str | None = None) -> StationData:
    """Long station CSV (``station_id, x_km, y_km, month_index, variable, value``) to StationData."""
    if isinstance(path_or_frame, pd.DataFrame):
        df = path_or_frame
    else:
        df = pd.read_csv(path_or_frame, float_precision="round_trip")
    need = {"station_id", "x_km", "y_km", "month_index", "variable", "value"}
    if need - set(df.columns):
        raise ValueError(f"station table lacks columns {sorted(need - set(df.columns))}")
    if variable is None:
        names = df["variable"].unique()
        if len(names) != 1:
            raise ValueError(f"several variables present {list(names)}; choose one")
        variable = names[0]
    df = df[df["variable"] == variable]
    if df.empty:
        raise ValueError(f"no rows for variable {variable!r}")
    loc = df.groupby("station_id")[["x_km", "y_km"]].first().sort_index()
    m0, m1 = int(df["month_index"].min()), int(df["month_index"].max())
    wide = df.pivot_table(index="station_id", columns="month_index", values="value", aggfunc="mean")
    wide = wide.reindex(index=loc.index, columns=range(m0, m1 + 1))
    return StationData(loc.index.to_numpy(), loc.to_numpy(), wide.to_numpy(), str(variable), m0)


def write_stations(data: StationData, path) -> None:
    rows = []
    months = data.month_index
    for i, sid in enumerate(data.station_id):
        ok = np.isfinite(data.values[i])
        rows.append(pd.DataFrame({
            "station_id": sid, "x_km": data.xy[i, 0], "y_km": data.xy[i, 1],
            "month_index": months[ok], "variable": data.variable, "value": data.values[i, ok],
        }))
    pd.concat(rows).to_csv(path, index=False, float_format="%.10g")


# ---------------------------------------------------------------------------
# empirical variogram


def empirical_variogram(data: StationData, space_bins=None, time_lags=None, n_space_bins: int = 10,
                        max_lag: int = 12) -> pd.DataFrame:
    """Binned semivariances ``mean(0.5 (z_i - z_j)^2)``.

    By default space is cut into ``n_space_bins`` equal bins up to half the
    largest inter-station distance, with co-located pairs in a separate
    ``h = 0`` bin, and time lags are ``0..max_lag`` months. Empty bins are
    omitted. Returns columns ``h_bin, u_lag, dist, gamma, n_pairs``; bin 0 is
    the zero-distance bin and ``dist`` is the mean pair distance.
    """
    V = data.values
    if not np.isfinite(V).any():
        raise ValueError(f"variable {data.variable!r} is entirely missing")
    if data.n_stations < 2 or data.n_months < 2:
        raise ValueError("need at least 2 stations and 2 months")
    D = squareform(pdist(data.xy))
    if space_bins is None:
        space_bins = np.linspace(0.0, 0.5 * D.max(), n_space_bins + 1)
    edges = np.asarray(space_bins, dtype=float)
    lags = np.arange(max_lag + 1) if time_lags is None else np.asarray(time_lags, dtype=int)

    n = data.n_stations
    # bin index per ordered station pair: 0 for i == j, 1.. for the distance bins, -1 outside
    pair_bin = np.searchsorted(edges, D, side="left")
    pair_bin[(D > edges[-1])] = -1
    pair_bin[D == 0] = 0
    pair_bin[(D > 0) & (pair_bin == 0)] = 1
    nb = len(edges)

    rows = []
    for u in lags:
        if u >= data.n_months:
            continue
        A = V[:, : data.n_months - u]
        B = V[:, u:]
        # diff[i, j, t] = z_i(t) - z_j(t + u)
        diff = A[:, None, :] - B[None, :, :]
        ok = np.isfinite(diff)
        sq = np.where(ok, 0.5 * diff * diff, 0.0).sum(axis=2)
        cnt = ok.sum(axis=2)
        mask = np.ones((n, n), dtype=bool)
        if u == 0:
            mask = np.triu(mask, 1)  # unordered pairs only, no self pairs
        Dm = np.where(mask, D, 0.0)
        for b in range(nb):
            sel = mask & (pair_bin == b)
            npairs = int(cnt[sel].sum())
            if npairs == 0:
                continue
            gamma = float(sq[sel].sum() / npairs)
            dist = float((Dm[sel] * cnt[sel]).sum() / npairs)
            rows.append((b, int(u), dist, gamma, npairs))
    return pd.DataFrame(rows, columns=["h_bin", "u_lag", "dist", "gamma", "n_pairs"])


# ---------------------------------------------------------------------------
# fitting


def _param_spec(kind):
    if kind == "separable":
        return ["spatial_nugget", "spatial_range", "temporal_nugget", "temporal_range", "sill"]
    return ["spatial_nugget", "spatial_sill", "spatial_range",
            "temporal_nugget", "temporal_sill", "temporal_range", "k_fraction"]


def _to_vector(model: VariogramModel):
    s, t = model.spatial, model.temporal
    if model.kind == "separable":
        return np.array([s.nugget, s.range, t.nugget, t.range, model.sill])
    kmax = 1.0 / max(s.total_sill, t.total_sill)
    return np.array([s.nugget, s.sill, s.range, t.nugget, t.sill, t.range, model.k / kmax])


def _from_vector(kind, v):
    if kind == "separable":
        ns, rs, nt, rt, sill = v
        return VariogramModel(kind, ExponentialComponent(1.0 - ns, rs, ns),
                              ExponentialComponent(1.0 - nt, rt, nt), sill=sill)
    ns, ss, rs, nt, st, rt, frac = v
    kmax = 1.0 / max(ns + ss, nt + st)
    return VariogramModel(kind, ExponentialComponent(ss, rs, ns), ExponentialComponent(st, rt, nt),
                          k=frac * kmax)


def _bounds(kind, v0, max_dist, max_lag):
    eps = 1e-9
    if kind == "separable":
        return [(0.0, 1.0 - 1e-6), (eps, 10 * max_dist), (0.0, 1.0 - 1e-6), (eps, 10 * max_lag),
                (eps, 100 * max(v0[4], 1e-12))]
    big = 100 * max(v0[0] + v0[1], v0[3] + v0[4], 1e-12)
    return [(0.0, big), (eps, big), (eps, 10 * max_dist), (0.0, big), (eps, big), (eps, 10 * max_lag),
            (1e-12, 1.0)]


@dataclass
class VariogramFit:
    model: VariogramModel
    objective: float
    diagnostics: dict = field(default_factory=dict)


def fit_variogram(empirical: pd.DataFrame, kind: str, init: VariogramModel, *, n_restarts: int = 5,
                  jitter: float = 0.3, tol: float = 1e-8, max_iter: int = 20000,
                  seed: int = 0) -> VariogramFit:
    """Weighted least squares ``sum n_pairs (gamma_hat - gamma)^2`` by bounded Nelder-Mead.

    Parameters are searched in units of the initial values, from ``init`` and
    ``n_restarts - 1`` jittered copies. If the table holds only ``u = 0`` rows the
    temporal component stays at its initial value; with only ``h = 0`` rows the
    spatial component does. In both cases the product-sum coupling is held at
    its initial fraction ``k * max(sill_s, sill_t)`` of the validity bound.
    """
    if empirical.empty:
        raise ValueError("empirical variogram table is empty")
    if init.kind != kind:
        raise ValueError(f"init model is {init.kind!r}, requested {kind!r}")
    h = empirical["dist"].to_numpy(float)
    u = empirical["u_lag"].to_numpy(float)
    g = empirical["gamma"].to_numpy(float)
    w = empirical["n_pairs"].to_numpy(float)
    scale = float(np.sum(w * g * g)) or 1.0

    names = _param_spec(kind)
    v0 = _to_vector(init)
    free = np.ones(len(names), dtype=bool)
    if np.all(u == 0):
        free[[i for i, n in enumerate(names) if n.startswith("temporal") or n == "k_fraction"]] = False
    if np.all(h == 0):
        free[[i for i, n in enumerate(names) if n.startswith("spatial") or n == "k_fraction"]] = False
    bounds = np.array(_bounds(kind, v0, max(h.max(), 1e-6), max(u.max(), 1.0)))
    units = np.where(np.abs(v0) > 0, np.abs(v0), 1.0)

    def unpack(p):
        v = v0.copy()
        v[free] = p * units[free]
        return v

    def objective(p):
        v = unpack(p)
        if np.any(v < bounds[:, 0]) or np.any(v > bounds[:, 1]):
            return np.inf
        try:
            model = _from_vector(kind, v)
        except ValueError:
            return np.inf
        r = g - eval_variogram(model, h, u)
        return float(np.sum(w * r * r) / scale)

    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    lo = bounds[free, 0] / units[free]
    hi = bounds[free, 1] / units[free]
    starts = [np.clip(np.ones(free.sum()), lo, hi)]
    for _ in range(max(n_restarts - 1, 0)):
        starts.append(np.clip(np.exp(jitter * rng.standard_normal(free.sum())), lo, hi))

    best, runs = None, []
    for p0 in starts:
        res = minimize(objective, p0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"xatol": tol, "fatol": tol, "maxiter": max_iter,
                                "maxfev": max_iter, "adaptive": True})
        # polish from the best point to escape a collapsed simplex
        res2 = minimize(objective, res.x, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                        options={"xatol": tol, "fatol": tol, "maxiter": max_iter,
                                 "maxfev": max_iter, "adaptive": True})
        if res2.fun <= res.fun:
            res = res2
        runs.append((float(res.fun), bool(res.success), int(res.nfev)))
        if best is None or res.fun < best.fun:
            best = res
    diagnostics = {"runs": runs, "parameters": names, "free": free.tolist(), "objective_scale": scale}
    v = unpack(best.x)
    if not any(ok for _, ok, _ in runs) or not np.isfinite(best.fun):
        raise VariogramFitError("variogram fit did not converge", best=v, diagnostics=diagnostics)
    return VariogramFit(_from_vector(kind, v), float(best.fun * scale), diagnostics)


def default_init(kind: str, empirical: pd.DataFrame) -> VariogramModel:
    """Rough starting model from the empirical table."""
    g = empirical["gamma"].to_numpy(float)
    top = float(np.percentile(g, 90)) if len(g) else 1.0
    top = top if top > 0 else 1.0
    hr = max(float(empirical["dist"].max()) / 3.0, 1e-3)
    ur = max(float(empirical["u_lag"].max()) / 3.0, 0.5)
    if kind == "separable":
        return VariogramModel(kind, ExponentialComponent(0.7, hr, 0.3), ExponentialComponent(0.7, ur, 0.3),
                              sill=top)
    half = top / 2
    s = ExponentialComponent(0.8 * half, hr, 0.2 * half)
    t = ExponentialComponent(0.8 * half, ur, 0.2 * half)
    return VariogramModel(kind, s, t, k=0.1 / half)


class SpaceTimeVariogram(BaseEstimator):
    """Estimate and fit a space-time variogram from station data.

    Parameters
    ----------
    kind : {"separable", "product_sum"}
    n_space_bins, max_lag : binning of the empirical variogram.
    n_restarts : number of Nelder-Mead starts (the initial model plus jittered copies).
    random_state : seed for the jitter.
    """

    def __init__(self, kind="separable", n_space_bins=10, max_lag=12, n_restarts=5, init=None,
                 random_state=0):
        self.kind = kind
        self.n_space_bins = n_space_bins
        self.max_lag = max_lag
        self.n_restarts = n_restarts
        self.init = init
        self.random_state = random_state

    def fit(self, data: StationData, y=None):
        self.empirical_ = empirical_variogram(data, n_space_bins=self.n_space_bins, max_lag=self.max_lag)
        init = self.init if self.init is not None else default_init(self.kind, self.empirical_)
        res = fit_variogram(self.empirical_, self.kind, init, n_restarts=self.n_restarts,
                            seed=self.random_state)
        self.model_ = res.model
        self.objective_ = res.objective
        self.diagnostics_ = res.diagnostics
        return self
