"""Empirical-Bayes Laplace inference for :class:`~stlgcp.model.LatentModel`."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize

from .model import LatentModel, ModelVariant, NonFiniteError, ar1_precision
from .sparse import NotPositiveDefiniteError, SparseCholesky
from .spde import MaternHyper, matern_precision

__all__ = [
    "GaussianApprox",
    "InnerResult",
    "FitResult",
    "ConvergenceError",
    "inner_mode",
    "log_marginal_laplace",
    "log_posterior_theta",
    "fit",
    "predict_intensity",
    "seasonal_odds_ratio",
]

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None, best=None):
        super().__init__(message)
        self.trace = trace or []
        self.best = best


def _dense_cholesky(M):
    try:
        return sla.cho_factor(M, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefiniteError(str(exc)) from None


def _block_tridiagonal_inverse_blocks(H, n_blocks, bs):
    """Diagonal blocks of ``H^{-1}`` for a block-tridiagonal SPD ``H``."""
    H = sp.csr_matrix(H)
    sl = [slice(i * bs, (i + 1) * bs) for i in range(n_blocks)]
    D = [H[s, s].toarray() for s in sl]
    B = [H[sl[i + 1], sl[i]].toarray() for i in range(n_blocks - 1)]
    facs, gains = [], []
    S = D[0]
    for i in range(n_blocks):
        if i > 0:
            S = D[i] - B[i - 1] @ gains[i - 1]
        f = _dense_cholesky(S)
        facs.append(f)
        if i < n_blocks - 1:
            gains.append(sla.cho_solve(f, B[i].T))
    out = [None] * n_blocks
    out[-1] = sla.cho_solve(facs[-1], np.eye(bs))
    for i in range(n_blocks - 2, -1, -1):
        Si = sla.cho_solve(facs[i], np.eye(bs))
        K = gains[i]  # S_i^{-1} B_i^T
        out[i] = Si + K @ out[i + 1] @ K.T
    return out


class GaussianApprox:
    """Gaussian N(mode, H^{-1}) with H split into a small dense block (fixed and
    seasonal coordinates) and a sparse spatial block, via its Schur complement."""

    def __init__(self, Hzz, Hzw, Hww, n_blocks=0, block_size=0):
        self.n_z = Hzz.shape[0]
        self.n_w = 0 if Hww is None else Hww.shape[0]
        self.n_blocks = n_blocks
        self.block_size = block_size
        self.Hww = Hww
        self.Hzw = Hzw
        if self.n_w:
            self.chol_w = SparseCholesky(Hww)
            self.V = self.chol_w.solve(np.asarray(Hzw).T).reshape(self.n_w, self.n_z)
            schur = Hzz - Hzw @ self.V
        else:
            self.chol_w = None
            self.V = np.zeros((0, self.n_z))
            schur = Hzz
        self.schur = 0.5 * (schur + schur.T)
        self.chol_z = _dense_cholesky(self.schur)
        self._ww_blocks = None
        self._cov_z = None

    def logdet(self) -> float:
        ld = 2.0 * np.sum(np.log(np.diag(self.chol_z[0])))
        if self.n_w:
            ld += self.chol_w.logdet()
        return float(ld)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        bz, bw = b[: self.n_z], b[self.n_z:]
        if not self.n_w:
            return sla.cho_solve(self.chol_z, bz)
        tw = self.chol_w.solve(bw)
        xz = sla.cho_solve(self.chol_z, bz - self.Hzw @ tw)
        return np.concatenate([xz, tw - self.V @ xz])

    @property
    def cov_z(self) -> np.ndarray:
        """Covariance of the dense (fixed + seasonal) block."""
        if self._cov_z is None:
            self._cov_z = sla.cho_solve(self.chol_z, np.eye(self.n_z))
        return self._cov_z

    def ww_blocks(self):
        if self._ww_blocks is None:
            if self.n_blocks > 0:
                self._ww_blocks = _block_tridiagonal_inverse_blocks(self.Hww, self.n_blocks, self.block_size)
            else:
                self._ww_blocks = []
        return self._ww_blocks

    def marginal_variances(self) -> np.ndarray:
        var_z = np.diag(self.cov_z).copy()
        if not self.n_w:
            return var_z
        d = np.concatenate([np.diag(b) for b in self.ww_blocks()])
        VC = self.V @ self.cov_z
        d = d + np.einsum("ij,ij->i", VC, self.V)
        return np.concatenate([var_z, d])

    def variance_of(self, Az, Aw=None) -> np.ndarray:
        """Variances of the linear combinations ``Az @ z + Aw @ w`` (one per row)."""
        Az = np.atleast_2d(np.asarray(Az, dtype=float))
        U = Az.copy()
        var = np.zeros(len(Az))
        if self.n_w and Aw is not None and Aw.shape[1]:
            Aw = sp.csr_matrix(Aw)
            U -= Aw @ self.V
            bs = self.block_size
            blocks = self.ww_blocks()
            Awc = Aw.tocoo()
            row_block = np.full(len(Az), -1)
            row_block[Awc.row] = Awc.col // bs
            for b in np.unique(row_block[row_block >= 0]):
                rows = np.flatnonzero(row_block == b)
                sub = Aw[rows][:, b * bs:(b + 1) * bs]
                M = sub @ blocks[b]
                var[rows] += np.asarray((sub.multiply(M)).sum(axis=1)).ravel()
        var += np.einsum("ij,ij->i", U @ self.cov_z, U)
        return var


@dataclass
class InnerResult:
    mode: np.ndarray
    approx: GaussianApprox
    loglik: float
    quad: float
    n_iter: int
    grad_norm: float
    trace: list = field(default_factory=list)


def _hessian_blocks(model: LatentModel, w, Qz, Qw):
    Z = model.Z
    Hzz = Qz + (Z * w[:, None]).T @ Z
    if not model.n_w:
        return Hzz, np.zeros((model.n_z, 0)), None
    agg = model.aggregator
    wg = agg @ w
    WZg = agg @ (Z * w[:, None])
    Sg = model.S_group
    Hzw = np.asarray((Sg.T @ WZg).T)
    Hww = sp.csc_matrix(Qw + Sg.T @ sp.diags(wg) @ Sg)
    return Hzz, Hzw, Hww


def inner_mode(model: LatentModel, theta, x0=None, *, tol_grad=1e-6, tol_step=1e-8,
               max_iter=100, Qz=None, Qw=None) -> InnerResult:
    """Newton iterations for the mode of ``p(x | y, theta)``.

    Steps are halved while the objective would decrease. Stops when the
    gradient max-norm drops below ``tol_grad`` or the step norm below
    ``tol_step``.
    """
    Qz = model.z_precision(theta) if Qz is None else Qz
    Qw = model.spatial_precision(theta) if Qw is None else Qw
    nz = model.n_z
    x = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float)

    def objective(x):
        eta = model.linear_predictor(x)
        ll, g, w = model.loglik_eta(eta)
        xz, xw = x[:nz], x[nz:]
        quad = xz @ Qz @ xz + (xw @ (Qw @ xw) if model.n_w else 0.0)
        return ll - 0.5 * quad, ll, quad, g, w

    f, ll, quad, g, w = objective(x)
    trace = []
    grad_norm = np.inf
    for it in range(max_iter + 1):
        grad = model.Z.T @ g - Qz @ x[:nz]
        if model.n_w:
            grad = np.concatenate([grad, model.S.T @ g - Qw @ x[nz:]])
        grad_norm = float(np.max(np.abs(grad)))
        Hzz, Hzw, Hww = _hessian_blocks(model, w, Qz, Qw)
        approx = GaussianApprox(Hzz, Hzw, Hww, model.n_blocks, model.n_s)
        trace.append((it, f, grad_norm))
        if grad_norm < tol_grad:
            return InnerResult(x, approx, ll, quad, it, grad_norm, trace)
        if it == max_iter:
            break
        step = approx.solve(grad)
        t = 1.0
        for _ in range(40):
            try:
                cand = objective(x + t * step)
            except NonFiniteError:
                cand = None
            if cand is not None and cand[0] >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed in inner Newton iterations", trace, x)
        x = x + t * step
        f, ll, quad, g, w = cand
        if np.linalg.norm(t * step) < tol_step:
            grad = model.Z.T @ g - Qz @ x[:nz]
            if model.n_w:
                grad = np.concatenate([grad, model.S.T @ g - Qw @ x[nz:]])
            Hzz, Hzw, Hww = _hessian_blocks(model, w, Qz, Qw)
            approx = GaussianApprox(Hzz, Hzw, Hww, model.n_blocks, model.n_s)
            return InnerResult(x, approx, ll, quad, it + 1, float(np.max(np.abs(grad))), trace)
    raise ConvergenceError(f"inner Newton did not converge in {max_iter} iterations", trace, x)


def _prior_logdet(model: LatentModel, theta, Qz, Qw) -> float:
    ld = float(np.linalg.slogdet(Qz)[1])
    if not model.n_w:
        return ld
    h = model.unpack(theta)
    # kron(T, Qs) has log det  n_s * logdet(T) + n_years * logdet(Qs)
    Qs = matern_precision(MaternHyper(h["range"], h["sd"]), model.C, model.G)
    ld_s = SparseCholesky(Qs).logdet()
    if model.variant is ModelVariant.SHARED_SPATIAL:
        return ld + ld_s
    if model.variant is ModelVariant.INDEPENDENT_YEARLY:
        return ld + model.n_years * ld_s
    T = ar1_precision(h["rho"], model.n_years).toarray()
    return ld + model.n_years * ld_s + model.n_s * float(np.linalg.slogdet(T)[1])


def log_marginal_laplace(model: LatentModel, theta, x0=None, return_inner=False, **kw):
    """Laplace approximation of ``log p(y | theta)``."""
    Qz = model.z_precision(theta)
    Qw = model.spatial_precision(theta)
    inner = inner_mode(model, theta, x0, Qz=Qz, Qw=Qw, **kw)
    val = inner.loglik - 0.5 * inner.quad + 0.5 * _prior_logdet(model, theta, Qz, Qw) \
        - 0.5 * inner.approx.logdet()
    return (val, inner) if return_inner else val


def log_posterior_theta(model: LatentModel, theta, x0=None):
    """Unnormalised log posterior of the hyperparameters."""
    lp = model.log_prior_hyper(theta)
    if not np.isfinite(lp):
        return -np.inf, None
    val, inner = log_marginal_laplace(model, theta, x0, return_inner=True)
    return val + lp, inner


_HYPER_LABELS = {
    "range": "Spatial range (km)",
    "sd": "Standard deviation of the spatial field",
    "rho": "Temporal autocorrelation",
    "seasonal_precision": "Precision of the seasonal effect",
}


@dataclass(frozen=True)
class FitResult:
    variant: ModelVariant
    theta_names: list
    theta_hat: np.ndarray
    theta_cov: np.ndarray
    hyperparameters: pd.DataFrame
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    fixed_effects: pd.DataFrame
    seasonal_mean: np.ndarray
    seasonal_cov: np.ndarray
    log_marginal: float
    log_posterior: float
    converged: bool
    diagnostics: dict
    approx: GaussianApprox = field(repr=False, compare=False)

    @property
    def theta_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.theta_cov), 0, None))

    def latent_frame(self, names) -> pd.DataFrame:
        return pd.DataFrame({"name": names, "mean": self.latent_mean, "sd": self.latent_sd})


def _fd_hessian(f, x, h):
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    E = np.eye(n) * h
    fp = np.array([f(x + E[i]) for i in range(n)])
    fm = np.array([f(x - E[i]) for i in range(n)])
    for i in range(n):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h**2
        for j in range(i + 1, n):
            fpp = f(x + E[i] + E[j])
            fmm = f(x - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fp[i] - fp[j] + 2 * f0 - fm[i] - fm[j] + fmm) / (2 * h**2)
    return H


def _hyper_table(model, theta, cov):
    h = model.unpack(theta)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    deriv = {}
    for name, s in zip(model.theta_names, se):
        if name == "log_range":
            deriv["range"] = h["range"] * s
        elif name == "log_sd":
            deriv["sd"] = h["sd"] * s
        elif name == "atanh_rho":
            deriv["rho"] = (1 - h["rho"] ** 2) * s
        elif name == "log_seasonal_precision":
            deriv["seasonal_precision"] = h["seasonal_precision"] * s
    rows = [(k, _HYPER_LABELS[k], v, deriv[k]) for k, v in h.items()]
    return pd.DataFrame(rows, columns=["parameter", "label", "estimate", "sd"]).set_index("parameter")


def fit(model: LatentModel, theta_init=None, budget: int = 300, *, n_restarts: int = 3,
        initial_step: float = 0.5, xatol: float = 1e-3, fatol: float = 1e-4,
        fd_step: float = 0.05) -> FitResult:
    """Posterior mode of the hyperparameters by Nelder-Mead, then Gaussian summaries.

    ``budget`` caps the number of Laplace evaluations used by the search
    (restarts included); the finite-difference Hessian for standard errors
    is evaluated on top of it.
    """
    t0 = time.perf_counter()
    theta0 = model.default_theta() if theta_init is None else np.asarray(theta_init, dtype=float)
    if theta0.shape != (len(model.theta_names),):
        raise ValueError(f"theta_init must have length {len(model.theta_names)}")
    if not np.isfinite(model.log_prior_hyper(theta0)):
        raise ValueError("theta_init outside the hyperparameter domain")

    cache = {"x": None, "best": (np.inf, None), "n": 0}

    def objective(theta):
        cache["n"] += 1
        try:
            val, inner = log_posterior_theta(model, theta, cache["x"])
        except (ConvergenceError, NotPositiveDefiniteError, NonFiniteError, ValueError) as exc:
            log.debug("evaluation failed at %s: %s", theta, exc)
            return 1e300
        if inner is None or not np.isfinite(val):
            return 1e300
        cache["x"] = inner.mode
        if -val < cache["best"][0]:
            cache["best"] = (-val, np.array(theta))
        return -val

    converged = False
    x = theta0
    step = initial_step
    prev = np.inf
    n_runs = 0
    while cache["n"] < budget and n_runs <= n_restarts:
        simplex = np.vstack([x] + [x + step * e for e in np.eye(len(x))])
        res = minimize(objective, x, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxfev": budget - cache["n"],
                                "xatol": xatol, "fatol": fatol})
        n_runs += 1
        x = cache["best"][1] if cache["best"][1] is not None else res.x
        best = cache["best"][0]
        if res.success and prev - best < fatol:
            converged = True
            break
        prev = best
        step = max(step * 0.5, 10 * xatol)
    theta_hat = cache["best"][1]
    if theta_hat is None:
        raise ConvergenceError("no valid Laplace evaluation during hyperparameter search")
    n_search = cache["n"]

    def neg_post(th):
        val, _ = log_posterior_theta(model, th, cache["x"])
        return -val

    try:
        Hth = _fd_hessian(neg_post, theta_hat, fd_step)
        cov = np.linalg.inv(Hth)
        if not np.all(np.linalg.eigvalsh(0.5 * (cov + cov.T)) > 0):
            raise np.linalg.LinAlgError("hyperparameter Hessian not positive definite")
    except (np.linalg.LinAlgError, ConvergenceError, NotPositiveDefiniteError):
        cov = np.full((len(theta_hat), len(theta_hat)), np.nan)

    log_post, inner = log_posterior_theta(model, theta_hat, cache["x"])
    log_marg = log_post - model.log_prior_hyper(theta_hat)
    approx = inner.approx
    var = approx.marginal_variances()
    sd = np.sqrt(var)
    mode = inner.mode

    nf = model.n_fixed
    fe = pd.DataFrame({
        "estimate": mode[:nf],
        "sd": sd[:nf],
        "ci_low": mode[:nf] - Z95 * sd[:nf],
        "ci_high": mode[:nf] + Z95 * sd[:nf],
    }, index=pd.Index(model.fixed_names, name="covariate"))
    fe["significant"] = (fe["ci_low"] > 0) | (fe["ci_high"] < 0)

    if model.seasonal:
        Bm = model.seasonal_basis
        cz = approx.cov_z[nf:model.n_z, nf:model.n_z]
        s_mean = Bm @ mode[nf:model.n_z]
        s_cov = Bm @ cz @ Bm.T
    else:
        s_mean = np.zeros(0)
        s_cov = np.zeros((0, 0))

    diagnostics = {
        "outer_evaluations": n_search,
        "outer_runs": n_runs,
        "newton_iterations": inner.n_iter,
        "inner_grad_norm": inner.grad_norm,
        "seconds": time.perf_counter() - t0,
        "theta_init": theta0.tolist(),
    }
    return FitResult(
        variant=model.variant,
        theta_names=list(model.theta_names),
        theta_hat=np.asarray(theta_hat),
        theta_cov=cov,
        hyperparameters=_hyper_table(model, theta_hat, cov),
        latent_mean=mode,
        latent_sd=sd,
        fixed_effects=fe,
        seasonal_mean=s_mean,
        seasonal_cov=s_cov,
        log_marginal=float(log_marg),
        log_posterior=float(log_post),
        converged=converged,
        diagnostics=diagnostics,
        approx=approx,
    )


def predict_intensity(fit: FitResult, model: LatentModel, targets: pd.DataFrame,
                      covariates=None) -> pd.DataFrame:
    """Posterior mean and sd of the log intensity (per km^2 and month) at targets.

    ``targets`` has ``cell_id`` and ``month_index`` columns. ``covariates`` is a
    CovariateTable, an array aligned with ``targets``, or None for models
    without covariates.
    """
    cell = targets["cell_id"].to_numpy()
    month = targets["month_index"].to_numpy()
    Z, S = model.target_design(cell, month, covariates)
    x = fit.latent_mean
    mean = Z @ x[: model.n_z]
    if model.n_w:
        mean = mean + S @ x[model.n_z:]
    var = fit.approx.variance_of(Z, S if model.n_w else None)
    return pd.DataFrame({
        "cell_id": cell,
        "month_index": month,
        "mean": mean,
        "sd": np.sqrt(np.clip(var, 0, None)),
    })


def seasonal_odds_ratio(fit: FitResult, reference_month: int = 6) -> pd.DataFrame:
    """``exp(f(m) - f(reference))`` for every month with 95% bands."""
    f = fit.seasonal_mean
    if f.size == 0:
        raise ValueError("fit has no seasonal block")
    n = f.size
    if not 1 <= reference_month <= n:
        raise ValueError(f"reference_month must be in 1..{n}")
    r = reference_month - 1
    C = fit.seasonal_cov
    diff = f - f[r]
    var = np.diag(C) + C[r, r] - 2.0 * C[:, r]
    sd = np.sqrt(np.clip(var, 0, None))
    return pd.DataFrame({
        "month": np.arange(1, n + 1),
        "odds_ratio": np.exp(diff),
        "lower": np.exp(diff - Z95 * sd),
        "upper": np.exp(diff + Z95 * sd),
    })
