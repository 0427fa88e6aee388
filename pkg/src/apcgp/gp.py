"""Exact Gaussian-process machinery for mortality surfaces.

Observations are ``y = f(x) + eps`` with ``f ~ GP(m, k)``, a linear mean in
scaled age ``m(x) = beta0 + beta_age * x_age`` and independent noise whose
variance is either a constant ``sigma2`` or ``sigma2 / deaths``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .kernels import (
    COORD_INDEX,
    CompiledKernel,
    Expr,
    KernelError,
    Leaf,
    PairIndex,
    ScaleLayout,
    canonical_form,
    format_kernel,
    bind_params,
    gram,
    kernel_diag,
    kernel_param_names,
    leaves,
    parse_kernel,
    strip_params,
)

log = logging.getLogger(__name__)

NOISE_MODES = ("homoskedastic", "by_deaths")
LOG_2PI = math.log(2.0 * math.pi)


class DataError(ValueError):
    """Malformed or inconsistent mortality data."""


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix is not numerically positive definite."""

    def __init__(self, message: str, params=None):
        super().__init__(message)
        self.params = params


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingInfo:
    """Per-coordinate (min, max) used to map age, year and cohort to [0, 1]."""

    mins: tuple[float, float, float]
    maxs: tuple[float, float, float]

    def __post_init__(self):
        for lo, hi, c in zip(self.mins, self.maxs, "ayc"):
            if not hi > lo:
                raise DataError(f"degenerate coordinate {c!r}: max must exceed min")

    @classmethod
    def from_data(cls, age, year) -> "ScalingInfo":
        age = np.asarray(age, dtype=float)
        year = np.asarray(year, dtype=float)
        cohort = year - age
        cols = (age, year, cohort)
        return cls(tuple(float(c.min()) for c in cols), tuple(float(c.max()) for c in cols))

    def span(self, coord: str) -> float:
        j = COORD_INDEX[coord]
        return self.maxs[j] - self.mins[j]

    def transform(self, age, year) -> np.ndarray:
        """Scaled (age, year, cohort) rows for raw ages and years."""
        age = np.asarray(age, dtype=float).ravel()
        year = np.asarray(year, dtype=float).ravel()
        raw = np.column_stack([age, year, year - age])
        lo = np.asarray(self.mins)
        return (raw - lo) / (np.asarray(self.maxs) - lo)

    def to_dict(self) -> dict:
        return {c: [lo, hi] for c, lo, hi in zip(("age", "year", "cohort"), self.mins, self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingInfo":
        cols = [d[c] for c in ("age", "year", "cohort")]
        return cls(tuple(float(c[0]) for c in cols), tuple(float(c[1]) for c in cols))


@dataclass(frozen=True, eq=False)
class MortalityDataset:
    """Observed log mortality rates on (age, year) cells."""

    age: np.ndarray
    year: np.ndarray
    y: np.ndarray
    deaths: np.ndarray | None = None
    exposures: np.ndarray | None = None
    noise_mode: str = "homoskedastic"
    scaling: ScalingInfo | None = None
    label: str = ""
    source: str | None = None

    def __post_init__(self):
        age = np.asarray(self.age, dtype=float).ravel()
        year = np.asarray(self.year, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "age", age)
        object.__setattr__(self, "year", year)
        object.__setattr__(self, "y", y)
        n = len(y)
        if n == 0:
            raise DataError("dataset is empty")
        if len(age) != n or len(year) != n:
            raise DataError("age, year and y must have equal length")
        for name in ("deaths", "exposures"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float).ravel()
                if len(arr) != n:
                    raise DataError(f"{name} has the wrong length")
                object.__setattr__(self, name, arr)
        if self.noise_mode not in NOISE_MODES:
            raise DataError(f"unknown noise mode {self.noise_mode!r}")
        if self.noise_mode == "by_deaths":
            if self.deaths is None:
                raise DataError("by_deaths noise requires a deaths column")
            bad = np.flatnonzero(~(self.deaths > 0))
            if bad.size:
                cells = ", ".join(f"({age[i]:g}, {year[i]:g})" for i in bad[:10])
                raise DataError(f"by_deaths noise requires deaths > 0; offending cells: {cells}")
        if not np.all(np.isfinite(y)):
            raise DataError("log rates must be finite")
        keys = age * 100000.0 + year
        if len(np.unique(keys)) != n:
            raise DataError("duplicate (age, year) cells")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def cohort(self) -> np.ndarray:
        return self.year - self.age

    @property
    def ages(self) -> np.ndarray:
        return np.unique(self.age)

    @property
    def years(self) -> np.ndarray:
        return np.unique(self.year)

    @property
    def X(self) -> np.ndarray:
        if self.scaling is None:
            raise DataError("dataset has no scaling; call scale_inputs first")
        return self.scaling.transform(self.age, self.year)

    def with_scaling(self, scaling: ScalingInfo) -> "MortalityDataset":
        return MortalityDataset(
            self.age, self.year, self.y, self.deaths, self.exposures,
            self.noise_mode, scaling, self.label, self.source,
        )

    def with_noise_mode(self, noise_mode: str) -> "MortalityDataset":
        return MortalityDataset(
            self.age, self.year, self.y, self.deaths, self.exposures,
            noise_mode, self.scaling, self.label, self.source,
        )

    def subset(self, mask) -> "MortalityDataset":
        mask = np.asarray(mask)
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return MortalityDataset(
            self.age[mask], self.year[mask], self.y[mask], pick(self.deaths), pick(self.exposures),
            self.noise_mode, self.scaling, self.label, self.source,
        )

    def to_grid(self, values) -> np.ndarray:
        """Arrange a per-row vector into an (n_ages, n_years) grid (NaN where absent)."""
        ages, years = self.ages, self.years
        out = np.full((len(ages), len(years)), np.nan)
        out[np.searchsorted(ages, self.age), np.searchsorted(years, self.year)] = values
        return out


def noise_diagonal(dataset: MortalityDataset, sigma2: float) -> np.ndarray:
    """Observation-noise variances for each row."""
    if not sigma2 > 0:
        raise ValueError("noise scale must be positive")
    return sigma2 * _noise_base(dataset)


def _noise_base(dataset: MortalityDataset) -> np.ndarray:
    if dataset.noise_mode == "homoskedastic":
        return np.ones(dataset.n)
    if dataset.deaths is None:
        raise DataError("by_deaths noise requires deaths")
    return 1.0 / dataset.deaths


# --------------------------------------------------------------------------
# hyperparameters
# --------------------------------------------------------------------------


def _kernel_kinds(expr: Expr) -> list[str]:
    """Constraint type per kernel parameter: 'pos' (exp map) or 'unit' (logistic)."""
    layout = ScaleLayout.of(expr)
    kinds = ["pos"] * layout.n_scales
    for leaf in leaves(expr):
        kinds.extend("unit" if leaf.family == "Meh" else "pos" for _ in leaf.info.param_names)
    return kinds


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Mean coefficients, kernel parameters (scales first) and noise scale.

    The optimiser works on an unconstrained vector
    ``[beta0, beta_age, log sigma2, transformed kernel params]`` where positive
    parameters use ``log`` and the Mehler correlation uses ``logit``.
    """

    expr: Expr
    beta0: float
    beta_age: float
    noise: float
    kernel: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float).ravel()
        object.__setattr__(self, "kernel", k)
        if k.shape[0] != ScaleLayout.of(self.expr).size:
            raise KernelError("kernel parameter vector does not match expression layout")

    @property
    def size(self) -> int:
        return 3 + self.kernel.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return self.kernel[: ScaleLayout.of(self.expr).n_scales]

    def names(self) -> list[str]:
        return ["beta0", "beta_age", "sigma2", *kernel_param_names(self.expr)]

    def values(self) -> np.ndarray:
        return np.concatenate([[self.beta0, self.beta_age, self.noise], self.kernel])

    def to_vector(self) -> np.ndarray:
        kinds = _kernel_kinds(self.expr)
        kz = np.array([math.log(v) if t == "pos" else float(_logit(v)) for v, t in zip(self.kernel, kinds)])
        return np.concatenate([[self.beta0, self.beta_age, math.log(self.noise)], kz])

    @classmethod
    def from_vector(cls, expr: Expr, z: Sequence[float]) -> "HyperParams":
        z = np.asarray(z, dtype=float)
        kinds = np.array(_kernel_kinds(expr))
        kz = z[3:]
        if kz.shape[0] != kinds.shape[0]:
            raise KernelError("parameter vector does not match expression layout")
        kernel = np.where(kinds == "pos", np.exp(np.where(kinds == "pos", kz, 0.0)), _expit(kz))
        return cls(expr, float(z[0]), float(z[1]), float(math.exp(z[2])), kernel)

    def kernel_dz(self) -> np.ndarray:
        """d(kernel param)/d(unconstrained) for each kernel parameter."""
        kinds = np.array(_kernel_kinds(self.expr))
        k = self.kernel
        return np.where(kinds == "pos", k, k * (1.0 - k))

    def bound_expr(self) -> Expr:
        return bind_params(strip_params(self.expr), self.kernel)

    def fitted_text(self, digits: int = 4) -> str:
        return format_kernel(self.bound_expr(), self.scales, mode="fitted", digits=digits)


# --------------------------------------------------------------------------
# linear algebra helpers
# --------------------------------------------------------------------------


def cholesky(A: np.ndarray, jitter: bool = False, params=None) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``.

    With ``jitter`` a diagonal term starting at ``1e-8 * mean(diag)`` is added
    after a failed attempt and escalated tenfold up to ``1e-4 * mean(diag)``.
    Returns ``(L, jitter_used)``.
    """
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info == 0:
        return L, 0.0
    if jitter:
        scale = float(np.mean(np.diag(A)))
        if scale > 0:
            eps = 1e-8 * scale
            while eps <= 1e-4 * scale * (1 + 1e-12):
                L, info = lapack.dpotrf(A + eps * np.eye(A.shape[0]), lower=1, clean=1)
                if info == 0:
                    return L, eps
                eps *= 10.0
    raise FactorizationError(f"matrix is not positive definite (LAPACK info {info})", params)


def _gradient_weights(L: np.ndarray, alpha: np.ndarray, c: float = 1.0) -> np.ndarray:
    """Matrix ``W`` with ``<W, S> = <(c alpha alpha' - A^-1) / 2, S>`` for symmetric ``S``.

    ``L`` must have a zeroed upper triangle.  Only the lower triangle of the
    inverse is formed, with the strict lower part counted twice, which saves
    mirroring it; ``W`` is therefore not symmetric but its diagonal is exact.
    """
    Ainv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise FactorizationError(f"inverse failed (LAPACK info {info})")
    W = np.outer(alpha, (0.5 * c) * alpha)
    W -= Ainv
    W.flat[:: W.shape[0] + 1] += 0.5 * np.diag(Ainv)
    return W


def _sample_mvn(mean: np.ndarray, cov: np.ndarray, n_samples: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cov = 0.5 * (cov + cov.T)
    if not np.any(cov):
        return np.tile(mean, (n_samples, 1))
    L, _ = cholesky(cov, jitter=True)
    z = rng.standard_normal((len(mean), n_samples))
    return (mean[:, None] + L @ z).T


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class GPModel:
    """A kernel expression bound to a scaled training dataset.

    Holds the precomputed input structure so that repeated likelihood
    evaluations during optimisation only pay for the Gram matrix and the
    factorisation.
    """

    def __init__(self, expr: Expr, dataset: MortalityDataset):
        self.expr = strip_params(expr)
        self.dataset = dataset
        self.X = dataset.X
        self.x_age = self.X[:, 0]
        self.noise_base = _noise_base(dataset)
        self.kernel = CompiledKernel(self.expr)
        self.pairs = PairIndex(self.X)
        self.n_hyperparams = 3 + self.kernel.n_params

    def mean(self, params: HyperParams, X: np.ndarray | None = None) -> np.ndarray:
        xa = self.x_age if X is None else np.asarray(X)[:, 0]
        return params.beta0 + params.beta_age * xa

    def covariance(self, params: HyperParams) -> np.ndarray:
        K = self.kernel.value(params.kernel, self.pairs)
        A = K.copy()
        A[np.diag_indices_from(A)] += params.noise * self.noise_base
        return A

    def log_marginal(self, params: HyperParams, grad: bool = True):
        """Log marginal likelihood and (optionally) its gradient w.r.t. the
        unconstrained parameter vector of :meth:`HyperParams.to_vector`."""
        n = self.dataset.n
        A = self.covariance(params)
        try:
            L, _ = cholesky(A, params=params)
        except FactorizationError as exc:
            exc.params = params
            raise
        r = self.dataset.y - self.mean(params)
        alpha = lapack.dpotrs(L, r, lower=1)[0]
        value = -0.5 * float(r @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * LOG_2PI
        if not grad:
            return value
        G = _gradient_weights(L, alpha)
        g = np.empty(params.size)
        g[0] = alpha.sum()
        g[1] = alpha @ self.x_age
        g[2] = params.noise * float(np.diag(G) @ self.noise_base)
        g[3:] = self.kernel.vjp(G) * params.kernel_dz()
        return value, g

    def log_marginal_vector(self, z: np.ndarray, grad: bool = True):
        return self.log_marginal(HyperParams.from_vector(self.expr, z), grad=grad)

    # -- profiled likelihood -------------------------------------------------
    #
    # Writing A = s * B with B = K(w, leaf params) + lam * noise_base, the
    # maximising mean coefficients (generalised least squares) and overall
    # amplitude s = r' B^-1 r / n are available in closed form.  The shape
    # vector u = [log w, log lam, transformed leaf params] is what remains.

    def shape_vector(self, params: HyperParams) -> np.ndarray:
        """Shape coordinates of ``params`` (amplitude taken as the first scale)."""
        z = params.to_vector()
        n_s = self.kernel.layout.n_scales
        s0 = z[3]
        u = np.concatenate([z[3:3 + n_s] - s0, [z[2] - s0], z[3 + n_s:]])
        return u

    def _split_shape(self, u: np.ndarray):
        n_s = self.kernel.layout.n_scales
        z = np.concatenate([[0.0, 0.0, u[n_s]], u[:n_s], u[n_s + 1:]])
        return HyperParams.from_vector(self.expr, z)

    def profiled(self, u: np.ndarray, grad: bool = True):
        """Profiled log likelihood at shape ``u``.

        Returns ``(value, gradient w.r.t. u, full HyperParams)``; the
        gradient is exact by the envelope theorem.
        """
        n = self.dataset.n
        shape = self._split_shape(np.asarray(u, dtype=float))
        K = self.kernel.value(shape.kernel, self.pairs)
        K[np.diag_indices_from(K)] += shape.noise * self.noise_base
        L, _ = cholesky(K, params=shape)
        H = np.column_stack([np.ones(n), self.x_age])
        BiH = lapack.dpotrs(L, H, lower=1)[0]
        Biy = lapack.dpotrs(L, self.dataset.y, lower=1)[0]
        beta = np.linalg.solve(H.T @ BiH, H.T @ Biy)
        r = self.dataset.y - H @ beta
        v = Biy - BiH @ beta
        s = max(float(r @ v) / n, 1e-300)
        value = -0.5 * n - 0.5 * n * math.log(s) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * LOG_2PI
        full = HyperParams(
            self.expr, float(beta[0]), float(beta[1]), s * shape.noise,
            np.concatenate([s * shape.kernel[: len(shape.scales)], shape.kernel[len(shape.scales):]]),
        )
        if not grad:
            return value, None, full
        # G = s * (1/2)(alpha alpha' - A^-1) with alpha = v / s, A = s B, i.e. (v v'/s - B^-1)/2
        G = _gradient_weights(L, v, 1.0 / s)
        gk = self.kernel.vjp(G) * shape.kernel_dz()
        n_s = self.kernel.layout.n_scales
        g_noise = shape.noise * float(np.diag(G) @ self.noise_base)
        g = np.concatenate([gk[:n_s], [g_noise], gk[n_s:]])
        return value, g, full

    def _factor(self, params: HyperParams):
        A = self.covariance(params)
        L, _ = cholesky(A, jitter=True, params=params)
        alpha = lapack.dpotrs(L, self.dataset.y - self.mean(params), lower=1)[0]
        return L, alpha

    def posterior(self, params: HyperParams, X_star: np.ndarray, full_cov: bool = True):
        """Posterior mean and covariance (or variance) of the latent surface."""
        X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
        L, alpha = self._factor(params)
        Ks = CompiledKernel(self.expr).value(params.kernel, PairIndex(X_star, self.X))
        mean = self.mean(params, X_star) + Ks @ alpha
        V = solve_triangular(L, Ks.T, lower=True, check_finite=False)
        if full_cov:
            Kss = CompiledKernel(self.expr).value(params.kernel, PairIndex(X_star))
            cov = Kss - V.T @ V
            return mean, 0.5 * (cov + cov.T)
        var = kernel_diag(self.expr, params.kernel, X_star) - np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)


def mll(expr: Expr, params: HyperParams, dataset: MortalityDataset, grad: bool = True):
    """Log marginal likelihood of ``dataset`` under ``expr`` at ``params``.

    Returns ``(value, gradient)`` where the gradient is taken with respect to
    the unconstrained vector ``params.to_vector()``; with ``grad=False`` only
    the value.  Raises :class:`FactorizationError` when the covariance is not
    positive definite.
    """
    return GPModel(expr, dataset).log_marginal(params, grad=grad)


# --------------------------------------------------------------------------
# fit results
# --------------------------------------------------------------------------


@dataclass(eq=False)
class FitResult:
    expr: Expr
    params: HyperParams | None
    mll: float
    bic: float
    n_iterations: int = 0
    converged: bool = False
    failed: bool = False
    trace: list[float] = field(default_factory=list)
    seed: int | None = None
    message: str = ""
    dataset: MortalityDataset | None = field(default=None, repr=False)

    @property
    def key(self) -> str:
        return canonical_form(self.expr)

    @property
    def n(self) -> int:
        return self.dataset.n if self.dataset is not None else 0

    @property
    def n_hyperparams(self) -> int:
        return 3 + ScaleLayout.of(self.expr).size

    @property
    def scaling(self) -> ScalingInfo | None:
        return None if self.dataset is None else self.dataset.scaling

    def structural(self) -> str:
        return format_kernel(self.expr)

    def fitted(self, digits: int = 4) -> str:
        if self.params is None:
            return ""
        return self.params.fitted_text(digits)

    def to_record(self) -> dict:
        rec = {
            "kernel": self.structural(),
            "canonical": self.key,
            "fitted": self.fitted(),
            "mll": self.mll,
            "bic": self.bic,
            "n": self.n,
            "n_hyperparams": self.n_hyperparams,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "failed": self.failed,
            "seed": self.seed,
            "message": self.message,
        }
        if self.params is not None:
            rec["parameters"] = [
                {"name": name, "value": float(v)}
                for name, v in zip(self.params.names(), self.params.values())
            ]
        ds = self.dataset
        if ds is not None:
            rec["data"] = {
                "source": ds.source,
                "label": ds.label,
                "noise_mode": ds.noise_mode,
                "age_range": [float(ds.age.min()), float(ds.age.max())],
                "year_range": [float(ds.year.min()), float(ds.year.max())],
                "scaling": ds.scaling.to_dict() if ds.scaling else None,
            }
        return rec

    @classmethod
    def from_record(cls, rec: dict, dataset: MortalityDataset | None = None) -> "FitResult":
        expr = parse_kernel(rec["kernel"])
        params = None
        if "parameters" in rec:
            vals = [p["value"] for p in rec["parameters"]]
            params = HyperParams(expr, vals[0], vals[1], vals[2], np.array(vals[3:]))
        return cls(
            expr=expr,
            params=params,
            mll=float(rec["mll"]),
            bic=float(rec["bic"]),
            n_iterations=int(rec.get("n_iterations", 0)),
            converged=bool(rec.get("converged", False)),
            failed=bool(rec.get("failed", False)),
            seed=rec.get("seed"),
            message=rec.get("message", ""),
            dataset=dataset,
        )


def _require(fit: FitResult) -> tuple[GPModel, HyperParams]:
    if fit.params is None or fit.failed:
        raise ValueError("fit has no usable parameters")
    if fit.dataset is None:
        raise ValueError("fit is not attached to its training dataset")
    return GPModel(fit.expr, fit.dataset), fit.params


def _check_scaling(fit: FitResult, scaling: ScalingInfo | None):
    if scaling is not None and fit.dataset.scaling != scaling:
        raise DataError("prediction inputs were scaled with a different scaling than the training data")


def posterior(fit: FitResult, X_star, scaling: ScalingInfo | None = None, full_cov: bool = True):
    """Posterior mean and covariance of the latent log-rate at scaled inputs.

    ``scaling``, when given, must be the scaling the inputs were produced
    with; it is checked against the training scaling.
    """
    model, params = _require(fit)
    _check_scaling(fit, scaling)
    return model.posterior(params, X_star, full_cov=full_cov)


def sample_prior(
    expr: Expr,
    params: HyperParams,
    X,
    n_samples: int,
    seed,
    deaths=None,
) -> np.ndarray:
    """Draws of ``y`` at scaled inputs ``X`` from ``MVN(m(X), K + noise)``.

    Noise is ``sigma2`` per row, or ``sigma2 / deaths`` when ``deaths`` is
    given.  Returns an ``(n_samples, n)`` array.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cov = gram(expr, params.kernel, X)
    base = np.ones(X.shape[0]) if deaths is None else 1.0 / np.asarray(deaths, dtype=float)
    cov[np.diag_indices_from(cov)] += params.noise * base
    mean = params.beta0 + params.beta_age * X[:, 0]
    return _sample_mvn(mean, cov, n_samples, seed)


def sample_posterior(fit: FitResult, X_star, n_paths: int, seed) -> np.ndarray:
    """Latent posterior sample paths at scaled inputs; ``(n_paths, n*)``."""
    mean, cov = posterior(fit, X_star)
    return _sample_mvn(mean, cov, n_paths, seed)


def residual_grid(fit: FitResult) -> np.ndarray:
    """Standardised residuals on the training (age, year) grid."""
    model, params = _require(fit)
    ds = fit.dataset
    mean, var = model.posterior(params, model.X, full_cov=False)
    noise = params.noise * model.noise_base
    r = (ds.y - mean) / np.sqrt(var + noise)
    return ds.to_grid(r)


def prior_correlation_slice(
    expr: Expr,
    params: HyperParams,
    anchor: tuple[float, float],
    ages,
    years,
    scaling: ScalingInfo,
) -> np.ndarray:
    """Prior correlation between ``f(anchor)`` and ``f`` over an age x year grid.

    Returns an ``(len(ages), len(years))`` array.
    """
    ages = np.asarray(ages, dtype=float)
    years = np.asarray(years, dtype=float)
    A, Y = np.meshgrid(ages, years, indexing="ij")
    Xg = scaling.transform(A.ravel(), Y.ravel())
    Xa = scaling.transform([anchor[0]], [anchor[1]])
    cross = gram(expr, params.kernel, Xa, Xg)[0]
    var_g = kernel_diag(expr, params.kernel, Xg)
    var_a = kernel_diag(expr, params.kernel, Xa)[0]
    if var_a <= 0 or np.any(var_g <= 0):
        raise ValueError("zero prior variance in correlation grid")
    return (cross / np.sqrt(var_a * var_g)).reshape(A.shape)


def mean_leaf_variance(expr: Expr, params: HyperParams, X) -> float:
    """Mean prior variance of ``expr`` (scales included) over inputs ``X``."""
    return float(np.mean(kernel_diag(expr, params.kernel, X)))


__all__ = [
    "DataError",
    "FactorizationError",
    "FitResult",
    "GPModel",
    "HyperParams",
    "MortalityDataset",
    "NOISE_MODES",
    "ScalingInfo",
    "cholesky",
    "mll",
    "noise_diagonal",
    "posterior",
    "prior_correlation_slice",
    "residual_grid",
    "sample_posterior",
    "sample_prior",
    "Leaf",
]
