"""Hyperparameter estimation: input scaling, initialisation, Adam ascent on
the log marginal likelihood, tight refits and convergence profiles."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .gp import (
    FactorizationError,
    FitResult,
    GPModel,
    HyperParams,
    MortalityDataset,
    ScalingInfo,
)
from .kernels import (
    Expr,
    KernelError,
    Leaf,
    ScaleLayout,
    additive_components,
    canonical_form,
    iter_nodes,
    leaves,
    parse_kernel,
)
from .scoring import bic

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings.

    Attributes
    ----------
    learning_rate : float
        Adam step size on the unconstrained parameters.
    tolerance : float
        Convergence threshold on best-seen mll improvement over the window.
    max_iterations : int
        Iteration cap (the initial evaluation counts as iteration 1).
    convergence_window : int
        Number of iterations the improvement is measured over.
    seed : int
        Seed for the random initialisation.
    """

    learning_rate: float = 0.05
    tolerance: float = 1e-4
    max_iterations: int = 150
    convergence_window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


TIGHT = FitOptions(tolerance=1e-6, max_iterations=1000)


def scale_inputs(dataset: MortalityDataset, scaling: ScalingInfo | None = None):
    """Attach a unit-interval scaling to ``dataset``.

    Returns ``(scaled_dataset, scaling)``; with ``scaling=None`` the range is
    taken from the data itself.
    """
    if scaling is None:
        scaling = ScalingInfo.from_data(dataset.age, dataset.year)
    return dataset.with_scaling(scaling), scaling


def derive_seed(master: int, key: str, attempt: int = 0) -> int:
    """Per-fit seed from (master seed, canonical key, attempt index)."""
    digest = hashlib.sha256(f"{int(master)}|{key}|{int(attempt)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def init_hyperparams(expr: Expr, dataset: MortalityDataset, rng) -> HyperParams:
    """Random starting point for :func:`fit`.

    Leaf parameters given in the expression text are used as-is; the rest are
    drawn: lengthscales and AR2 periods log-uniform on [0.05, 2], Lin
    ``sigma0`` and Min ``t0`` log-uniform on [0.1, 1], Mehler ``rho`` uniform
    on (0, 0.9).  Mean coefficients come from a least-squares line in scaled
    age; scales share the variance of y equally between additive components.
    """
    rng = np.random.default_rng(rng)
    y = dataset.y
    xa = dataset.X[:, 0]
    if np.ptp(xa) > 0:
        beta_age, beta0 = np.polyfit(xa, y, 1)
    else:
        beta_age, beta0 = 0.0, float(np.mean(y))
    var = float(np.var(y))
    layout = ScaleLayout.of(expr)
    scale0 = max(var / additive_components(expr), SCALE_FLOOR)
    kernel = [scale0] * layout.n_scales
    for leaf in leaves(expr):
        drawn = []
        for name in leaf.info.param_names:
            if name in ("lengthscale", "period"):
                drawn.append(_log_uniform(rng, 0.05, 2.0))
            elif name in ("sigma0", "t0"):
                drawn.append(_log_uniform(rng, 0.1, 1.0))
            else:
                drawn.append(float(rng.uniform(1e-3, 0.9)))
        kernel.extend(leaf.params if leaf.params is not None else drawn)
    target = max(0.01 * var, SCALE_FLOOR)
    if dataset.noise_mode == "by_deaths":
        noise = target / float(np.median(1.0 / dataset.deaths))
    else:
        noise = target
    return HyperParams(expr, float(beta0), float(beta_age), noise, np.array(kernel))


# accepted steps grow the step size up to this multiple of the base rate
LR_GROWTH_CAP = 8.0


def _adam(model: GPModel, u0: np.ndarray, opts: FitOptions):
    """Adam ascent on the profiled likelihood.

    Returns (best params, best value, trace, converged).  A step whose
    covariance cannot be factorised is retried at a tenth of its size, up to
    three times, and skipped otherwise.  A step that lowers the likelihood is
    rejected: the first moment is reset and the step size halved.  Accepted
    steps grow the step size by 20% up to ``LR_GROWTH_CAP`` times the base.
    """
    b1, b2, eps = 0.9, 0.999, 1e-8
    u = u0.copy()
    value, grad, params = model.profiled(u)
    best, best_params = value, params
    trace = [value]
    best_hist = [best]
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    converged = False
    w = opts.convergence_window
    lr = opts.learning_rate
    t = 0
    for _ in range(1, opts.max_iterations):
        if len(best_hist) > w and best_hist[-1] - best_hist[-1 - w] < opts.tolerance:
            converged = True
            break
        if lr < 1e-10 * opts.learning_rate:
            # repeated rejections: no representable step improves the value
            converged = True
            break
        t += 1
        with np.errstate(over="ignore", invalid="ignore"):
            # degenerate targets can produce huge gradients; the ratio stays bounded
            m_new = b1 * m + (1 - b1) * grad
            v_new = b2 * v + (1 - b2) * grad * grad
            step = lr * (m_new / (1 - b1**t)) / (np.sqrt(v_new / (1 - b2**t)) + eps)
        step = np.nan_to_num(step, nan=0.0, posinf=lr, neginf=-lr)
        accepted = False
        for _ in range(4):
            try:
                new_value, new_grad, new_params = model.profiled(u + step)
                if not (np.isfinite(new_value) and np.all(np.isfinite(new_grad))):
                    raise FactorizationError("non-finite likelihood")
            except (FactorizationError, FloatingPointError, OverflowError, KernelError):
                step = step / 10.0
                continue
            accepted = new_value >= value
            break
        if accepted:
            u, value, grad, params = u + step, new_value, new_grad, new_params
            m, v = m_new, v_new
            lr = min(LR_GROWTH_CAP * opts.learning_rate, lr * 1.2)
        else:
            # overshoot or failed factorisation: drop momentum, shrink the step
            m = np.zeros_like(m)
            t = 0
            lr *= 0.5
        trace.append(value)
        if value > best:
            best, best_params = value, params
        best_hist.append(best)
    if not converged and len(best_hist) > w and best_hist[-1] - best_hist[-1 - w] < opts.tolerance:
        converged = True
    return best_params, best, trace, converged


def fit(
    expr: Expr | str,
    dataset: MortalityDataset,
    opts: FitOptions | None = None,
    init: HyperParams | None = None,
) -> FitResult:
    """Maximise the log marginal likelihood of ``expr`` on ``dataset``.

    Parameters
    ----------
    expr : Expr or str
        Kernel expression; numeric leaf parameters act as starting values.
    dataset : MortalityDataset
        Scaled training data.
    opts : FitOptions, optional
    init : HyperParams, optional
        Explicit starting point, bypassing random initialisation.

    Returns
    -------
    FitResult
        Best-seen parameters.  When no starting point yields a positive
        definite covariance the result is marked ``failed`` with infinite BIC.
    """
    opts = opts or FitOptions()
    if isinstance(expr, str):
        expr = parse_kernel(expr)
    rng = np.random.default_rng(opts.seed)
    model = GPModel(expr, dataset)
    n = dataset.n
    starts = [init] if init is not None else []
    starts += [None] * 3
    last_error = ""
    for start in starts:
        params = start if start is not None else init_hyperparams(expr, dataset, rng)
        try:
            best, value, trace, converged = _adam(model, model.shape_vector(params), opts)
        except (FactorizationError, KernelError) as exc:
            last_error = str(exc)
            continue
        return FitResult(
            expr=model.expr,
            params=best,
            mll=float(value),
            bic=bic(value, best.size, n),
            n_iterations=len(trace),
            converged=converged,
            trace=[float(t) for t in trace],
            seed=opts.seed,
            dataset=dataset,
        )
    log.info("fit of %s failed: %s", canonical_form(expr), last_error)
    return FitResult(
        expr=model.expr,
        params=None,
        mll=-math.inf,
        bic=math.inf,
        failed=True,
        seed=opts.seed,
        message=last_error or "factorization failed",
        dataset=dataset,
    )


def refit_top(
    results: Sequence[FitResult],
    n_top: int,
    tight: FitOptions = TIGHT,
    master_seed: int = 0,
) -> list[FitResult]:
    """Refit the best ``n_top`` distinct kernels with tight options.

    Each kernel is refitted from a fresh seed; the better of the refit and
    the original fit is kept.  Returns all inputs re-ranked by BIC with the
    refitted entries replaced.
    """
    from .scoring import rank_and_dedup

    ranked = rank_and_dedup(results)
    if n_top <= 0:
        return [e.fit for e in ranked.entries]
    out = []
    for i, entry in enumerate(ranked.entries):
        old = entry.fit
        if i >= n_top:
            out.append(old)
            continue
        seed = derive_seed(master_seed, entry.key, attempt=1)
        new = fit(old.expr, old.dataset, replace(tight, seed=seed))
        if new.failed:
            log.warning("refit of %s failed (%s); keeping the original fit", entry.key, new.message)
            out.append(old)
        else:
            out.append(new if new.bic <= old.bic else old)
    return [e.fit for e in rank_and_dedup(out).entries]


@dataclass(frozen=True)
class ProfileRow:
    tolerance: float
    steps: int
    bic: float
    mll: float


def convergence_profile(
    expr: Expr | str,
    dataset: MortalityDataset,
    tolerances: Sequence[float] = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7),
    long_iterations: int = 2000,
    opts: FitOptions | None = None,
) -> tuple[list[ProfileRow], FitResult]:
    """Steps needed to come within each tolerance of a long run's best mll.

    One fit runs for ``long_iterations`` without early stopping; for each
    tolerance the first (1-based) iteration whose mll is within it of the
    best value is reported.
    """
    opts = replace(opts or FitOptions(), tolerance=0.0, max_iterations=long_iterations)
    result = fit(expr, dataset, opts)
    if result.failed:
        raise FactorizationError(f"profile fit failed: {result.message}")
    trace = np.asarray(result.trace)
    best = trace.max()
    rows = []
    for eps in tolerances:
        idx = int(np.argmax(trace >= best - eps))
        rows.append(ProfileRow(float(eps), idx + 1, bic(trace[idx], result.params.size, dataset.n), float(trace[idx])))
    return rows, result


def report_params(fit_result: FitResult, scaling: ScalingInfo | None = None) -> list[dict]:
    """Fitted parameters in interpretable units.

    Lengthscales and AR2 periods of stationary leaves are multiplied by the
    span of their coordinate; the age slope is given per year of age.
    Nonstationary leaf parameters stay on the unit-interval axes and carry
    ``scaled=True``.
    """
    if fit_result.params is None:
        return []
    scaling = scaling or fit_result.scaling
    if scaling is None:
        raise ValueError("a scaling is required to report parameters")
    p = fit_result.params
    span_age = scaling.span("a")
    rows = [
        {"name": "beta0", "value": p.beta0, "unit": "log rate", "scaled": False},
        {"name": "beta_age", "value": p.beta_age / span_age, "unit": "per year of age", "scaled": False},
        {"name": "sigma2", "value": p.noise, "unit": "variance" if fit_result.dataset is None
         or fit_result.dataset.noise_mode == "homoskedastic" else "variance x deaths", "scaled": False},
    ]
    layout = ScaleLayout.of(p.expr)
    for j, s in enumerate(p.scales):
        rows.append({"name": f"scale[{j}]", "value": float(s), "unit": "variance", "scaled": False})
    off = layout.n_scales
    nodes = list(iter_nodes(p.expr))
    leaf_nodes = [n for n in nodes if isinstance(n, Leaf)]
    for k, leaf in enumerate(leaf_nodes):
        for name in leaf.info.param_names:
            value = float(p.kernel[off])
            off += 1
            if leaf.info.stationary:
                span = scaling.span(leaf.coord)
                rows.append({"name": f"{leaf.name}#{k}.{name}", "value": value * span,
                             "unit": "years", "scaled": False})
            else:
                rows.append({"name": f"{leaf.name}#{k}.{name}", "value": value,
                             "unit": "unit interval", "scaled": True})
    return rows


__all__ = [
    "FitOptions",
    "ProfileRow",
    "TIGHT",
    "convergence_profile",
    "derive_seed",
    "fit",
    "init_hyperparams",
    "refit_top",
    "report_params",
    "scale_inputs",
]
