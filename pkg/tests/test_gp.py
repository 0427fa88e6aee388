import json

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from apcgp.gp import (
    DataError,
    FactorizationError,
    FitResult,
    GPModel,
    HyperParams,
    MortalityDataset,
    ScalingInfo,
    cholesky,
    mll,
    posterior,
    prior_correlation_slice,
    residual_grid,
    sample_prior,
)
from apcgp.kernels import FAMILIES, Leaf, Op, parse_kernel

from conftest import grid_dataset, random_expr, random_kparams, random_small_dataset, ref_gram


def _random_params(rng, expr):
    return HyperParams(expr, rng.normal(-4, 0.5), rng.normal(0, 1), float(rng.uniform(0.01, 0.3)),
                       random_kparams(rng, expr))


def _oracle_cov(expr, p, ds):
    noise = p.noise * (1.0 / ds.deaths if ds.noise_mode == "by_deaths" else np.ones(ds.n))
    return ref_gram(expr, p.kernel, ds.X) + np.diag(noise)


def test_mll_matches_mvn_oracle(rng):
    for i in range(40):
        mode = "by_deaths" if i % 2 else "homoskedastic"
        ds = random_small_dataset(rng, int(rng.integers(2, 9)), mode)
        e = random_expr(rng, int(rng.integers(1, 5)))
        p = _random_params(rng, e)
        mean = p.beta0 + p.beta_age * ds.X[:, 0]
        want = multivariate_normal(mean, _oracle_cov(e, p, ds)).logpdf(ds.y)
        assert mll(e, p, ds, grad=False) == pytest.approx(want, abs=1e-8)


def test_posterior_matches_conditional_gaussian(rng):
    for _ in range(30):
        ds = random_small_dataset(rng, int(rng.integers(2, 9)))
        e = random_expr(rng, int(rng.integers(1, 4)))
        p = _random_params(rng, e)
        Xs = rng.uniform(0, 1, (3, 3))
        A = _oracle_cov(e, p, ds)
        Ks = ref_gram(e, p.kernel, Xs, ds.X)
        Kss = ref_gram(e, p.kernel, Xs)
        Ai = np.linalg.inv(A)
        m = p.beta0 + p.beta_age * ds.X[:, 0]
        want_mean = p.beta0 + p.beta_age * Xs[:, 0] + Ks @ Ai @ (ds.y - m)
        want_cov = Kss - Ks @ Ai @ Ks.T
        fit = FitResult(e, p, 0.0, 0.0, dataset=ds)
        mean, cov = posterior(fit, Xs)
        assert np.allclose(mean, want_mean, atol=1e-8)
        assert np.allclose(cov, want_cov, atol=1e-8)
        _, var = posterior(fit, Xs, full_cov=False)
        assert np.allclose(var, np.maximum(np.diag(want_cov), 0), atol=1e-8)


def _fd_check(model, p, h=1e-5):
    z = p.to_vector()
    _, g = model.log_marginal(p)
    worst = 0.0
    for j in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        fd = (model.log_marginal_vector(zp, grad=False) - model.log_marginal_vector(zm, grad=False)) / (2 * h)
        worst = max(worst, abs(fd - g[j]) / max(abs(g[j]), 1e-2))
    return worst


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_mll_gradient_each_family(family):
    rng = np.random.default_rng(100 + sorted(FAMILIES).index(family))
    coord = "y" if family == "Lin" else "a"
    e = Op("add", Op("mul", Leaf(family, coord), Leaf("RBF", "y")), Leaf("M52", "c"))
    for i in range(10):
        ds = random_small_dataset(rng, 8, "by_deaths" if i % 2 else "homoskedastic")
        assert _fd_check(GPModel(e, ds), _random_params(rng, e)) <= 1e-4


def test_profiled_matches_full_likelihood(rng):
    e = parse_kernel("add(mul(RBF_a, M12_y), M52_c)")
    ds = grid_dataset(range(60, 66), range(2000, 2006), seed=3)
    model = GPModel(e, ds)
    u = rng.normal(0, 0.5, 6)
    value, g, full = model.profiled(u)
    assert value == pytest.approx(model.log_marginal(full, grad=False), abs=1e-9)
    # the profile is a maximum over the eliminated coordinates
    z = full.to_vector()
    for j in (0, 1):
        for d in (-1e-3, 1e-3):
            zz = z.copy()
            zz[j] += d
            assert model.log_marginal_vector(zz, grad=False) <= value + 1e-9
    h = 1e-5
    for j in range(u.size):
        up, um = u.copy(), u.copy()
        up[j] += h
        um[j] -= h
        fd = (model.profiled(up, grad=False)[0] - model.profiled(um, grad=False)[0]) / (2 * h)
        assert fd == pytest.approx(g[j], rel=1e-4, abs=1e-4)


def test_cholesky_jitter_escalation():
    A = np.ones((4, 4))
    with pytest.raises(FactorizationError):
        cholesky(A)
    L, jitter = cholesky(A, jitter=True)
    assert jitter > 0
    assert np.allclose(L @ L.T, A + jitter * np.eye(4))


def test_mll_raises_on_indefinite():
    sc = ScalingInfo((60.0, 2000.0, 1935.0), (65.0, 2005.0, 1945.0))
    ds = MortalityDataset(np.array([60.0, 60.0000001]), np.array([2000.0, 2000.0]), np.zeros(2)).with_scaling(sc)
    with pytest.raises(DataError):
        MortalityDataset(np.array([60.0, 60.0]), np.array([2000.0, 2000.0]), np.array([1.0, 2.0]))
    e = parse_kernel("RBF_a")
    p = HyperParams(e, 0, 0, 1e-300, np.array([1.0, 10.0]))
    with pytest.raises(FactorizationError):
        mll(e, p, ds)


def test_dataset_validation():
    with pytest.raises(DataError):
        MortalityDataset(np.arange(3.0), np.arange(3.0), np.zeros(2))
    with pytest.raises(DataError):
        MortalityDataset(np.arange(2.0), np.arange(2.0), np.array([0.0, np.nan]))
    with pytest.raises(DataError):
        MortalityDataset(np.arange(2.0), np.arange(2.0), np.zeros(2), deaths=np.array([1.0, 0.0]),
                         noise_mode="by_deaths")
    with pytest.raises(DataError):
        MortalityDataset(np.arange(2.0), np.arange(2.0), np.zeros(2), noise_mode="poisson")


def test_scaling_and_cohort():
    ds = grid_dataset(range(50, 85), range(1990, 2020))
    assert np.array_equal(ds.cohort, ds.year - ds.age)
    assert ds.X.min() == pytest.approx(0.0) and ds.X.max() == pytest.approx(1.0)
    sc = ds.scaling
    assert sc.span("a") == 34 and sc.span("y") == 29 and sc.span("c") == (2019 - 50) - (1990 - 84)
    assert ScalingInfo.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc


def test_posterior_rejects_other_scaling(small_grid):
    e = parse_kernel("RBF_a")
    p = HyperParams(e, -4, 0, 0.01, np.array([1.0, 0.5]))
    fit = FitResult(e, p, 0.0, 0.0, dataset=small_grid)
    other = ScalingInfo((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    with pytest.raises(DataError):
        posterior(fit, small_grid.X, scaling=other)


def test_residual_grid_shape(small_grid):
    e = parse_kernel("mul(RBF_a, RBF_y)")
    p = HyperParams(e, -5, 0.4, 0.003, np.array([0.05, 0.5, 0.5]))
    fit = FitResult(e, p, 0.0, 0.0, dataset=small_grid)
    R = residual_grid(fit)
    assert R.shape == (8, 6)
    assert np.all(np.isfinite(R))


def test_correlation_slice_anchor_is_one(small_grid):
    e = parse_kernel("add(mul(RBF_a, Min_y), M12_c)")
    p = HyperParams(e, 0, 0, 0.01, np.array([0.3, 0.1, 0.4, 0.5, 0.2]))
    C = prior_correlation_slice(e, p, (53, 1993), range(50, 58), range(1990, 1996), small_grid.scaling)
    assert C.shape == (8, 6)
    assert C[3, 3] == pytest.approx(1.0)
    assert np.all(np.abs(C) <= 1 + 1e-12)


def test_sample_prior_moments():
    e = parse_kernel("RBF_a")
    p = HyperParams(e, -3.0, 1.0, 0.05, np.array([0.2, 0.5]))
    X = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    draws = sample_prior(e, p, X, 20000, seed=1)
    assert draws.shape == (20000, 2)
    assert np.allclose(draws.mean(0), [-3.0, -2.0], atol=0.02)
    want = 0.2 * np.exp(-1 / (2 * 0.25))
    assert np.cov(draws.T)[0, 1] == pytest.approx(want, abs=0.01)
    assert np.array_equal(draws, sample_prior(e, p, X, 20000, seed=1))


def test_fit_record_roundtrip(small_grid):
    e = parse_kernel("add(mul(RBF_a, M12_y), M52_c)")
    p = HyperParams(e, -4, 0.3, 0.01, np.array([0.08, 0.02, 0.5, 0.4, 0.1]))
    fit = FitResult(e, p, 12.5, -20.0, n_iterations=7, converged=True, dataset=small_grid)
    rec = json.loads(json.dumps(fit.to_record()))
    back = FitResult.from_record(rec, small_grid)
    assert back.key == fit.key
    assert np.allclose(back.params.values(), p.values())
    assert rec["data"]["noise_mode"] == "homoskedastic"
    assert fit.fitted().startswith("0.08·RBF_a(")
