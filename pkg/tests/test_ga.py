import hashlib
import math
from collections import Counter

import numpy as np
import pytest

from apcgp.fitting import FitOptions
from apcgp.ga import (
    K_F,
    K_R,
    OPERATIONS,
    QUANTILE_COLUMNS,
    GAConfig,
    GARecord,
    crossover,
    double_tournament,
    generation_quantiles,
    hoist,
    initialize_kernel,
    mutate,
    parsimony_choice,
    replay_offspring,
    run_ga,
)
from apcgp.gp import FitResult
from apcgp.kernels import Leaf, Op, canonical_form, format_kernel, leaves, length, parse_kernel


def mock_fitness(expr, dataset, opts):
    """Deterministic pseudo-BIC: a key hash plus a length penalty."""
    key = canonical_form(expr)
    h = int(hashlib.sha256(key.encode()).hexdigest()[:8], 16) / 2**32
    b = 10.0 * h + 0.5 * length(expr)
    return FitResult(expr, None, -b, b, seed=opts.seed)


def failing_fitness(expr, dataset, opts):
    if any(leaf.family == "Min" for leaf in leaves(expr)):
        return FitResult(expr, None, -math.inf, math.inf, failed=True)
    return mock_fitness(expr, dataset, opts)


class FixedRng:
    """Stand-in generator returning scripted integers."""

    def __init__(self, ints):
        self.ints = list(ints)

    def integers(self, *args, **kwargs):
        return self.ints.pop(0)


FIG2_KAPPA = "add(mul(Min_a, M12_y), M52_c)"


def _shape(e):
    if isinstance(e, Leaf):
        return "L"
    return ("O", _shape(e.left), _shape(e.right))


def _binomial_ok(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p)) + 1


# -- configuration ----------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = GAConfig()
    assert sum(cfg.op_probabilities) == pytest.approx(1.0)
    assert (cfg.population, cfg.generations, cfg.tournament_size, cfg.parsimony) == (200, 20, 7, 1.2)
    with pytest.raises(ValueError):
        GAConfig(p_copy=0.2)
    with pytest.raises(ValueError):
        GAConfig(search_set="x")
    with pytest.raises(ValueError):
        GAConfig(init_lengths=(2,))


def test_config_from_mapping():
    cfg = GAConfig.from_mapping({"population": "50", "seed": "3", "max_iterations": "40", "init_lengths": "3, 5"})
    assert cfg.population == 50 and cfg.seed == 3
    assert cfg.fit_options.max_iterations == 40
    assert cfg.init_lengths == (3, 5)
    with pytest.raises(ValueError):
        GAConfig.from_mapping({"bogus": "1"})


def test_search_sets():
    assert len(K_R) == 13 and ("Lin", "y") in K_R
    assert len(K_F) == 8 * 3 + 1
    assert all(c == "y" for f, c in K_F if f == "Lin")


# -- initialisation ----------------------------------------------------------------

def test_initialize_single_leaf():
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert isinstance(initialize_kernel(rng, K_R, (1,)), Leaf)


def test_initialize_length_distribution_and_leaves():
    rng = np.random.default_rng(1)
    n = 10_000
    counts = Counter()
    allowed = set(K_R)
    for _ in range(n):
        e = initialize_kernel(rng)
        counts[length(e)] += 1
        assert all((leaf.family, leaf.coord) in allowed for leaf in leaves(e))
    assert set(counts) == {3, 5, 7, 9}
    for L in (3, 5, 7, 9):
        assert _binomial_ok(counts[L], n, 0.25)


# -- selection --------------------------------------------------------------------------

def test_tournament_population_of_one():
    rng = np.random.default_rng(0)
    assert all(double_tournament([1.0], [5], rng) == 0 for _ in range(50))


def test_parsimony_preference():
    rng = np.random.default_rng(2)
    n = 10_000
    shorter = sum(parsimony_choice(0, 1, [0.0, 0.0], [3, 9], rng) == 0 for _ in range(n))
    assert abs(shorter / n - 0.60) <= 0.02


def test_double_tournament_two_member_population():
    # T = 1: both winners coincide half of the time, otherwise the 0.6 rule applies
    rng = np.random.default_rng(3)
    n = 10_000
    shorter = sum(double_tournament([0.0, 0.0], [3, 9], rng, T=1) == 0 for _ in range(n))
    assert abs(shorter / n - (0.25 + 0.5 * 0.6)) <= 0.02


def test_dominating_member_selected_most():
    rng = np.random.default_rng(4)
    bics = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    lengths = [3, 5, 5, 7, 9]
    counts = Counter(double_tournament(bics, lengths, rng, T=2) for _ in range(10_000))
    assert counts[0] == max(counts.values())


# -- variation operators -----------------------------------------------------------------

def test_crossover_fig2():
    kappa, xi = parse_kernel(FIG2_KAPPA), parse_kernel("mul(RBF_a, M52_y)")
    child, (i, j) = crossover(kappa, xi, FixedRng([2, 1]))
    assert (i, j) == (2, 1)
    assert child == parse_kernel("add(mul(RBF_a, M12_y), M52_c)")
    assert kappa == parse_kernel(FIG2_KAPPA)
    root, _ = crossover(kappa, xi, FixedRng([0, 0]))
    assert root == xi


def test_crossover_leaf_subset():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a, b = initialize_kernel(rng, K_F), initialize_kernel(rng, K_F)
        child, _ = crossover(a, b, rng)
        assert set(leaves(child)) <= set(leaves(a)) | set(leaves(b))


def test_hoist_fig2():
    assert hoist(parse_kernel(FIG2_KAPPA), 1, 2) == parse_kernel("add(M12_y, M52_c)")


def test_mutation_properties():
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        e = initialize_kernel(rng, K_F)
        h = mutate(e, "hoist", rng, K_F)
        assert length(h) <= length(e)
        p = mutate(e, "point", rng, K_F)
        assert _shape(p) == _shape(e)
        r = mutate(e, "respectful", rng, K_F)
        assert _shape(r) == _shape(e)
        assert [leaf.coord for leaf in leaves(r)] == [leaf.coord for leaf in leaves(e)]
        assert mutate(e, "copy", rng, K_F) == e


def test_subtree_mutation_uses_short_trees():
    rng = np.random.default_rng(7)
    for _ in range(500):
        e = parse_kernel("RBF_a")
        assert length(mutate(e, "subtree", rng)) in (1, 3, 5)


def test_unknown_mutation():
    with pytest.raises(ValueError):
        mutate(parse_kernel("RBF_a"), "swap", np.random.default_rng(0))


# -- the search loop --------------------------------------------------------------------

SMALL = GAConfig(population=30, generations=4, seed=11, fit_options=FitOptions(max_iterations=2))


def test_run_shape_and_single_generation():
    rec = run_ga(None, SMALL, evaluate=mock_fitness)
    assert len(rec.slots) == SMALL.population * SMALL.generations
    assert rec.n_generations == 4
    one = run_ga(None, GAConfig(population=10, generations=1), evaluate=mock_fitness)
    assert {s.operation for s in one.slots} == {"init"}


def test_lineage_and_cache():
    rec = run_ga(None, SMALL, evaluate=mock_fitness)
    by_key = {}
    for s in rec.slots:
        assert by_key.setdefault(s.key, s.bic) == s.bic
        if s.generation == 0:
            assert s.ancestors == ()
        else:
            assert s.operation in OPERATIONS
            assert len(s.ancestors) == (2 if s.operation == "crossover" else 1)
            assert all(0 <= a < SMALL.population for a in s.ancestors)
    assert len(rec.fits) == len(by_key)


def test_replay_reproduces_every_slot():
    rec = run_ga(None, SMALL, evaluate=mock_fitness)
    for s in rec.slots:
        assert format_kernel(replay_offspring(rec, s.generation, s.slot)) == s.kernel


def test_determinism_across_worker_counts():
    a = run_ga(None, SMALL, evaluate=mock_fitness, workers=1)
    b = run_ga(None, SMALL, evaluate=mock_fitness, workers=3)
    assert a.slots == b.slots
    assert {k: f.seed for k, f in a.fits.items()} == {k: f.seed for k, f in b.fits.items()}
    c = run_ga(None, GAConfig(population=30, generations=4, seed=12), evaluate=mock_fitness)
    assert c.slots != a.slots


def test_operation_frequencies():
    cfg = GAConfig(population=2500, generations=5, seed=1)
    rec = run_ga(None, cfg, evaluate=mock_fitness)
    ops = Counter(s.operation for s in rec.slots if s.generation > 0)
    n = sum(ops.values())
    assert n == 10_000
    for op, p in zip(OPERATIONS, cfg.op_probabilities):
        assert _binomial_ok(ops[op], n, p), (op, ops[op])


def test_failures_get_sentinel():
    rec = run_ga(None, SMALL, evaluate=failing_fitness)
    for s in rec.slots:
        has_min = "Min_" in s.kernel
        assert math.isinf(s.bic) == has_min


def test_quantiles():
    rec = run_ga(None, SMALL, evaluate=mock_fitness)
    rows = generation_quantiles(rec)
    assert len(rows) == 4 and list(rows[0]) == list(QUANTILE_COLUMNS)
    cm = [r["cumulative_min"] for r in rows]
    assert all(x >= y for x, y in zip(cm, cm[1:]))
    g0 = np.array([s.bic for s in rec.generation(0)])
    assert rows[0]["q90"] == pytest.approx(np.quantile(g0, 0.10))
    assert rows[0]["min"] <= rows[0]["q99"] <= rows[0]["q90"]
    one = run_ga(None, GAConfig(population=5, generations=1), evaluate=mock_fitness)
    assert len(generation_quantiles(one)) == 1


def test_record_csv_roundtrip(tmp_path):
    rec = run_ga(None, SMALL, evaluate=mock_fitness)
    path = tmp_path / "record.csv"
    rec.write_csv(path)
    assert GARecord.read_csv(path) == rec.slots
