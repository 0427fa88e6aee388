"""Genetic search over kernel expressions.

Each generation is produced slot by slot: an ancestor is picked by double
tournament, one of six operations is drawn and applied, and the offspring is
scored by BIC.  Every slot draws its randomness from its own stream,
``SeedSequence(seed, spawn_key=(generation, slot))``, so a run depends only
on the master seed and any single offspring can be replayed from the record.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .fitting import FitOptions, derive_seed, fit
from .gp import FitResult, MortalityDataset
from .kernels import (
    COORDS,
    FAMILIES,
    Expr,
    Leaf,
    Op,
    canonical_form,
    format_kernel,
    length,
    parse_kernel,
    replace_subtree,
    subtree,
)

log = logging.getLogger(__name__)

OPERATIONS = ("crossover", "subtree", "hoist", "point", "respectful", "copy")

K_R: tuple[tuple[str, str], ...] = tuple(
    (f, c) for f in ("M12", "M52", "RBF", "Min") for c in COORDS
) + (("Lin", "y"),)
K_F: tuple[tuple[str, str], ...] = tuple(
    (f, c) for f in FAMILIES for c in COORDS if f != "Lin" or c == "y"
)
SEARCH_SETS = {"r": K_R, "f": K_F}


@dataclass(frozen=True)
class GAConfig:
    """Search settings; defaults follow the reference configuration."""

    population: int = 200
    generations: int = 20
    tournament_size: int = 7
    parsimony: float = 1.2
    p_crossover: float = 0.45
    p_subtree: float = 0.2
    p_hoist: float = 0.1
    p_point: float = 0.05
    p_respectful: float = 0.15
    p_copy: float = 0.05
    q_point: float = 0.25
    q_respectful: float = 0.35
    q_add: float = 0.5
    init_lengths: tuple[int, ...] = (3, 5, 7, 9)
    subtree_lengths: tuple[int, ...] = (1, 3, 5)
    search_set: str = "r"
    seed: int = 0
    fit_options: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        probs = self.op_probabilities
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError("operation probabilities must lie in [0, 1]")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("operation probabilities must sum to 1")
        for name in ("q_point", "q_respectful", "q_add"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.parsimony <= 2:
            raise ValueError("parsimony D must lie in [0, 2]")
        if self.population < 1 or self.generations < 1 or self.tournament_size < 1:
            raise ValueError("population, generations and tournament size must be positive")
        if self.search_set not in SEARCH_SETS:
            raise ValueError(f"search set must be one of {sorted(SEARCH_SETS)}")
        for ls in (self.init_lengths, self.subtree_lengths):
            if not ls or any(n < 1 or n % 2 == 0 for n in ls):
                raise ValueError("tree lengths must be odd and positive")

    @property
    def op_probabilities(self) -> tuple[float, ...]:
        return (self.p_crossover, self.p_subtree, self.p_hoist, self.p_point, self.p_respectful, self.p_copy)

    @property
    def leaves(self) -> tuple[tuple[str, str], ...]:
        return SEARCH_SETS[self.search_set]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init_lengths"] = list(self.init_lengths)
        d["subtree_lengths"] = list(self.subtree_lengths)
        return d

    @classmethod
    def from_mapping(cls, values: dict) -> "GAConfig":
        """Build from a flat ``name -> text`` mapping (config file or CLI).

        ``FitOptions`` fields (``learning_rate``, ``tolerance``,
        ``max_iterations``, ``convergence_window``) are accepted at top level.
        """
        own = {f.name: f for f in fields(cls)}
        fit_names = {f.name for f in fields(FitOptions)} - {"seed"}
        kwargs, fit_kwargs = {}, {}
        for key, raw in values.items():
            if key in fit_names:
                fit_kwargs[key] = _coerce(raw, getattr(FitOptions(), key))
            elif key in own and key != "fit_options":
                kwargs[key] = _coerce(raw, getattr(cls(), key))
            else:
                raise ValueError(f"unknown GA configuration key {key!r}")
        cfg = cls(**kwargs)
        return replace(cfg, fit_options=replace(cfg.fit_options, **fit_kwargs))


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw.strip()


# --------------------------------------------------------------------------
# tree construction and variation operators
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _catalan(n: int) -> int:
    return math.comb(2 * n, n) // (n + 1)


def _random_leaf(rng: np.random.Generator, search_set: Sequence[tuple[str, str]]) -> Leaf:
    fam, coord = search_set[int(rng.integers(len(search_set)))]
    return Leaf(fam, coord)


def _random_tree(rng, n_leaves: int, search_set, q_add: float) -> Expr:
    # uniform over binary shapes with n_leaves leaves
    if n_leaves == 1:
        return _random_leaf(rng, search_set)
    weights = np.array(
        [_catalan(k - 1) * _catalan(n_leaves - k - 1) for k in range(1, n_leaves)], dtype=float
    )
    k = int(rng.choice(np.arange(1, n_leaves), p=weights / weights.sum()))
    kind = "add" if rng.random() < q_add else "mul"
    left = _random_tree(rng, k, search_set, q_add)
    right = _random_tree(rng, n_leaves - k, search_set, q_add)
    return Op(kind, left, right)


def initialize_kernel(
    rng: np.random.Generator,
    search_set: Sequence[tuple[str, str]] = K_R,
    length_options: Sequence[int] = (3, 5, 7, 9),
    q_a: float = 0.5,
) -> Expr:
    """Random expression with a node count drawn uniformly from ``length_options``."""
    L = int(length_options[int(rng.integers(len(length_options)))])
    return _random_tree(rng, (L + 1) // 2, search_set, q_a)


def _tournament(bics: np.ndarray, rng, T: int) -> int:
    picks = rng.integers(len(bics), size=T)
    return int(picks[np.argmin(bics[picks])])


def parsimony_choice(
    a: int,
    b: int,
    bics: Sequence[float],
    lengths: Sequence[int],
    rng: np.random.Generator,
    D: float = 1.2,
) -> int:
    """Pick between two tournament winners: the shorter with probability ``D / 2``.

    Equal lengths are settled by BIC (``a`` on ties).
    """
    u = rng.random()
    la, lb = lengths[a], lengths[b]
    if la == lb:
        return a if bics[a] <= bics[b] else b
    short, long_ = (a, b) if la < lb else (b, a)
    return short if u < D / 2.0 else long_


def double_tournament(
    bics: Sequence[float],
    lengths: Sequence[int],
    rng: np.random.Generator,
    T: int = 7,
    D: float = 1.2,
) -> int:
    """Index of the selected ancestor.

    Two size-``T`` tournaments (sampling with replacement, lowest BIC wins)
    produce two candidates, which :func:`parsimony_choice` settles.
    """
    bics = np.asarray(bics, dtype=float)
    a = _tournament(bics, rng, T)
    b = _tournament(bics, rng, T)
    return parsimony_choice(a, b, bics, lengths, rng, D)


def crossover(kappa: Expr, xi: Expr, rng: np.random.Generator) -> tuple[Expr, tuple[int, int]]:
    """Replace a uniform node of ``kappa`` by a uniform subtree of ``xi``.

    Returns the offspring and the chosen (kappa node, xi node) indices.
    """
    i = int(rng.integers(length(kappa)))
    j = int(rng.integers(length(xi)))
    return replace_subtree(kappa, i, subtree(xi, j)), (i, j)


def hoist(expr: Expr, u: int, v: int) -> Expr:
    """Replace subtree ``u`` by its own descendant ``v`` (index within subtree ``u``)."""
    return replace_subtree(expr, u, subtree(subtree(expr, u), v))


def _flip_nodes(expr: Expr, rng, q: float, new_leaf: Callable[[Leaf], Leaf]) -> Expr:
    # preorder; each node flips independently with probability q
    if isinstance(expr, Leaf):
        return new_leaf(expr) if rng.random() < q else expr
    kind = expr.kind
    if rng.random() < q:
        kind = "mul" if kind == "add" else "add"
    left = _flip_nodes(expr.left, rng, q, new_leaf)
    right = _flip_nodes(expr.right, rng, q, new_leaf)
    return Op(kind, left, right)


def mutate(
    expr: Expr,
    kind: str,
    rng: np.random.Generator,
    search_set: Sequence[tuple[str, str]] = K_R,
    config: GAConfig | None = None,
) -> Expr:
    """Apply one mutation: ``subtree``, ``hoist``, ``point``, ``respectful`` or ``copy``."""
    cfg = config or GAConfig()
    if kind == "copy":
        return parse_kernel(format_kernel(expr))
    if kind == "subtree":
        i = int(rng.integers(length(expr)))
        fresh = initialize_kernel(rng, search_set, cfg.subtree_lengths, cfg.q_add)
        return replace_subtree(expr, i, fresh)
    if kind == "hoist":
        u = int(rng.integers(length(expr)))
        v = int(rng.integers(length(subtree(expr, u))))
        return hoist(expr, u, v)
    if kind == "point":
        return _flip_nodes(expr, rng, cfg.q_point, lambda leaf: _random_leaf(rng, search_set))
    if kind in ("respectful", "respectful_point"):
        by_coord = {c: [p for p in search_set if p[1] == c] for c in COORDS}

        def same_coord(leaf: Leaf) -> Leaf:
            options = by_coord[leaf.coord] or [(leaf.family, leaf.coord)]
            return _random_leaf(rng, options)

        return _flip_nodes(expr, rng, cfg.q_respectful, same_coord)
    raise ValueError(f"unknown mutation kind {kind!r}")


# --------------------------------------------------------------------------
# the search loop
# --------------------------------------------------------------------------


@dataclass
class SlotRecord:
    generation: int
    slot: int
    key: str
    kernel: str
    bic: float
    operation: str
    ancestors: tuple[int, ...]
    cached: bool = False


RECORD_COLUMNS = ("generation", "slot", "canonical", "kernel", "bic", "operation", "ancestors", "cached")


@dataclass
class GARecord:
    config: GAConfig
    slots: list[SlotRecord] = field(default_factory=list)
    fits: dict[str, FitResult] = field(default_factory=dict)

    @property
    def n_generations(self) -> int:
        return 1 + max((s.generation for s in self.slots), default=-1)

    def generation(self, g: int) -> list[SlotRecord]:
        return [s for s in self.slots if s.generation == g]

    def results(self) -> list[FitResult]:
        """One fit per distinct kernel seen during the run."""
        return list(self.fits.values())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for s in self.slots:
                w.writerow([
                    s.generation, s.slot, s.key, s.kernel, repr(float(s.bic)), s.operation,
                    " ".join(str(a) for a in s.ancestors), int(s.cached),
                ])

    @staticmethod
    def read_csv(path) -> list[SlotRecord]:
        out = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(SlotRecord(
                    int(row["generation"]), int(row["slot"]), row["canonical"], row["kernel"],
                    float(row["bic"]), row["operation"],
                    tuple(int(a) for a in row["ancestors"].split()), bool(int(row["cached"])),
                ))
        return out

    def write_top_json(self, path, fits: Sequence[FitResult]) -> None:
        with open(path, "w") as fh:
            json.dump([f.to_record() for f in fits], fh, indent=2, sort_keys=True)
            fh.write("\n")


Evaluator = Callable[[Expr, MortalityDataset, FitOptions], FitResult]


def default_evaluate(expr: Expr, dataset: MortalityDataset, opts: FitOptions) -> FitResult:
    return fit(expr, dataset, opts)


def _evaluate_task(args):
    evaluate, expr, dataset, opts = args
    return evaluate(expr, dataset, opts)


def _slot_rng(seed: int, g: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(g, i)))


def _draw_offspring(
    g: int,
    i: int,
    parents: list[Expr],
    bics: np.ndarray,
    lengths: list[int],
    config: GAConfig,
) -> tuple[Expr, str, tuple[int, ...]]:
    rng = _slot_rng(config.seed, g, i)
    if g == 0:
        return initialize_kernel(rng, config.leaves, config.init_lengths, config.q_add), "init", ()
    a = double_tournament(bics, lengths, rng, config.tournament_size, config.parsimony)
    op = OPERATIONS[int(rng.choice(len(OPERATIONS), p=np.asarray(config.op_probabilities)))]
    if op == "crossover":
        b = double_tournament(bics, lengths, rng, config.tournament_size, config.parsimony)
        child, _ = crossover(parents[a], parents[b], rng)
        return child, op, (a, b)
    return mutate(parents[a], op, rng, config.leaves, config), op, (a,)


def replay_offspring(record: GARecord, g: int, i: int) -> Expr:
    """Recreate slot ``i`` of generation ``g`` from the previous generation."""
    if g == 0:
        return _draw_offspring(0, i, [], np.empty(0), [], record.config)[0]
    prev = sorted(record.generation(g - 1), key=lambda s: s.slot)
    parents = [parse_kernel(s.kernel) for s in prev]
    bics = np.array([s.bic for s in prev])
    lengths = [length(p) for p in parents]
    return _draw_offspring(g, i, parents, bics, lengths, record.config)[0]


def run_ga(
    dataset: MortalityDataset | None,
    config: GAConfig,
    evaluate: Evaluator | None = None,
    workers: int = 1,
    progress: Callable[[int, list[SlotRecord]], None] | None = None,
) -> GARecord:
    """Evolve kernel expressions and return the full record.

    ``evaluate(expr, dataset, opts)`` must return a :class:`FitResult`; it
    defaults to :func:`apcgp.fitting.fit`.  Each distinct canonical kernel is
    evaluated once per run, with a seed derived from the master seed and the
    key.  With ``workers > 1`` evaluations run in worker processes, which
    requires ``evaluate`` to be picklable; results do not depend on the
    worker count.
    """
    evaluate = evaluate or default_evaluate
    record = GARecord(config)
    bic_cache: dict[str, float] = {}
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        parents: list[Expr] = []
        bics = np.empty(0)
        lengths: list[int] = []
        for g in range(config.generations):
            drawn = [_draw_offspring(g, i, parents, bics, lengths, config) for i in range(config.population)]
            todo: dict[str, Expr] = {}
            for child, _, _ in drawn:
                key = canonical_form(child)
                if key not in bic_cache and key not in todo:
                    todo[key] = child
            tasks = [
                (evaluate, expr, dataset, replace(config.fit_options, seed=derive_seed(config.seed, key)))
                for key, expr in todo.items()
            ]
            if executor is not None and len(tasks) > 1:
                outcomes = list(executor.map(_evaluate_task, tasks))
            else:
                outcomes = [_evaluate_task(t) for t in tasks]
            for key, res in zip(todo, outcomes):
                value = res.bic if res is not None and not res.failed and np.isfinite(res.bic) else math.inf
                bic_cache[key] = value
                if res is not None:
                    record.fits[key] = res
            new_slots = []
            seen_now: set[str] = set()
            for i, (child, op, anc) in enumerate(drawn):
                key = canonical_form(child)
                cached = key not in todo or key in seen_now
                seen_now.add(key)
                new_slots.append(SlotRecord(g, i, key, format_kernel(child), bic_cache[key], op, anc, cached))
            record.slots.extend(new_slots)
            parents = [child for child, _, _ in drawn]
            bics = np.array([s.bic for s in new_slots])
            lengths = [length(p) for p in parents]
            if progress is not None:
                progress(g, new_slots)
            log.info("generation %d: best BIC %.3f, %d new fits", g, float(np.min(bics)), len(todo))
    finally:
        if executor is not None:
            executor.shutdown()
    return record


QUANTILE_LEVELS = (0.99, 0.975, 0.95, 0.90)
QUANTILE_COLUMNS = ("generation", "min", "q99", "q975", "q95", "q90", "cumulative_min")


def generation_quantiles(record: GARecord) -> list[dict]:
    """Per-generation BIC summaries.

    ``qXX`` is the BIC exceeded by XX% of the generation, i.e. the boundary
    of its fittest (100 - XX)% of slots.  Failed fits are ignored.
    """
    rows = []
    running = math.inf
    for g in range(record.n_generations):
        b = np.array([s.bic for s in record.generation(g)])
        b = b[np.isfinite(b)]
        if b.size == 0:
            row = {"generation": g, "min": math.inf, **{c: math.inf for c in QUANTILE_COLUMNS[2:6]}}
        else:
            row = {"generation": g, "min": float(b.min())}
            for col, q in zip(QUANTILE_COLUMNS[2:6], QUANTILE_LEVELS):
                row[col] = float(np.quantile(b, 1.0 - q))
        running = min(running, row["min"])
        row["cumulative_min"] = running
        rows.append(row)
    return rows


__all__ = [
    "GAConfig",
    "GARecord",
    "K_F",
    "K_R",
    "OPERATIONS",
    "QUANTILE_COLUMNS",
    "RECORD_COLUMNS",
    "SEARCH_SETS",
    "SlotRecord",
    "crossover",
    "double_tournament",
    "generation_quantiles",
    "hoist",
    "initialize_kernel",
    "mutate",
    "parsimony_choice",
    "replay_offspring",
    "run_ga",
]
