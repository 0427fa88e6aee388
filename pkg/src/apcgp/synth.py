"""Synthetic mortality surfaces drawn from known kernels, and the recovery
experiments run on them."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from .fitting import FitOptions, fit
from .gp import DataError, FitResult, HyperParams, MortalityDataset, ScalingInfo, sample_prior
from .kernels import (
    COORDS,
    ROUGH,
    Expr,
    Leaf,
    ScaleLayout,
    additive_components,
    canonical_form,
    family_cov,
    format_kernel,
    iter_nodes,
    leaves,
    parse_kernel,
    strip_params,
)
from .scoring import RankedKernels, bayes_factor

log = logging.getLogger(__name__)

DEFAULT_AGES = (50, 84)
DEFAULT_YEARS = (1990, 2019)
SMOOTHNESS_FAMILIES = ("M12", "M32", "M52", "RBF")


def _read_table(name: str) -> np.ndarray:
    with resources.files("apcgp").joinpath("data", name).open("r") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader if row])


def bundled_deaths() -> np.ndarray:
    """Synthetic deaths table, rows ``(age, year, deaths)`` for ages 50-84, years 1990-2019."""
    return _read_table("syc_deaths.csv")


def hmd_shaped_path() -> str:
    """Path of the bundled HMD-shaped table (ages 50-84, years 1990-2018)."""
    return str(resources.files("apcgp").joinpath("data", "hmd_shaped.csv"))


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground truth for a synthetic surface.

    ``kernel`` carries leaf parameters on the unit-interval axes, e.g.
    ``mul(RBF_a(0.4), RBF_y(0.3))``; ``scales`` follows the scale layout.
    """

    name: str
    kernel: str
    scales: tuple[float, ...]
    noise: float
    noise_mode: str
    beta0: float
    beta_age: float
    ages: tuple[int, int] = DEFAULT_AGES
    years: tuple[int, int] = DEFAULT_YEARS
    use_deaths: bool = True

    @property
    def expr(self) -> Expr:
        return parse_kernel(self.kernel)

    @property
    def structure(self) -> Expr:
        return strip_params(self.expr)

    @property
    def key(self) -> str:
        return canonical_form(self.expr)

    def params(self) -> HyperParams:
        expr = self.expr
        leaf_params = [p for leaf in leaves(expr) for p in leaf.params]
        kernel = np.array(list(self.scales) + leaf_params, dtype=float)
        return HyperParams(strip_params(expr), self.beta0, self.beta_age, self.noise, kernel)

    def fitted_text(self) -> str:
        return format_kernel(self.expr, self.scales, mode="fitted", digits=6)

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (age, year) rows, age-major."""
        A, Y = np.meshgrid(
            np.arange(self.ages[0], self.ages[1] + 1, dtype=float),
            np.arange(self.years[0], self.years[1] + 1, dtype=float),
            indexing="ij",
        )
        return A.ravel(), Y.ravel()

    def deaths(self) -> np.ndarray:
        table = bundled_deaths()
        lookup = {(int(a), int(y)): d for a, y, d in table}
        age, year = self.grid()
        try:
            return np.array([lookup[(int(a), int(y))] for a, y in zip(age, year)])
        except KeyError as exc:
            raise DataError(f"bundled deaths table does not cover cell {exc.args[0]}") from None

    def with_grid(self, ages: tuple[int, int], years: tuple[int, int]) -> "SyntheticSpec":
        return replace(self, ages=tuple(ages), years=tuple(years))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kernel": format_kernel(self.structure),
            "ground_truth": self.fitted_text(),
            "scales": list(self.scales),
            "noise": self.noise,
            "noise_mode": self.noise_mode,
            "beta0": self.beta0,
            "beta_age": self.beta_age,
            "ages": list(self.ages),
            "years": list(self.years),
        }


_BUILTIN = {
    "SYA": SyntheticSpec(
        "SYA", "mul(RBF_a(0.4), RBF_y(0.3))", (0.04,), 0.001, "homoskedastic", -5.0, 3.4,
    ),
    "SYB": SyntheticSpec(
        "SYB", "add(mul(RBF_a(0.586), M12_y(13.33)), M52_c(0.079))", (0.08, 0.02), 0.0004,
        "homoskedastic", -5.568, 2.974,
    ),
    "SYC": SyntheticSpec(
        "SYC", "mul(M52_a(1.132), mul(Min_y(0.877), mul(M12_c(96.234), Meh_c(0.8483))))", (0.0134,),
        1.0783, "by_deaths", -3.165, 3.380,
    ),
}

REDUCED_AGES = (50, 69)
REDUCED_YEARS = (1990, 2004)


def builtin_spec(name: str, reduced: bool = False) -> SyntheticSpec:
    """Reference synthetic specification ``SYA``, ``SYB`` or ``SYC``.

    ``reduced`` shrinks the grid to 20 ages x 15 years for quick runs.
    """
    key = name.upper()
    if key not in _BUILTIN:
        raise KeyError(f"unknown synthetic case {name!r}; choose from {sorted(_BUILTIN)}")
    spec = _BUILTIN[key]
    return spec.with_grid(REDUCED_AGES, REDUCED_YEARS) if reduced else spec


def generate_surface(spec: SyntheticSpec, seed: int) -> MortalityDataset:
    """One exact draw of log rates on the spec's grid.

    Deaths come from the bundled table and exposures are back-solved as
    ``deaths / exp(y)``; noise is ``sigma2 / deaths`` in ``by_deaths`` mode.
    """
    age, year = spec.grid()
    scaling = ScalingInfo.from_data(age, year)
    X = scaling.transform(age, year)
    deaths = spec.deaths() if spec.use_deaths else None
    if spec.noise_mode == "by_deaths" and deaths is None:
        raise DataError(f"{spec.name} needs a deaths table")
    params = spec.params()
    noise_deaths = deaths if spec.noise_mode == "by_deaths" else None
    y = sample_prior(spec.structure, params, X, 1, seed, deaths=noise_deaths)[0]
    exposures = None if deaths is None else deaths / np.exp(y)
    return MortalityDataset(
        age, year, y, deaths, exposures, spec.noise_mode, scaling,
        label=f"{spec.name} seed {seed}", source=None,
    )


# --------------------------------------------------------------------------
# smoothness sweep
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    families: tuple[str, ...]
    log_bf: np.ndarray  # rows: age family, columns: year family
    fits: dict[tuple[str, str], FitResult] = field(default_factory=dict)
    reference: tuple[str, str] = ("RBF", "RBF")

    def cell(self, fam_a: str, fam_y: str) -> float:
        return float(self.log_bf[self.families.index(fam_a), self.families.index(fam_y)])


def _sweep_task(args):
    fam_a, fam_y, dataset, opts = args
    return fit(f"mul({fam_a}_a, {fam_y}_y)", dataset, opts)


def smoothness_sweep(
    dataset: MortalityDataset,
    opts: FitOptions | None = None,
    families: Sequence[str] = SMOOTHNESS_FAMILIES,
    workers: int = 1,
) -> SweepResult:
    """Fit every product ``k_a * k_y`` and report ``BIC(RBF_a*RBF_y) - BIC(k)``.

    Negative entries favour the reference.  Failed fits give NaN cells.
    """
    opts = opts or FitOptions()
    families = tuple(families)
    if "RBF" not in families:
        raise ValueError("the sweep needs RBF as the reference family")
    pairs = [(fa, fy) for fa in families for fy in families]
    tasks = [(fa, fy, dataset, opts) for fa, fy in pairs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    fits = dict(zip(pairs, results))
    ref = fits[("RBF", "RBF")]
    table = np.full((len(families), len(families)), np.nan)
    for (fa, fy), r in fits.items():
        if not r.failed and not ref.failed:
            table[families.index(fa), families.index(fy)] = ref.bic - r.bic
    return SweepResult(families, table, fits)


# --------------------------------------------------------------------------
# structural recovery
# --------------------------------------------------------------------------


def additive_terms(expr: Expr) -> list[list[Leaf]]:
    """Expand products over sums; each term is the list of its leaves."""
    if isinstance(expr, Leaf):
        return [[expr]]
    left, right = additive_terms(expr.left), additive_terms(expr.right)
    if expr.kind == "add":
        return left + right
    return [a + b for a in left for b in right]


def term_amplitudes(expr: Expr, params: HyperParams, X: np.ndarray) -> list[tuple[list[Leaf], float]]:
    """Each additive term with its mean prior variance over ``X``.

    The amplitude of a term is its coefficient (product of the scales on its
    path) times the mean of the product of its leaves' variances.
    """
    layout = ScaleLayout.of(expr)
    slot_value = dict(zip(layout.slots, params.scales))
    nodes = list(iter_nodes(expr))
    index = {id(n): i for i, n in enumerate(nodes)}
    leaf_list = leaves(expr)
    off = layout.n_scales
    leaf_par = {}
    for leaf in leaf_list:
        k = leaf.info.n_params
        leaf_par[id(leaf)] = tuple(params.kernel[off:off + k])
        off += k

    def rec(node: Expr) -> list[tuple[list[Leaf], float]]:
        if isinstance(node, Leaf):
            return [([node], 1.0)]
        L, R = rec(node.left), rec(node.right)
        if node.kind == "add":
            i = index[id(node)]
            return [(t, c * slot_value[(i, "L")]) for t, c in L] + [(t, c * slot_value[(i, "R")]) for t, c in R]
        return [(a + b, ca * cb) for a, ca in L for b, cb in R]

    terms = rec(expr)
    if (0, "root") in slot_value:
        terms = [(t, c * slot_value[(0, "root")]) for t, c in terms]
    out = []
    cols = {"a": 0, "y": 1, "c": 2}
    for t, c in terms:
        var = np.ones(X.shape[0])
        for leaf in t:
            x = X[:, cols[leaf.coord]]
            var = var * family_cov(leaf.family, leaf_par[id(leaf)], x, x)
        out.append((t, float(c * np.mean(var))))
    return out


def structural_class(expr: Expr) -> tuple:
    """(sorted coordinate multiset, additive components, roughness per coordinate)."""
    lv = leaves(expr)
    coords = tuple(sorted(leaf.coord for leaf in lv))
    rough = tuple(
        (c, "rough" if any(leaf.family in ROUGH for leaf in lv if leaf.coord == c) else "smooth")
        for c in COORDS
        if any(leaf.coord == c for leaf in lv)
    )
    return coords, additive_components(expr), rough


def describe_class(cls: tuple) -> str:
    coords, comps, rough = cls
    body = " x ".join(f"{r}_{c}" for c, r in rough)
    return f"{body}; leaves={len(coords)}; comps={comps}"


def is_age_year_plus_cohort(expr: Expr) -> bool:
    """True for two additive terms: an age-year product and a lone cohort leaf."""
    terms = additive_terms(expr)
    if len(terms) != 2:
        return False
    kinds = sorted(tuple(sorted({leaf.coord for leaf in t})) for t in terms)
    lone = [t for t in terms if len(t) == 1 and t[0].coord == "c"]
    return kinds == [("a", "y"), ("c",)] and len(lone) == 1


def cohort_amplitude_ratio(fit_result: FitResult) -> float:
    """Amplitude of the age-year term over that of the cohort term."""
    if not is_age_year_plus_cohort(fit_result.expr):
        raise ValueError("kernel is not an age-year product plus a cohort leaf")
    amps = term_amplitudes(fit_result.expr, fit_result.params, fit_result.dataset.X)
    ay = next(a for t, a in amps if {leaf.coord for leaf in t} == {"a", "y"})
    c = next(a for t, a in amps if {leaf.coord for leaf in t} == {"c"})
    return ay / c


@dataclass
class RecoveryRow:
    rank: int
    kernel: str
    canonical: str
    bic: float
    bayes_factor: float
    structural_class: str
    class_match: bool
    exact_match: bool


@dataclass
class RecoveryReport:
    case: str
    ground_truth: str
    truth_class: str
    truth_rank: int | None
    truth_bf: float | None
    rows: list[RecoveryRow]

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "ground_truth": self.ground_truth,
            "truth_class": self.truth_class,
            "truth_rank": self.truth_rank,
            "truth_bayes_factor": self.truth_bf,
            "top": [r.__dict__ for r in self.rows],
        }


def recovery_report(spec: SyntheticSpec, ranked: RankedKernels, top: int = 5) -> RecoveryReport:
    """Compare the top of a ranking with the spec's ground-truth kernel."""
    truth_key = spec.key
    truth_cls = structural_class(spec.expr)
    best = ranked.best_bic
    truth_rank = truth_bf = None
    for i, e in enumerate(ranked.entries, start=1):
        if e.key == truth_key:
            truth_rank = i
            truth_bf = bayes_factor(e.bic, best)
            break
    rows = []
    for i, e in enumerate(ranked.entries[:top], start=1):
        cls = structural_class(e.fit.expr)
        rows.append(RecoveryRow(
            rank=i,
            kernel=format_kernel(e.fit.expr),
            canonical=e.key,
            bic=e.bic,
            bayes_factor=bayes_factor(e.bic, best),
            structural_class=describe_class(cls),
            class_match=cls == truth_cls,
            exact_match=e.key == truth_key,
        ))
    return RecoveryReport(spec.name, spec.fitted_text(), describe_class(truth_cls), truth_rank, truth_bf, rows)


def make_synthetic_deaths(ages=(50, 84), years=(1990, 2019)) -> np.ndarray:
    """Deterministic deaths profile rising to a peak near age 80, mild growth over time."""
    rows = []
    for a in range(ages[0], ages[1] + 1):
        for t in range(years[0], years[1] + 1):
            d = 25000.0 * math.exp(-(((a - 80.0) / 18.0) ** 2)) * (1.0 + 0.01 * (t - years[0]))
            rows.append((a, t, float(round(d))))
    return np.array(rows)


def make_hmd_shaped(seed: int = 2024, ages=(50, 84), years=(1990, 2018)) -> np.ndarray:
    """Deterministic HMD-like table ``(age, year, deaths, exposures)``.

    Gompertz age pattern with a steady period decline, a small cohort wave
    and Poisson deaths on a plausible exposure profile.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for a in range(ages[0], ages[1] + 1):
        for t in range(years[0], years[1] + 1):
            c = t - a
            log_m = -9.6 + 0.085 * a - 0.018 * (t - years[0]) + 0.05 * math.sin(c / 6.0)
            expo = 800000.0 * math.exp(-(((a - 55.0) / 30.0) ** 2)) * (1.0 + 0.004 * (t - years[0]))
            d = rng.poisson(expo * math.exp(log_m))
            rows.append((a, t, float(max(d, 1)), round(expo, 2)))
    return np.array(rows)


__all__ = [
    "REDUCED_AGES",
    "REDUCED_YEARS",
    "RecoveryReport",
    "SweepResult",
    "SyntheticSpec",
    "additive_terms",
    "builtin_spec",
    "bundled_deaths",
    "cohort_amplitude_ratio",
    "generate_surface",
    "hmd_shaped_path",
    "is_age_year_plus_cohort",
    "recovery_report",
    "smoothness_sweep",
    "structural_class",
    "term_amplitudes",
]

