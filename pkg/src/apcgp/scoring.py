"""Model-selection arithmetic: BIC, Bayes factors, evidence categories,
deduplicated rankings and cross-sectional summaries of kernel lists."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernels import COORDS, canonical_form, expr_stats, length

log = logging.getLogger(__name__)

PLAUSIBLE_GAP = 6.802
_GAP_TOL = 1e-9


def bic(mll: float, n_hyperparams: int, n: int) -> float:
    """``-mll + n_hyperparams * log(n) / 2`` (lower is better)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return -float(mll) + n_hyperparams * math.log(n) / 2.0


def bayes_factor(bic_1: float, bic_2: float) -> float:
    """Approximate Bayes factor of model 1 over model 2, ``exp(bic_2 - bic_1)``."""
    return math.exp(bic_2 - bic_1)


class EvidenceCategory(enum.Enum):
    DECISIVE = ("Decisive", "")
    VERY_STRONG = ("VeryStrong", ".")
    STRONG = ("Strong", "*")
    SUBSTANTIAL = ("Substantial", "**")
    BARE_MENTION = ("BareMention", "***")

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def code(self) -> str:
        return self.value[1]


def jeffreys_category(bf: float) -> tuple[EvidenceCategory, int]:
    """Evidence category of a Bayes factor and the favoured side.

    Returns ``(category, direction)`` with direction ``+1`` when ``bf > 1``
    (first model favoured), ``-1`` when ``bf < 1`` and ``0`` at exactly 1.
    """
    if not bf > 0:
        raise ValueError("Bayes factor must be positive")
    m = max(bf, 1.0 / bf)
    if m > 100:
        cat = EvidenceCategory.DECISIVE
    elif m > 30:
        cat = EvidenceCategory.VERY_STRONG
    elif m > 10:
        cat = EvidenceCategory.STRONG
    elif m > 3:
        cat = EvidenceCategory.SUBSTANTIAL
    else:
        cat = EvidenceCategory.BARE_MENTION
    direction = 0 if bf == 1 else (1 if bf > 1 else -1)
    return cat, direction


@dataclass
class RankedEntry:
    key: str
    fit: object  # FitResult
    count: int

    @property
    def bic(self) -> float:
        return self.fit.bic


@dataclass
class RankedKernels:
    """Unique kernels in ascending BIC order."""

    entries: list[RankedEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def best_bic(self) -> float:
        return self.entries[0].bic if self.entries else math.nan

    @property
    def n_plausible(self) -> int:
        if not self.entries:
            return 0
        best = self.best_bic
        return sum(1 for e in self.entries[1:] if e.bic - best <= PLAUSIBLE_GAP + _GAP_TOL)

    def bayes_factors(self) -> list[float]:
        """Bayes factor of each entry relative to the best one."""
        best = self.best_bic
        return [bayes_factor(e.bic, best) for e in self.entries]


def rank_and_dedup(results: Iterable) -> RankedKernels:
    """Group fits by canonical key, keep the lowest-BIC fit of each, sort.

    Fits with non-finite BIC are dropped.  Ties are broken by tree length and
    then by canonical key.
    """
    groups: dict[str, list] = {}
    for r in results:
        groups.setdefault(canonical_form(r.expr), []).append(r)
    entries = []
    for key, fits in groups.items():
        finite = [f for f in fits if np.isfinite(f.bic)]
        if not finite:
            continue
        best = min(finite, key=lambda f: f.bic)
        entries.append(RankedEntry(key, best, len(fits)))
    entries.sort(key=lambda e: (e.bic, length(e.fit.expr), e.key))
    return RankedKernels(entries)


SUMMARY_COLUMNS = (
    ["range", "bic_max", "bic_min", "len", "comps", "nonstationary_pct"]
    + [f"n_{c}" for c in COORDS]
    + [f"rough_{c}_pct" for c in COORDS]
)

DEFAULT_RANGES = ((1, 10), (1, 50), (51, 100))


def summary_table(
    ranked: RankedKernels | Sequence,
    ranges: Sequence[tuple[int, int]] = DEFAULT_RANGES,
) -> list[dict]:
    """Cross-sectional statistics over rank intervals (1-based, inclusive).

    ``len`` is the mean number of leaves.  Ranges past the end of the list
    are truncated (with a warning); ranges starting past the end are skipped.
    """
    entries = list(ranked.entries if isinstance(ranked, RankedKernels) else ranked)
    if not entries:
        raise ValueError("summary of an empty ranking")
    rows = []
    for lo, hi in ranges:
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid rank range {lo}-{hi}")
        if hi > len(entries):
            log.warning("rank range %d-%d truncated to %d entries", lo, hi, len(entries))
        chunk = entries[lo - 1:hi]
        if not chunk:
            continue
        stats = [expr_stats(e.fit.expr) for e in chunk]
        bics = [e.bic for e in chunk]
        row = {
            "range": f"{lo}-{min(hi, len(entries))}",
            "bic_max": max(bics),
            "bic_min": min(bics),
            "len": float(np.mean([s.n_leaves for s in stats])),
            "comps": float(np.mean([s.n_additive_components for s in stats])),
            "nonstationary_pct": 100.0 * float(np.mean([s.has_nonstationary for s in stats])),
        }
        for c in COORDS:
            row[f"n_{c}"] = float(np.mean([s.coord_counts[c] for s in stats]))
        for c in COORDS:
            row[f"rough_{c}_pct"] = 100.0 * float(np.mean([s.rough_by_coordinate[c] for s in stats]))
        rows.append(row)
    return rows


__all__ = [
    "DEFAULT_RANGES",
    "EvidenceCategory",
    "PLAUSIBLE_GAP",
    "RankedEntry",
    "RankedKernels",
    "SUMMARY_COLUMNS",
    "bayes_factor",
    "bic",
    "jeffreys_category",
    "rank_and_dedup",
    "summary_table",
]
