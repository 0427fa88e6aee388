"""Reading and writing mortality tables in the ``age,year,deaths,exposures`` schema."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .gp import DataError, MortalityDataset

log = logging.getLogger(__name__)

COLUMNS = ("age", "year", "deaths", "exposures")


@dataclass(frozen=True)
class DatasetSpec:
    """A CSV source with the ranges and noise mode to load it with."""

    path: str
    age_range: tuple[int, int] | None = None
    year_range: tuple[int, int] | None = None
    noise_mode: str = "homoskedastic"

    def load(self) -> MortalityDataset:
        return load_csv(self.path, self.age_range, self.year_range, self.noise_mode)


def _read_rows(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}; header must be {','.join(COLUMNS)}")
        idx = [header.index(c) for c in COLUMNS]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                rows.append([float(rec[j]) for j in idx])
            except (ValueError, IndexError):
                raise DataError(f"{path}, line {lineno}: malformed row {rec!r}") from None
    return np.array(rows, dtype=float).reshape(-1, 4)


def _cells(rows: np.ndarray, limit: int = 10) -> str:
    return ", ".join(f"({a:g}, {y:g})" for a, y in rows[:limit, :2])


def load_csv(
    path,
    age_range: tuple[int, int] | None = None,
    year_range: tuple[int, int] | None = None,
    noise_mode: str = "homoskedastic",
    label: str = "",
) -> MortalityDataset:
    """Load a mortality table and derive log rates.

    Parameters
    ----------
    path : path-like
        CSV with header ``age,year,deaths,exposures``.
    age_range, year_range : (int, int), optional
        Inclusive filters applied before validation.
    noise_mode : {"homoskedastic", "by_deaths"}

    Raises
    ------
    DataError
        Missing columns, duplicate cells, nonpositive exposures, zero deaths
        (only matters for ``by_deaths``) or an empty selection.
    """
    rows = _read_rows(path)
    if age_range is not None:
        lo, hi = age_range
        if hi < lo:
            raise DataError("empty age range")
        rows = rows[(rows[:, 0] >= lo) & (rows[:, 0] <= hi)]
    if year_range is not None:
        lo, hi = year_range
        if hi < lo:
            raise DataError("empty year range")
        rows = rows[(rows[:, 1] >= lo) & (rows[:, 1] <= hi)]
    if rows.shape[0] == 0:
        raise DataError(f"{path}: no rows left after filtering")
    keys = rows[:, 0] * 100000.0 + rows[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    if np.any(counts > 1):
        dup = rows[np.isin(keys, uniq[counts > 1])]
        raise DataError(f"{path}: duplicate cells {_cells(dup)}")
    bad = rows[~(rows[:, 3] > 0)]
    if len(bad):
        raise DataError(f"{path}: exposures must be positive; offending cells {_cells(bad)}")
    neg = rows[rows[:, 2] < 0]
    if len(neg):
        raise DataError(f"{path}: negative deaths at cells {_cells(neg)}")
    zero = rows[rows[:, 2] == 0]
    if len(zero):
        if noise_mode == "by_deaths":
            raise DataError(f"{path}: by_deaths noise needs deaths > 0; zero deaths at cells {_cells(zero)}")
        raise DataError(f"{path}: zero deaths give an infinite log rate at cells {_cells(zero)}")
    order = np.lexsort((rows[:, 1], rows[:, 0]))
    rows = rows[order]
    n_age = len(np.unique(rows[:, 0]))
    n_year = len(np.unique(rows[:, 1]))
    if n_age * n_year != rows.shape[0]:
        log.warning("%s: incomplete grid (%d of %d age x year cells present)", path, rows.shape[0], n_age * n_year)
    y = np.log(rows[:, 2] / rows[:, 3])
    ds = MortalityDataset(
        age=rows[:, 0], year=rows[:, 1], y=y, deaths=rows[:, 2], exposures=rows[:, 3],
        noise_mode=noise_mode, label=label, source=str(path),
    )
    if not np.array_equal(ds.cohort, ds.year - ds.age):
        raise DataError("cohort coordinate mismatch")
    return ds


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def export_csv(dataset: MortalityDataset, path, manifest: dict | None = None, sidecar: bool = True) -> str:
    """Write ``dataset`` in the CSV schema plus a ``<path>.manifest.json`` sidecar.

    Values are written with full ``repr`` precision.  Returns the SHA-256 of
    the written CSV.
    """
    if dataset.deaths is None or dataset.exposures is None:
        raise DataError("export requires deaths and exposures")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for a, yr, d, e in zip(dataset.age, dataset.year, dataset.deaths, dataset.exposures):
            w.writerow([_fmt(a), _fmt(yr), _fmt(d), _fmt(e)])
    digest = file_sha256(path)
    if not sidecar:
        return digest
    side = {
        "file": os.path.basename(str(path)),
        "rows": int(dataset.n),
        "age_range": [_num(dataset.age.min()), _num(dataset.age.max())],
        "year_range": [_num(dataset.year.min()), _num(dataset.year.max())],
        "noise_mode": dataset.noise_mode,
        "label": dataset.label,
        "sha256": digest,
    }
    if manifest:
        side.update(manifest)
    with open(f"{path}.manifest.json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def _num(x):
    x = float(x)
    return int(x) if x.is_integer() else x


def robustness_expand(spec: DatasetSpec, ages: int = 2, years: int = 2) -> DatasetSpec:
    """Companion spec with the age range widened by ``ages`` on both sides and
    the first year moved ``years`` earlier, checked against the file."""
    if spec.age_range is None or spec.year_range is None:
        raise DataError("robustness expansion needs explicit age and year ranges")
    if ages < 0 or years < 0:
        raise ValueError("expansion must be nonnegative")
    a0, a1 = spec.age_range
    y0, y1 = spec.year_range
    new = DatasetSpec(spec.path, (a0 - ages, a1 + ages), (y0 - years, y1), spec.noise_mode)
    rows = _read_rows(spec.path)
    have_ages = set(rows[:, 0].astype(int))
    have_years = set(rows[:, 1].astype(int))
    gaps = [f"age {a}" for a in range(new.age_range[0], new.age_range[1] + 1) if a not in have_ages]
    gaps += [f"year {y}" for y in range(new.year_range[0], new.year_range[1] + 1) if y not in have_years]
    if gaps:
        raise DataError(f"{spec.path}: expanded ranges exceed file coverage (missing {', '.join(gaps)})")
    return new


__all__ = ["COLUMNS", "DatasetSpec", "export_csv", "file_sha256", "load_csv", "robustness_expand"]

