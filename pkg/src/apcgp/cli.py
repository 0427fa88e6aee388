"""Command-line interface.

Subcommands
-----------
synth       draw a synthetic surface (SYA, SYB, SYC) and write it as CSV
fit         fit one kernel expression to a mortality CSV
ga          genetic kernel search with tight refits of the best kernels
predict     posterior mean, 90% band and sample paths on an age x year grid
grids       standardised residuals and a prior-correlation slice
experiment  smoothness sweep, recovery run or convergence profile

Every command writes into ``--out`` and leaves one ``manifest.json`` there.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

Output files
------------
fit.json          FitResult record plus back-transformed parameters
record.csv        generation,slot,canonical,kernel,bic,operation,ancestors,cached
ranked.csv        rank,canonical,kernel,fitted,bic,mll,n_hyperparams,count,bayes_factor,evidence
summary.csv       range,bic_max,bic_min,len,comps,nonstationary_pct,n_a,n_y,n_c,rough_a_pct,...
quantiles.csv     generation,min,q99,q975,q95,q90,cumulative_min
top_fits.json     list of fit records for the best refitted kernels
predictions.csv   age,year,cohort,mean,sd,lower,upper[,path_1..path_N]
residuals.csv     age,year,residual (NaN where a cell is missing)
correlation.csv   age,year,correlation
smoothness.csv    age_family,M12,M32,M52,RBF (log Bayes factors vs RBF_a*RBF_y)
recovery.json     recovery verdict for the top five kernels
convergence.csv   tolerance,steps,bic,mll
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import sys
from dataclasses import replace
from importlib import metadata

import numpy as np

from .fitting import TIGHT, FitOptions, convergence_profile, fit, refit_top, report_params, scale_inputs
from .ga import GAConfig, generation_quantiles, run_ga, QUANTILE_COLUMNS
from .gp import (
    DataError,
    FactorizationError,
    FitResult,
    MortalityDataset,
    ScalingInfo,
    posterior,
    prior_correlation_slice,
    residual_grid,
    sample_posterior,
)
from .kernels import KernelError, format_kernel, parse_kernel
from .mortality_io import export_csv, file_sha256, load_csv
from .scoring import SUMMARY_COLUMNS, EvidenceCategory, jeffreys_category, rank_and_dedup, summary_table
from .synth import (
    builtin_spec,
    generate_surface,
    recovery_report,
    smoothness_sweep,
)

log = logging.getLogger("apcgp")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
Z90 = 1.6448536269514722


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 50..84, got {text!r}") from None
    if hi < lo:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.config = {k: v for k, v in vars(args).items() if k not in ("func",)}
        self.outputs: list[str] = []
        self.extra: dict = {}

    def path(self, name: str) -> str:
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def finish(self, seed=None, data_file=None) -> None:
        manifest = {
            "command": self.command,
            "config": self.config,
            "master_seed": seed,
            "tool_version": _version(),
            "dataset_sha256": file_sha256(data_file) if data_file and os.path.exists(data_file) else None,
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "outputs": sorted(self.outputs),
            **self.extra,
        }
        _write_json(os.path.join(self.out, "manifest.json"), manifest)


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}, line {lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


def _fit_options(args, base: FitOptions | None = None) -> FitOptions:
    opts = base or FitOptions()
    updates = {}
    for flag, name in (("lr", "learning_rate"), ("tol", "tolerance"), ("max_iter", "max_iterations"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            updates[name] = v
    return replace(opts, **updates)


def _load(args) -> MortalityDataset:
    mode = "by_deaths" if getattr(args, "hetero", False) else "homoskedastic"
    ds = load_csv(args.data, args.ages, args.years, mode)
    return scale_inputs(ds)[0]


def _parse_expr(text: str):
    try:
        return parse_kernel(text)
    except KernelError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = builtin_spec(args.case, reduced=args.reduced)
    run = Run("synth", args)
    ds = generate_surface(spec, args.seed)
    data_path = run.path("surface.csv")
    digest = export_csv(ds, data_path, sidecar=False)
    with open(run.path("ground_truth.txt"), "w") as fh:
        fh.write(spec.fitted_text() + "\n")
    run.extra.update({
        "spec": spec.to_dict(),
        "surface": {"rows": ds.n, "sha256": digest, "noise_mode": ds.noise_mode},
    })
    run.finish(seed=args.seed)
    print(f"wrote {ds.n} rows to {data_path}")
    return 0


def _fit_record(result: FitResult) -> dict:
    rec = result.to_record()
    rec["reported"] = report_params(result)
    return rec


def cmd_fit(args) -> int:
    expr = _parse_expr(args.kernel)
    ds = _load(args)
    run = Run("fit", args)
    result = fit(expr, ds, _fit_options(args))
    if result.failed:
        raise NumericalError(f"fit failed: {result.message}")
    _write_json(run.path("fit.json"), _fit_record(result))
    run.finish(seed=result.seed, data_file=args.data)
    print(f"{format_kernel(result.expr)}  mll={result.mll:.4f}  bic={result.bic:.4f}")
    return 0


def _ranked_rows(fits):
    best = fits[0].bic
    for i, f in enumerate(fits, start=1):
        bf = math.exp(best - f.bic)
        # exp underflows beyond a gap of ~745, which is decisive either way
        code = jeffreys_category(bf)[0].code if bf > 0 else EvidenceCategory.DECISIVE.code
        yield i, f, bf, code


RANKED_COLUMNS = ("rank", "canonical", "kernel", "fitted", "bic", "mll", "n_hyperparams", "count", "bayes_factor", "evidence")


def cmd_ga(args) -> int:
    values = _read_config(args.config)
    for flag, key in (("pop", "population"), ("gens", "generations"), ("seed", "seed"), ("set", "search_set"),
                      ("lr", "learning_rate"), ("tol", "tolerance"), ("max_iter", "max_iterations")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    try:
        config = GAConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    ds = _load(args)
    run = Run("ga", args)
    run.config["ga_config"] = config.to_dict()
    record = run_ga(ds, config, workers=args.workers)
    record.write_csv(run.path("record.csv"))
    counts = {}
    for s in record.slots:
        counts[s.key] = counts.get(s.key, 0) + 1
    tight = replace(TIGHT, learning_rate=config.fit_options.learning_rate)
    if args.refit_max_iter is not None:
        tight = replace(tight, max_iterations=args.refit_max_iter)
    fits = refit_top(record.results(), args.refit_top, tight, master_seed=config.seed)
    if not fits:
        raise NumericalError("every kernel fit failed")
    ranked = rank_and_dedup(fits)
    rows = []
    for i, f, bf, code in _ranked_rows([e.fit for e in ranked]):
        rows.append([i, ranked[i - 1].key, format_kernel(f.expr), f.fitted(), f.bic, f.mll, f.n_hyperparams,
                     counts.get(ranked[i - 1].key, 0), bf, code])
    _write_csv(run.path("ranked.csv"), RANKED_COLUMNS, rows)
    summary = summary_table(ranked)
    _write_csv(run.path("summary.csv"), SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in summary])
    q = generation_quantiles(record)
    _write_csv(run.path("quantiles.csv"), QUANTILE_COLUMNS, [[r[c] for c in QUANTILE_COLUMNS] for r in q])
    top = [e.fit for e in ranked.entries[: args.top_k]]
    _write_json(run.path("top_fits.json"), [_fit_record(f) for f in top])
    run.extra["n_plausible"] = ranked.n_plausible
    run.extra["slots"] = len(record.slots)
    run.finish(seed=config.seed, data_file=args.data)
    print(f"best: {format_kernel(top[0].expr)}  bic={top[0].bic:.4f}  ({len(ranked)} distinct kernels)")
    return 0


def _load_fit(path: str, rank: int = 1) -> FitResult:
    if not os.path.exists(path):
        raise DataError(f"fit record not found: {path}")
    with open(path) as fh:
        rec = json.load(fh)
    if isinstance(rec, list):
        if not 1 <= rank <= len(rec):
            raise UsageError(f"rank {rank} outside 1..{len(rec)}")
        rec = rec[rank - 1]
    data = rec.get("data") or {}
    if not data.get("source"):
        raise DataError("fit record does not name its data file")
    ds = load_csv(data["source"], tuple(data["age_range"]), tuple(data["year_range"]), data["noise_mode"])
    ds = ds.with_scaling(ScalingInfo.from_dict(data["scaling"]))
    result = FitResult.from_record(rec, ds)
    if result.params is None:
        raise NumericalError("fit record has no parameters")
    return result


def cmd_predict(args) -> int:
    result = _load_fit(args.fit, args.rank)
    run = Run("predict", args)
    A, Y = np.meshgrid(np.arange(args.ages[0], args.ages[1] + 1), np.arange(args.years[0], args.years[1] + 1), indexing="ij")
    age, year = A.ravel().astype(float), Y.ravel().astype(float)
    Xs = result.scaling.transform(age, year)
    mean, cov = posterior(result, Xs, result.scaling)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    header = ["age", "year", "cohort", "mean", "sd", "lower", "upper"]
    cols = [age, year, year - age, mean, sd, mean - Z90 * sd, mean + Z90 * sd]
    if args.paths:
        paths = sample_posterior(result, Xs, args.paths, args.seed)
        header += [f"path_{k + 1}" for k in range(args.paths)]
        cols += list(paths)
    rows = []
    for i in range(len(age)):
        rows.append([int(age[i]), int(year[i]), int(year[i] - age[i])] + [float(c[i]) for c in cols[3:]])
    _write_csv(run.path("predictions.csv"), header, rows)
    run.finish(seed=args.seed, data_file=result.dataset.source)
    return 0


def cmd_grids(args) -> int:
    result = _load_fit(args.fit, args.rank)
    ds = result.dataset
    ages, years = ds.ages, ds.years
    anchor = tuple(float(v) for v in args.anchor) if args.anchor else (70.0, 2010.0)
    if not (ages.min() <= anchor[0] <= ages.max() and years.min() <= anchor[1] <= years.max()):
        raise UsageError(f"anchor {anchor} lies outside the data grid")
    run = Run("grids", args)
    res = residual_grid(result)
    _write_csv(run.path("residuals.csv"), ["age", "year", "residual"],
               [[int(a), int(y), float(res[i, j])] for i, a in enumerate(ages) for j, y in enumerate(years)])
    corr = prior_correlation_slice(result.expr, result.params, anchor, ages, years, result.scaling)
    _write_csv(run.path("correlation.csv"), ["age", "year", "correlation"],
               [[int(a), int(y), float(corr[i, j])] for i, a in enumerate(ages) for j, y in enumerate(years)])
    run.extra["anchor"] = list(anchor)
    run.finish(data_file=ds.source)
    return 0


def cmd_experiment(args) -> int:
    spec = builtin_spec(args.case, reduced=args.reduced)
    if args.name == "smoothness" and spec.name != "SYA":
        raise UsageError("the smoothness sweep is defined for SYA-class surfaces only")
    run = Run("experiment", args)
    ds = generate_surface(spec, args.seed)
    opts = _fit_options(args, FitOptions(seed=args.seed))
    if args.name == "smoothness":
        sweep = smoothness_sweep(ds, opts, workers=args.workers)
        rows = [[fa] + [float(sweep.cell(fa, fy)) for fy in sweep.families] for fa in sweep.families]
        _write_csv(run.path("smoothness.csv"), ["age_family", *sweep.families], rows)
    elif args.name == "recovery":
        config = GAConfig(population=args.pop, generations=args.gens, search_set=args.set,
                          seed=args.seed, fit_options=opts)
        record = run_ga(ds, config, workers=args.workers)
        record.write_csv(run.path("record.csv"))
        fits = refit_top(record.results(), args.refit_top, replace(TIGHT, learning_rate=opts.learning_rate),
                         master_seed=args.seed)
        report = recovery_report(spec, rank_and_dedup(fits))
        _write_json(run.path("recovery.json"), report.to_dict())
    else:
        rows, _ = convergence_profile(spec.structure, ds, long_iterations=args.long_iter, opts=opts)
        _write_csv(run.path("convergence.csv"), ["tolerance", "steps", "bic", "mll"],
                   [[r.tolerance, r.steps, r.bic, r.mll] for r in rows])
    run.extra["spec"] = spec.to_dict()
    run.finish(seed=args.seed)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_fit_flags(p):
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.05)")
    p.add_argument("--tol", type=float, help="convergence tolerance (default 1e-4)")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="iteration cap (default 150)")


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="CSV with header age,year,deaths,exposures")
    p.add_argument("--ages", type=_range, help="age range, e.g. 50..84")
    p.add_argument("--years", type=_range, help="year range, e.g. 1990..2018")
    p.add_argument("--hetero", action="store_true", help="noise variance sigma2/deaths")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apcgp", description="Gaussian-process kernel search for mortality surfaces.",
                     epilog=__doc__.split("Output files", 1)[1].join(["Output files", ""]),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="draw a synthetic surface")
    p.add_argument("--case", required=True, choices=("SYA", "SYB", "SYC"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reduced", action="store_true", help="20 ages x 15 years instead of 35 x 30")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit one kernel")
    _add_data_flags(p)
    p.add_argument("--kernel", required=True, help='kernel DSL, e.g. "mul(RBF_a, RBF_y)"')
    _add_fit_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ga", help="genetic kernel search")
    _add_data_flags(p)
    p.add_argument("--set", choices=("r", "f"), help="restricted or full leaf set (default r)")
    p.add_argument("--pop", type=int, help="population size (default 200)")
    p.add_argument("--gens", type=int, help="generations (default 20)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--config", help="key = value file with GAConfig/FitOptions fields")
    _add_fit_flags(p)
    p.add_argument("--refit-top", dest="refit_top", type=int, default=30)
    p.add_argument("--refit-max-iter", dest="refit_max_iter", type=int, help="iteration cap of refits (default 1000)")
    p.add_argument("--top-k", dest="top_k", type=int, default=30, help="fits stored in top_fits.json")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ga)

    p = sub.add_parser("predict", help="posterior predictions on a grid")
    p.add_argument("--fit", required=True, help="fit.json or top_fits.json")
    p.add_argument("--rank", type=int, default=1, help="entry of a top_fits.json list")
    p.add_argument("--ages", type=_range, required=True)
    p.add_argument("--years", type=_range, required=True)
    p.add_argument("--paths", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grids", help="residual and prior-correlation grids")
    p.add_argument("--fit", required=True)
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--anchor", nargs=2, type=float, metavar=("AGE", "YEAR"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grids)

    p = sub.add_parser("experiment", help="synthetic-data experiments")
    p.add_argument("--name", required=True, choices=("smoothness", "recovery", "convergence"))
    p.add_argument("--case", required=True, choices=("SYA", "SYB", "SYC"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reduced", action="store_true")
    p.add_argument("--pop", type=int, default=100)
    p.add_argument("--gens", type=int, default=10)
    p.add_argument("--set", choices=("r", "f"), default="r")
    p.add_argument("--refit-top", dest="refit_top", type=int, default=5)
    p.add_argument("--long-iter", dest="long_iter", type=int, default=2000)
    _add_fit_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, KernelError) as exc:
        print(f"apcgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"apcgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"apcgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
