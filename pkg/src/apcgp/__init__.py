"""Gaussian-process mortality surfaces with genetic kernel search.

Kernels are written in a small bracketed language (``mul(RBF_a, M12_y)``)
over age ``a``, year ``y`` and cohort ``c``.  The main entry points are
re-exported here; see the submodules for the rest.
"""

from .fitting import FitOptions, fit, refit_top
from .ga import GAConfig, run_ga
from .gp import DataError, FitResult, HyperParams, MortalityDataset, ScalingInfo, mll, posterior
from .kernels import KernelError, canonical_form, format_kernel, parse_kernel
from .mortality_io import load_csv
from .scoring import bayes_factor, bic, jeffreys_category, rank_and_dedup
from .synth import builtin_spec, generate_surface

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "FitOptions",
    "FitResult",
    "GAConfig",
    "HyperParams",
    "KernelError",
    "MortalityDataset",
    "ScalingInfo",
    "bayes_factor",
    "bic",
    "builtin_spec",
    "canonical_form",
    "fit",
    "format_kernel",
    "generate_surface",
    "jeffreys_category",
    "load_csv",
    "mll",
    "parse_kernel",
    "posterior",
    "rank_and_dedup",
    "refit_top",
    "run_ga",
]
