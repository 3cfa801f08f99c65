"""Sensitivity-driven cache scheduling and adaptive token pruning on a toy DiT."""

from .dcs import CacheSchedule, brute_force_schedule, optimize, uniform_intervals
from .errors import SodaError
from .ofs import SensitivityTables, build_tables
from .pipeline import RunOptions, run_accelerated, sweep
from .toy_dit import ModuleKind, ToyDitConfig, build_model, run_full_trajectory
from .uas import UasParams, solve_beta

__all__ = [
    "CacheSchedule",
    "ModuleKind",
    "RunOptions",
    "SensitivityTables",
    "SodaError",
    "ToyDitConfig",
    "UasParams",
    "brute_force_schedule",
    "build_model",
    "build_tables",
    "optimize",
    "run_accelerated",
    "run_full_trajectory",
    "solve_beta",
    "sweep",
    "uniform_intervals",
]

__version__ = "0.1.0"
