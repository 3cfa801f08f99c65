"""Adaptive prune-vs-reuse decisions between anchors.

Inside an interval opened at anchor ``t + n`` and closed at anchor ``t``, each
module at an intermediate step ``t'`` either reuses its cached branch output
wholesale or recomputes the top-scoring tokens.  The pruning rate is
``clamp(lam * E_c(t, l, m, n) + beta, 0, alpha_max)``; pruning fires only if
the profiled pruning error at that rate is below the caching error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dcs import CacheSchedule
from .errors import ConfigError, RangeError, SaturationError
from .ofs import prune_count
from .toy_dit import MODULE_KINDS

INDEX_MODES = ("interval", "age")
REUSE = "reuse"
PRUNE = "prune"


@dataclass(frozen=True)
class UasParams:
    lam: float = 0.3
    beta: float = 0.4
    alpha_max: float = 0.95
    index_mode: str = "interval"  # "age" is experimental
    signed_importance: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if not 0 < self.alpha_max <= 1:
            raise ConfigError(f"alpha_max must be in (0, 1], got {self.alpha_max}")
        if self.index_mode not in INDEX_MODES:
            raise ConfigError(f"index_mode must be one of {INDEX_MODES}")


@dataclass(frozen=True)
class PruneDecision:
    kind: str
    rate: float
    delta: float
    cache_error: float
    kept: np.ndarray | None = None
    fallback: bool = False

    @property
    def is_prune(self):
        return self.kind == PRUNE


def _clamp(x, hi):
    return min(max(x, 0.0), hi)


def pruning_rate(tables, t, l, m, n, params: UasParams):
    return _clamp(params.lam * tables.caching(t, l, m, n) + params.beta, params.alpha_max)


def _interp_with_origin(grid, row, alpha):
    xs = np.concatenate([[0.0], np.asarray(grid, dtype=np.float64)])
    ys = np.concatenate([[0.0], np.asarray(row, dtype=np.float64)])
    # np.interp holds the end value beyond the top grid point
    return float(np.interp(alpha, xs, ys))


def pruning_error_lookup(tables, t, l, m, alpha):
    if alpha < 0:
        raise RangeError(f"pruning rate must be nonnegative, got {alpha}")
    mean, _ = tables.pruning_row(t, l, m)
    return _interp_with_origin(tables.alpha_grid, mean, alpha)


def pruning_band(tables, t, l, m, alpha):
    """Interpolated (mean, std) of the pruning error at ``alpha``."""
    mean, std = tables.pruning_row(t, l, m)
    return (
        _interp_with_origin(tables.alpha_grid, mean, alpha),
        _interp_with_origin(tables.alpha_grid, std, alpha),
    )


def token_scores(features, signed=False):
    mu = np.asarray(features, dtype=np.float64).mean(axis=-1)
    return mu if signed else np.abs(mu)


def select_positions(features, k, signed=False):
    """The ``k`` tokens with the largest |feature mean|, as sorted indices."""
    scores = token_scores(features, signed)
    if not 1 <= k <= len(scores):
        raise RangeError(f"keep count {k} outside [1, {len(scores)}]")
    order = np.argsort(-scores, kind="stable")  # ties: lower index first
    return np.sort(order[:k])


def _cache_cell(tables, t_step, t_low, l, m, n, params):
    if params.index_mode == "interval":
        return tables.caching(t_low, l, m, n)
    return tables.caching(t_step, l, m, t_low + n - t_step)


def decide(tables, t_step, t_low, l, m, n, params: UasParams, features) -> PruneDecision:
    if not t_low < t_step < t_low + n:
        raise RangeError(f"step {t_step} not strictly inside interval ({t_low}, {t_low + n})")
    cache_err = _cache_cell(tables, t_step, t_low, l, m, n, params)
    alpha = _clamp(params.lam * cache_err + params.beta, params.alpha_max)
    delta = pruning_error_lookup(tables, t_step, l, m, alpha)
    if delta >= cache_err:
        return PruneDecision(REUSE, alpha, delta, cache_err)
    n_tok = np.shape(features)[0]
    keep = n_tok - prune_count(alpha, n_tok)
    if keep < 1:
        return PruneDecision(REUSE, alpha, delta, cache_err, fallback=True)
    kept = select_positions(features, keep, params.signed_importance)
    return PruneDecision(PRUNE, alpha, delta, cache_err, kept=kept)


def pruned_step_errors(tables, schedule: CacheSchedule, index_mode="interval"):
    """Caching errors driving the rate at every (t', l, m) between anchors."""
    vals = []
    for t_low, n in zip(schedule.anchors[1:], schedule.intervals):
        for t_step in range(t_low + n - 1, t_low, -1):
            for l in range(1, tables.L + 1):
                for m in MODULE_KINDS:
                    if index_mode == "interval":
                        vals.append(tables.caching(t_low, l, m, n))
                    else:
                        vals.append(tables.caching(t_step, l, m, t_low + n - t_step))
    return np.asarray(vals, dtype=np.float64)


def mean_rate(errors, lam, beta, alpha_max):
    return float(np.mean(np.clip(lam * errors + beta, 0.0, alpha_max)))


def solve_beta(tables, schedule, lam, target, alpha_max=0.95, index_mode="interval",
               tol=1e-6, bounds=(-1.0, 1.0)):
    """Base rate ``beta`` whose mean pruned-step rate equals ``target``.

    Bisection returns the largest beta whose mean rate does not exceed the
    target, so a target of 0 yields the edge of the all-zero region.
    """
    if not 0 <= target <= alpha_max:
        raise RangeError(f"target mean rate {target} outside [0, alpha_max={alpha_max}]")
    errs = pruned_step_errors(tables, schedule, index_mode)
    if errs.size == 0:
        raise SaturationError("schedule has no pruned steps; no beta can set a rate",
                              achievable=(0.0, 0.0))
    lo, hi = bounds
    f_lo = mean_rate(errs, lam, lo, alpha_max)
    f_hi = mean_rate(errs, lam, hi, alpha_max)
    if target < f_lo - tol or target > f_hi + tol:
        raise SaturationError(
            f"target mean rate {target} unreachable for beta in [{lo}, {hi}]; "
            f"achievable range is [{f_lo:.6f}, {f_hi:.6f}]",
            achievable=(f_lo, f_hi),
        )
    if f_hi <= target:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_rate(errs, lam, mid, alpha_max) <= target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    if abs(mean_rate(errs, lam, lo, alpha_max) - target) > tol:
        # only reachable if the target sits in a jump of the rate curve
        raise SaturationError(f"bisection did not reach target {target}",
                              achievable=(f_lo, f_hi))
    return lo


def target_from_speedup(r, convention="pruned"):
    """Mean pruning rate implied by a speed-up factor ``r`` > 1.

    ``pruned``: pruned proportion equals 1/r; ``kept``: kept proportion equals 1/r.
    """
    if not r > 1:
        raise RangeError(f"speed-up factor must exceed 1, got {r}")
    if convention == "pruned":
        return 1.0 / r
    if convention == "kept":
        return 1.0 - 1.0 / r
    raise ConfigError(f"unknown convention {convention!r}; expected 'pruned' or 'kept'")
