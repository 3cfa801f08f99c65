"""Offline sensitivity modeling: caching and pruning error tables.

Errors are cosine distances between module branch outputs, measured on
full-computation trajectories from random initial states and summarized per
cell as mean and population std over samples.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AbsentCellError, ConfigError, RangeError, ShapeError, ValidationError
from .toy_dit import (
    MODULE_KINDS,
    ModuleKind,
    ToyDitConfig,
    ToyModel,
    _modulate,
    attention_with_key_masks,
    forward_module,
    run_full_trajectory,
)

DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_SAMPLES = 32
DEFAULT_N_MAX = 9
_DEGENERATE_NORM = 1e-12
PRUNE_COMPARE_MODES = ("substitute", "kept_rows")


def substream(seed, name, *counters):
    """Generator for a named, counter-indexed sub-stream of ``seed``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    key.extend(int(c) for c in counters)
    return np.random.default_rng(np.random.SeedSequence(key))


def cosine_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    va, vb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    small_a, small_b = na < _DEGENERATE_NORM, nb < _DEGENERATE_NORM
    if small_a and small_b:
        return 0.0
    if small_a or small_b:
        return 1.0
    if np.array_equal(va, vb):
        return 0.0
    d = 1.0 - float(va @ vb) / float(na * nb)
    return min(max(d, 0.0), 2.0)


def prune_count(alpha, n_tok):
    """Number of pruned tokens at rate ``alpha`` (round half up)."""
    return int(math.floor(alpha * n_tok + 0.5))


def draw_pruned_set(rng, n_tok, alpha):
    k = prune_count(alpha, n_tok)
    return np.sort(rng.choice(n_tok, size=k, replace=False)) if k else np.empty(0, np.intp)


def caching_error_single(traj, t, l, m, n):
    T = traj.module_outputs.shape[0]
    if n < 1 or t < 1 or t + n > T:
        raise AbsentCellError(f"caching cell (t={t}, n={n}) absent: t + n > T={T}")
    return cosine_distance(traj.output(t + n, l, m), traj.output(t, l, m))


def pruning_error_single(model, traj, t, l, m, alpha, rng, compare="substitute",
                         return_set=False):
    """Error of computing module (t, l, m) with a random pruned set of rate ``alpha``.

    Pruned rows are taken from the ground-truth output at ``t + 1``.
    """
    if not 0.0 < alpha < 1.0:
        raise RangeError(f"pruning rate {alpha} outside (0, 1)")
    if t < 1 or t >= model.T:
        raise AbsentCellError(f"pruning cell t={t} absent: needs t + 1 <= T={model.T}")
    if compare not in PRUNE_COMPARE_MODES:
        raise ConfigError(f"unknown pruning comparison mode {compare!r}")
    gamma = draw_pruned_set(rng, model.n_tok, alpha)
    target = traj.output(t, l, m)
    if gamma.size == 0:
        err = 0.0
    else:
        mask = np.ones(model.n_tok, dtype=bool)
        mask[gamma] = False
        kept = np.flatnonzero(mask)
        out = forward_module(model, l, m, traj.input(t, l, m), model.condition(t), kept=kept)
        if compare == "kept_rows":
            err = cosine_distance(out[kept], target[kept])
        else:
            out[gamma] = traj.output(t + 1, l, m)[gamma]
            err = cosine_distance(out, target)
    return (err, gamma) if return_set else err


@dataclass(eq=False)
class SensitivityTables:
    """Mean/std error tensors.

    caching_*: shape (T, L, 2, n_max), index [t-1, l-1, m, n-1];
    pruning_*: shape (T, L, 2, len(alpha_grid)), index [t-1, l-1, m, k].
    Absent cells hold NaN.
    """

    caching_mean: np.ndarray
    caching_std: np.ndarray
    pruning_mean: np.ndarray
    pruning_std: np.ndarray
    alpha_grid: np.ndarray
    n_max: int
    sample_count: int
    model_fingerprint: bytes
    config: ToyDitConfig
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.caching_mean.shape[0]

    @property
    def L(self):
        return self.caching_mean.shape[1]

    def caching(self, t, l, m, n):
        v = self._cell(self.caching_mean, t, l, m, n, "caching")
        return v

    def caching_sd(self, t, l, m, n):
        return self._cell(self.caching_std, t, l, m, n, "caching")

    def pruning_row(self, t, l, m):
        """(mean, std) rows over the alpha grid at (t, l, m)."""
        if not (1 <= t <= self.T and 1 <= l <= self.L):
            raise AbsentCellError(f"pruning cell (t={t}, l={l}) out of range")
        mean = self.pruning_mean[t - 1, l - 1, int(m)]
        if np.isnan(mean).any():
            raise AbsentCellError(f"pruning cell row (t={t}, l={l}, m={int(m)}) absent")
        return mean, self.pruning_std[t - 1, l - 1, int(m)]

    def _cell(self, arr, t, l, m, n, what):
        if not (1 <= t <= self.T and 1 <= l <= self.L and 1 <= n <= self.n_max):
            raise AbsentCellError(f"{what} cell (t={t}, l={l}, n={n}) out of range")
        v = arr[t - 1, l - 1, int(m), n - 1]
        if np.isnan(v):
            raise AbsentCellError(f"{what} cell (t={t}, l={l}, m={int(m)}, n={n}) absent")
        return float(v)

    def populated_mask(self):
        T = self.T
        t = np.arange(1, T + 1)[:, None]
        n = np.arange(1, self.n_max + 1)[None, :]
        return np.broadcast_to(((t + n) <= T)[:, None, None, :], self.caching_mean.shape)

    def validate(self):
        T, L, n_max = self.T, self.L, self.n_max
        A = len(self.alpha_grid)
        if self.caching_mean.shape != (T, L, 2, n_max) or self.caching_std.shape != (T, L, 2, n_max):
            raise ValidationError("caching tensor shape mismatch")
        if self.pruning_mean.shape != (T, L, 2, A) or self.pruning_std.shape != (T, L, 2, A):
            raise ValidationError("pruning tensor shape mismatch")
        if self.config.total_steps != T or self.config.layers != L:
            raise ValidationError("config snapshot disagrees with tensor dimensions")
        if not 1 <= n_max <= T - 1:
            raise ValidationError(f"n_max={n_max} outside [1, T-1]")
        if self.sample_count < 1:
            raise ValidationError("sample_count must be positive")
        g = np.asarray(self.alpha_grid, dtype=np.float64)
        if A < 1 or np.any(g <= 0) or np.any(g >= 1) or np.any(np.diff(g) <= 0):
            raise ValidationError("alpha_grid must be strictly ascending inside (0, 1)")
        mask = self.populated_mask()
        for name, arr in (("caching_mean", self.caching_mean), ("caching_std", self.caching_std)):
            if np.isnan(arr[mask]).any() or not np.isnan(arr[~mask]).all():
                raise ValidationError(f"{name}: absent-cell pattern does not match t + n > T")
        for name, arr in (("pruning_mean", self.pruning_mean), ("pruning_std", self.pruning_std)):
            if np.isnan(arr[:-1]).any() or not np.isnan(arr[-1]).all():
                raise ValidationError(f"{name}: only t = T rows may be absent")
        for name in ("caching_mean", "pruning_mean"):
            v = getattr(self, name)
            v = v[~np.isnan(v)]
            if v.size and (v.min() < 0 or v.max() > 2):
                raise ValidationError(f"{name}: values outside [0, 2]")
        for name in ("caching_std", "pruning_std"):
            v = getattr(self, name)
            v = v[~np.isnan(v)]
            if v.size and v.min() < 0:
                raise ValidationError(f"{name}: negative std")
        return self

    def check_model(self, model):
        if model.fingerprint != self.model_fingerprint:
            raise ValidationError(
                "tables were built for a different model "
                f"({self.model_fingerprint.hex()[:12]} != {model.fingerprint.hex()[:12]})"
            )

    def identical(self, other):
        """Bitwise equality of tensors and metadata."""
        arrays = ("caching_mean", "caching_std", "pruning_mean", "pruning_std")
        return (
            all(
                getattr(self, a).dtype == getattr(other, a).dtype
                and getattr(self, a).shape == getattr(other, a).shape
                and getattr(self, a).tobytes() == getattr(other, a).tobytes()
                for a in arrays
            )
            and np.asarray(self.alpha_grid).tobytes() == np.asarray(other.alpha_grid).tobytes()
            and self.n_max == other.n_max
            and self.sample_count == other.sample_count
            and self.model_fingerprint == other.model_fingerprint
            and self.config == other.config
            and self.meta == other.meta
        )


def _batched_cosine(stack, b):
    """cosine_distance(stack[i], b) for every i, same degenerate-norm rules."""
    flat = stack.reshape(len(stack), -1)
    vb = b.ravel()
    na = np.linalg.norm(flat, axis=1)
    nb = np.linalg.norm(vb)
    out = np.empty(len(stack))
    for i in range(len(stack)):
        if na[i] < _DEGENERATE_NORM or nb < _DEGENERATE_NORM:
            out[i] = cosine_distance(flat[i], vb)
        elif np.array_equal(flat[i], vb):
            out[i] = 0.0
        else:
            out[i] = min(max(1.0 - float(flat[i] @ vb) / (na[i] * nb), 0.0), 2.0)
    return out


def _pruning_cells(model, traj, t, l, m, alpha_grid, master_seed, sample_idx):
    """All alpha-grid pruning errors of one (t, l, m) cell in one batch.

    Agrees with ``pruning_error_single`` (substitute mode) up to rounding.
    """
    n_tok = model.n_tok
    target = traj.output(t, l, m)
    sub = traj.output(t + 1, l, m)
    kept = np.ones((len(alpha_grid), n_tok), dtype=bool)
    for k, alpha in enumerate(alpha_grid):
        rng = substream(master_seed, "gamma", sample_idx, t, l, int(m), k)
        kept[k, draw_pruned_set(rng, n_tok, alpha)] = False
    if m == ModuleKind.MLP:
        # token-local: kept rows equal the ground-truth rows
        computed = np.broadcast_to(target, (len(alpha_grid),) + target.shape)
    else:
        xin = _modulate(model, l, m, traj.input(t, l, m), model.condition(t))
        computed = attention_with_key_masks(model, l, xin, kept)
    assembled = np.where(kept[:, :, None], computed, sub[None])
    errs = _batched_cosine(assembled, target)
    errs[kept.all(axis=1)] = 0.0
    return errs


def _profile_sample(model, x_T, n_max, alpha_grid, master_seed, sample_idx, compare):
    T, L = model.T, model.L
    traj = run_full_trajectory(model, x_T, capture=True)
    cach = np.full((T, L, 2, n_max), np.nan)
    prun = np.full((T, L, 2, len(alpha_grid)), np.nan)
    for t in range(1, T + 1):
        for l in range(1, L + 1):
            for m in MODULE_KINDS:
                for n in range(1, min(n_max, T - t) + 1):
                    cach[t - 1, l - 1, m, n - 1] = caching_error_single(traj, t, l, m, n)
                if t == T:
                    continue
                if compare == "substitute":
                    prun[t - 1, l - 1, m] = _pruning_cells(
                        model, traj, t, l, m, alpha_grid, master_seed, sample_idx
                    )
                    continue
                for k, alpha in enumerate(alpha_grid):
                    rng = substream(master_seed, "gamma", sample_idx, t, l, int(m), k)
                    prun[t - 1, l - 1, m, k] = pruning_error_single(
                        model, traj, t, l, m, alpha, rng, compare=compare
                    )
    return cach, prun


def _reduce(per_sample):
    stack = np.stack(per_sample)  # sample-index order
    S = stack.shape[0]
    total = np.zeros(stack.shape[1:])
    for s in range(S):
        total = total + stack[s]
    mean = total / S
    sq = np.zeros_like(mean)
    for s in range(S):
        sq = sq + (stack[s] - mean) ** 2
    std = np.sqrt(sq / S)
    return mean.astype(np.float32), std.astype(np.float32)


def build_tables(model: ToyModel, samples=DEFAULT_SAMPLES, n_max=DEFAULT_N_MAX,
                 alpha_grid=DEFAULT_ALPHA_GRID, master_seed=0, jobs=1,
                 initial_states=None, compare="substitute") -> SensitivityTables:
    """Profile ``samples`` random trajectories into sensitivity tables.

    ``initial_states`` overrides the seeded Gaussian draws (one per sample).
    """
    if not isinstance(samples, int) or samples < 1:
        raise ConfigError(f"samples: must be a positive integer, got {samples!r}")
    if not 1 <= n_max <= model.T - 1:
        raise ConfigError(f"n_max: must be in [1, T-1={model.T - 1}], got {n_max}")
    grid = np.asarray(alpha_grid, dtype=np.float64)
    if grid.size < 1 or np.any(grid <= 0) or np.any(grid >= 1) or np.any(np.diff(grid) <= 0):
        raise ConfigError("alpha_grid: must be strictly ascending inside (0, 1)")
    if compare not in PRUNE_COMPARE_MODES:
        raise ConfigError(f"unknown pruning comparison mode {compare!r}")
    if initial_states is None:
        initial_states = [
            substream(master_seed, "samples", s).standard_normal((model.n_tok, model.d))
            for s in range(samples)
        ]
    elif len(initial_states) != samples:
        raise ConfigError("initial_states: need exactly one state per sample")

    def work(s):
        return _profile_sample(model, initial_states[s], n_max, grid, master_seed, s, compare)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, range(samples)))
    else:
        results = [work(s) for s in range(samples)]
    cm, cs = _reduce([r[0] for r in results])
    pm, ps = _reduce([r[1] for r in results])
    meta = {"master_seed": int(master_seed), "prune_compare": compare, "std": "population"}
    return SensitivityTables(
        caching_mean=cm, caching_std=cs, pruning_mean=pm, pruning_std=ps,
        alpha_grid=grid, n_max=n_max, sample_count=samples,
        model_fingerprint=model.fingerprint, config=model.config, meta=meta,
    ).validate()


def default_jobs():
    try:
        return max(1, int(os.environ.get("SODA_SCHED_JOBS", "1")))
    except ValueError:
        raise ConfigError("SODA_SCHED_JOBS must be an integer") from None
