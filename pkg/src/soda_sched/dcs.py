"""Cache-interval scheduling by dynamic programming.

A schedule is a chain of anchors ``T = a_0 > a_1 > ... > a_Ns = 1``; interval
``j`` spans ``n_j = a_{j-1} - a_j`` steps and is charged
``step_cost(a_j, n_j)``, the xi-weighted layer/module mean of the caching
error at its lower anchor.

Costs are compared as exact integers (every float32 table value scaled by
2**149), so ties are real ties and ``optimize`` and ``brute_force_schedule``
resolve them identically: among equal-cost schedules the one whose interval
sequence, read from the bottom (t = 1) upwards, is lexicographically smallest
wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AbsentCellError,
    ConfigError,
    ConstrainedInfeasibleError,
    InfeasibleError,
    ResourceLimitError,
    ValidationError,
)

XI_MODES = ("linear", "constant", "quadratic")
COST_MODES = ("terminal", "stepsum")
DEFAULT_CANDIDATES = (1, 2, 3, 4, 5, 6)
DEFAULT_ENUM_LIMIT = 10**7
PHASE_WINDOW = 5
_EXACT_SCALE = 2**149  # smallest float32 subnormal is 2**-149


def xi_weight(n, xi="linear"):
    if xi == "linear":
        return n
    if xi == "constant":
        return 1
    if xi == "quadratic":
        return n * n
    raise ConfigError(f"unknown xi mode {xi!r}; expected one of {XI_MODES}")


@dataclass(frozen=True)
class CacheSchedule:
    anchors: tuple
    intervals: tuple
    total_cost: float
    candidates: tuple
    phase_constrained: bool = False
    xi: str = "linear"
    cost_mode: str = "terminal"
    phase: tuple = field(default=(), compare=False)

    @property
    def n_s(self):
        return len(self.intervals)

    @property
    def total_steps(self):
        return self.anchors[0]

    @property
    def anchor_set(self):
        return frozenset(self.anchors)

    def validate(self, T=None):
        a, iv = self.anchors, self.intervals
        if T is None:
            T = a[0] if a else 0
        if len(a) < 2 or len(a) != len(iv) + 1:
            raise ValidationError("schedule needs N_s >= 1 intervals and N_s + 1 anchors")
        if a[0] != T or a[-1] != 1:
            raise ValidationError(f"anchors must run from T={T} down to 1, got {a[0]}..{a[-1]}")
        if any(not 1 <= x <= T for x in a):
            raise ValidationError("anchor outside [1, T]")
        for j, n in enumerate(iv, start=1):
            if a[j - 1] - a[j] != n:
                raise ValidationError(
                    f"interval {j}: anchor gap {a[j - 1] - a[j]} != interval {n}"
                )
            if n < 1:
                raise ValidationError("intervals must be positive")
        if sum(iv) != T - 1:
            raise ValidationError(f"intervals sum to {sum(iv)}, expected T - 1 = {T - 1}")
        if self.candidates and any(n not in self.candidates for n in iv):
            raise ValidationError("interval outside the candidate set")
        if self.phase_constrained and self.phase:
            sub = constrained_subset(self.candidates)
            for j, n in enumerate(iv, start=1):
                if a[j] in self.phase and n not in sub:
                    raise ValidationError(
                        f"interval {j} ends in the special phase but {n} not in {sub}"
                    )
        return self

    def lower_anchor(self, t):
        """(lower anchor, interval) of the interval containing non-anchor step ``t``."""
        for j in range(1, len(self.anchors)):
            if self.anchors[j] < t < self.anchors[j - 1]:
                return self.anchors[j], self.intervals[j - 1]
        raise ValidationError(f"step {t} is an anchor or outside the schedule")


def schedule_from_intervals(intervals, T, candidates=None, **kw):
    anchors = [T]
    for n in intervals:
        anchors.append(anchors[-1] - n)
    cands = tuple(sorted(set(candidates if candidates is not None else intervals)))
    return CacheSchedule(anchors=tuple(anchors), intervals=tuple(intervals),
                         total_cost=float("nan"), candidates=cands, **kw)


def uniform_intervals(T, n_s):
    """Intervals as equal as possible; the remainder goes to the earliest ones."""
    if not 1 <= n_s <= T - 1:
        raise InfeasibleError(f"N_s={n_s} outside [1, T-1={T - 1}]")
    q, r = divmod(T - 1, n_s)
    return tuple(q + 1 if j < r else q for j in range(n_s))


def _cells(tables, t, n):
    if not (1 <= t and 1 <= n <= tables.n_max and t + n <= tables.T):
        raise AbsentCellError(f"caching cell (t={t}, n={n}) absent")
    cells = tables.caching_mean[t - 1, :, :, n - 1]
    if np.isnan(cells).any():
        raise AbsentCellError(f"caching cell (t={t}, n={n}) absent")
    return cells


def _layer_module_mean(tables, t, n):
    cells = _cells(tables, t, n).astype(np.float64)
    return float(cells.sum()) / cells.size


def step_cost(tables, t, n, xi="linear", cost_mode="terminal"):
    if cost_mode == "terminal":
        return xi_weight(n, xi) * _layer_module_mean(tables, t, n)
    if cost_mode == "stepsum":
        # experimental: per-step reuse errors across the interval, cache age t + n - t'
        return sum(_layer_module_mean(tables, tp, t + n - tp) for tp in range(t, t + n))
    raise ConfigError(f"unknown cost mode {cost_mode!r}; expected one of {COST_MODES}")


def _exact_cell_sum(tables, t, n):
    return sum(int(float(v) * _EXACT_SCALE) for v in _cells(tables, t, n).ravel())


def _exact_cost(tables, t, n, xi, cost_mode):
    # proportional to step_cost by the constant L*M (and the exact scale)
    if cost_mode == "terminal":
        return xi_weight(n, xi) * _exact_cell_sum(tables, t, n)
    if cost_mode == "stepsum":
        return sum(_exact_cell_sum(tables, tp, t + n - tp) for tp in range(t, t + n))
    raise ConfigError(f"unknown cost mode {cost_mode!r}; expected one of {COST_MODES}")


def schedule_cost(tables, schedule, xi=None, cost_mode=None):
    xi = schedule.xi if xi is None else xi
    cost_mode = schedule.cost_mode if cost_mode is None else cost_mode
    schedule.validate(tables.T)
    total = 0.0
    for a, n in zip(schedule.anchors[1:], schedule.intervals):
        total += step_cost(tables, a, n, xi, cost_mode)
    return total


def _check_candidates(tables, candidates):
    cands = tuple(sorted(set(int(c) for c in candidates)))
    if not cands:
        raise ConfigError("candidate set is empty")
    if cands[0] < 1 or cands[-1] > tables.n_max:
        raise ConfigError(f"candidates must lie in [1, n_max={tables.n_max}], got {cands}")
    return cands


def _check_bounds(T, n_s, cands):
    if n_s < 1:
        raise InfeasibleError(f"N_s must be positive, got {n_s}")
    if n_s * cands[0] > T - 1:
        raise InfeasibleError(
            f"N_s * min(candidates) = {n_s * cands[0]} exceeds T - 1 = {T - 1}"
        )
    if n_s * cands[-1] < T - 1:
        raise InfeasibleError(
            f"N_s * max(candidates) = {n_s * cands[-1]} is below T - 1 = {T - 1}"
        )


def constrained_subset(candidates):
    """The smaller half of the candidates (at least one)."""
    cands = sorted(candidates)
    return tuple(cands[: max(1, len(cands) // 2)])


def _smooth(values, window=PHASE_WINDOW):
    half = window // 2
    out = np.empty(len(values))
    for i in range(len(values)):
        lo, hi = max(0, i - half), min(len(values), i + half + 1)
        out[i] = np.mean(values[lo:hi])
    return out


def reference_cost_curve(tables, candidates, xi="linear"):
    """Per-timestep reference cost at the lower-median candidate, t = 1..T - n_ref."""
    cands = sorted(candidates)
    n_ref = cands[(len(cands) - 1) // 2]
    ts = np.arange(1, tables.T - n_ref + 1)
    c = np.array([step_cost(tables, int(t), n_ref, xi) / xi_weight(n_ref, xi) for t in ts])
    return ts, c


def detect_special_phase(tables, candidates, xi="linear", window=PHASE_WINDOW):
    """Timesteps where the smoothed step cost drops when moving from t + 1 to t."""
    cands = _check_candidates(tables, candidates)
    ts, c = reference_cost_curve(tables, cands, xi)
    return phase_from_curve(ts, c, window)


def phase_from_curve(ts, c, window=PHASE_WINDOW):
    s = _smooth(np.asarray(c, dtype=np.float64), window)
    # s[i] is at ts[i]; difference along denoising: s(t) - s(t + 1)
    return frozenset(int(ts[i]) for i in range(len(ts) - 1) if s[i] - s[i + 1] < 0)


def optimize(tables, n_s, candidates=DEFAULT_CANDIDATES, phase_constrained=False,
             xi="linear", cost_mode="terminal", phase=None) -> CacheSchedule:
    T = tables.T
    cands = _check_candidates(tables, candidates)
    _check_bounds(T, n_s, cands)
    if phase_constrained:
        if phase is None:
            phase = detect_special_phase(tables, cands, xi)
        sub = constrained_subset(cands)
    else:
        phase, sub = frozenset(), cands
    phase = frozenset(phase)

    cost = {}
    for t in range(1, T):
        allowed = sub if t in phase else cands
        for n in allowed:
            if t + n <= T:
                cost[t, n] = _exact_cost(tables, t, n, xi, cost_mode)

    # best[i][t]: min exact cost from T to anchor t using i intervals
    best = [dict() for _ in range(n_s + 1)]
    choice = [dict() for _ in range(n_s + 1)]
    best[0][T] = 0
    for i in range(1, n_s + 1):
        prev = best[i - 1]
        for t in range(1, T):
            allowed = sub if t in phase else cands
            for n in allowed:  # ascending: a later n only wins with strictly lower cost
                up = t + n
                if up not in prev:
                    continue
                v = prev[up] + cost[t, n]
                if t not in best[i] or v < best[i][t]:
                    best[i][t] = v
                    choice[i][t] = n
    if 1 not in best[n_s]:
        if phase_constrained:
            raise ConstrainedInfeasibleError(
                f"no composition of T - 1 = {T - 1} into {n_s} intervals honours the "
                f"phase constraint (subset {sub} inside {len(phase)} phase steps)"
            )
        raise InfeasibleError(
            f"no composition of T - 1 = {T - 1} into {n_s} intervals from {cands}"
        )
    rev = []
    t, i = 1, n_s
    while i > 0:
        n = choice[i][t]
        rev.append(n)
        t, i = t + n, i - 1
    intervals = tuple(reversed(rev))
    sched = schedule_from_intervals(
        intervals, T, cands, phase_constrained=phase_constrained, xi=xi,
        cost_mode=cost_mode, phase=tuple(sorted(phase)),
    )
    total = _ordered_total(tables, sched.anchors, intervals, xi, cost_mode)
    return _with_cost(sched, total)


def _ordered_total(tables, anchors, intervals, xi, cost_mode):
    total = 0.0
    for a, n in zip(anchors[1:], intervals):
        total += step_cost(tables, a, n, xi, cost_mode)
    return total


def _with_cost(sched, total):
    return CacheSchedule(
        anchors=sched.anchors, intervals=sched.intervals, total_cost=total,
        candidates=sched.candidates, phase_constrained=sched.phase_constrained,
        xi=sched.xi, cost_mode=sched.cost_mode, phase=sched.phase,
    )


def brute_force_schedule(tables, n_s, candidates=DEFAULT_CANDIDATES, limit=DEFAULT_ENUM_LIMIT,
                         xi="linear", cost_mode="terminal", phase=None) -> CacheSchedule:
    """Exhaustive minimum over all interval sequences (reference for ``optimize``).

    ``phase`` optionally restricts intervals ending inside it to the constrained subset.
    """
    T = tables.T
    cands = _check_candidates(tables, candidates)
    if len(cands) ** n_s > limit:
        raise ResourceLimitError(
            f"enumeration size {len(cands)}^{n_s} exceeds the limit {limit}"
        )
    _check_bounds(T, n_s, cands)
    phase = frozenset(phase or ())
    sub = constrained_subset(cands)
    lo, hi = cands[0], cands[-1]
    cost = {
        (t, n): _exact_cost(tables, t, n, xi, cost_mode)
        for t in range(1, T) for n in cands if t + n <= T
    }
    best_key = None
    best_iv = None
    seq = []

    def rec(top, left, acc):
        nonlocal best_key, best_iv
        if left == 0:
            if top == 1:
                key = (acc, tuple(reversed(seq)))
                if best_key is None or key < best_key:
                    best_key, best_iv = key, tuple(seq)
            return
        for n in cands:
            low = top - n
            rest = low - 1
            if rest < (left - 1) * lo or rest > (left - 1) * hi:
                continue
            if low in phase and n not in sub:
                continue
            seq.append(n)
            rec(low, left - 1, acc + cost[low, n])
            seq.pop()

    rec(T, n_s, 0)
    if best_iv is None:
        raise InfeasibleError(f"no feasible composition for N_s={n_s} from {cands}")
    sched = schedule_from_intervals(best_iv, T, cands, phase_constrained=bool(phase),
                                    xi=xi, cost_mode=cost_mode, phase=tuple(sorted(phase)))
    return _with_cost(sched, _ordered_total(tables, sched.anchors, best_iv, xi, cost_mode))


def count_compositions(T, n_s, candidates):
    """Number of interval sequences from ``candidates`` with N_s terms summing to T - 1."""
    ways = {0: 1}
    for _ in range(n_s):
        nxt = {}
        for s, w in ways.items():
            for n in candidates:
                nxt[s + n] = nxt.get(s + n, 0) + w
        ways = nxt
    return ways.get(T - 1, 0)
