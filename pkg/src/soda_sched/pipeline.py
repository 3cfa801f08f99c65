"""Accelerated sampling: full compute at anchors, prune/reuse in between."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dcs, uas
from .errors import AbsentCellError, InfeasibleError, MissingDataError, ShapeError
from .ofs import cosine_distance, substream
from .toy_dit import (
    MODULE_KINDS,
    ModuleKind,
    _check_finite,
    denoise_update,
    forward_module,
    run_full_trajectory,
)

log = logging.getLogger(__name__)

ANCHOR = "anchor"
PRUNED = "pruned"
VARIANTS = ("soda+uas", "soda", "uniform+uas", "uniform")
SWEEP_HEADER = ("ns", "variant", "seed", "schedule_cost", "flops_ratio", "cos_dist", "rel_l2")


def flops_proxy(n_tok, d, m, k):
    """Matmul-dominant operation count of one module over ``k`` computed tokens."""
    if ModuleKind(m) is ModuleKind.ATT:
        return 4 * k * d * d + 2 * k * k * d
    return 8 * k * d * d


def full_step_flops(model):
    return model.L * sum(flops_proxy(model.n_tok, model.d, m, model.n_tok) for m in MODULE_KINDS)


def compare(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    rel = float(np.linalg.norm(a - b)) / max(float(np.linalg.norm(b)), 1e-12)
    return {"cosine_distance": cosine_distance(a, b), "relative_l2": rel}


def initial_state_for_seed(model, seed):
    return substream(seed, "x_T").standard_normal((model.n_tok, model.d))


@dataclass
class RunOptions:
    use_uas: bool = True
    measure_online_errors: bool = False
    full_context: bool = False  # research flag: ATT context includes pruned tokens
    oracle_final: np.ndarray | None = None


@dataclass
class ModuleRecord:
    l: int
    m: str
    decision: str  # "full", "reuse" or "prune"
    rate: float
    kept_fraction: float
    flops: int
    delta: float | None = None
    cache_error: float | None = None
    fallback: bool = False
    cache_age: int | None = None
    oldest_substitute: int | None = None
    measured_error: float | None = None


@dataclass
class StepRecord:
    timestep: int
    kind: str
    lower_anchor: int | None
    interval: int | None
    modules: list = field(default_factory=list)


@dataclass
class RunReport:
    steps: list
    totals: dict
    comparison: dict
    config: dict
    measured: bool = False

    def module_records(self, kind=None):
        for s in self.steps:
            if kind is None or s.kind == kind:
                for r in s.modules:
                    yield s, r

    def to_dict(self):
        return {
            "config": self.config,
            "totals": self.totals,
            "comparison": self.comparison,
            "measured": self.measured,
            "steps": [asdict(s) for s in self.steps],
        }


def _rate_stats(steps, n_tok):
    recs = [r for s in steps if s.kind == PRUNED for r in s.modules]
    if not recs:
        return {"pruned_module_calls": 0}
    prunes = [r for r in recs if r.decision == "prune"]
    reuse = [r for r in recs if r.decision == "reuse"]
    return {
        "pruned_module_calls": len(recs),
        "prune_decisions": len(prunes),
        "reuse_decisions": len(reuse),
        "reuse_fallbacks": sum(r.fallback for r in recs),
        "mean_assigned_rate": float(np.mean([r.rate for r in recs])),
        "mean_realized_rate": float(np.mean([1.0 - r.kept_fraction for r in prunes]))
        if prunes else None,
    }


def run_accelerated(model, schedule, tables, params: uas.UasParams, x_T, options=None):
    options = options or RunOptions()
    tables.check_model(model)
    schedule.validate(model.T)
    T, L, n_tok, d = model.T, model.L, model.n_tok, model.d
    x = np.array(x_T, dtype=np.float64)
    if x.shape != (n_tok, d):
        raise ShapeError(f"x_T shape {x.shape} != {(n_tok, d)}")
    _check_finite(x, T, "initial state")
    anchors = schedule.anchor_set

    cache = np.zeros((L, 2, n_tok, d))
    origin = np.zeros((L, 2), dtype=np.int64)
    refresh = np.zeros((L, 2, n_tok), dtype=np.int64)
    steps = []
    flops_total = 0

    for t in range(T, 0, -1):
        cond = model.condition(t)
        h = x
        if t in anchors:
            rec = StepRecord(t, ANCHOR, None, None)
        else:
            t_low, n = schedule.lower_anchor(t)
            rec = StepRecord(t, PRUNED, t_low, n)
        for l in range(1, L + 1):
            for m in MODULE_KINDS:
                li, mi = l - 1, int(m)
                if rec.kind == ANCHOR:
                    b = forward_module(model, l, m, h, cond)
                    cache[li, mi] = b
                    origin[li, mi] = t
                    refresh[li, mi] = t
                    f = flops_proxy(n_tok, d, m, n_tok)
                    mr = ModuleRecord(l, m.name, "full", 0.0, 1.0, f)
                else:
                    mr, b = _pruned_module(model, tables, params, options, rec, l, m, h, cond,
                                           cache, origin, refresh)
                flops_total += mr.flops
                rec.modules.append(mr)
                h = h + b
        eps = model.epsilon_head(h)
        x = denoise_update(x, eps, t, model.schedule)
        _check_finite(x, t, "state")
        steps.append(rec)

    oracle = options.oracle_final
    if oracle is None:
        oracle = run_full_trajectory(model, x_T).final
    full = T * full_step_flops(model)
    totals = {
        "flops_proxy_total": int(flops_total),
        "flops_proxy_full_run": int(full),
        "speedup_ratio": full / flops_total,
        "flops_ratio": flops_total / full,
    }
    totals.update(_rate_stats(steps, n_tok))
    cmp = compare(x, oracle)
    report = RunReport(
        steps=steps,
        totals=totals,
        comparison={"final_cosine_distance": cmp["cosine_distance"],
                    "final_relative_l2": cmp["relative_l2"]},
        config={
            "schedule": {"anchors": list(schedule.anchors), "intervals": list(schedule.intervals)},
            "params": asdict(params),
            "use_uas": options.use_uas,
            "full_context": options.full_context,
            "model_fingerprint": model.fingerprint.hex(),
        },
        measured=options.measure_online_errors,
    )
    return x, report


def _pruned_module(model, tables, params, options, rec, l, m, h, cond, cache, origin, refresh):
    li, mi = l - 1, int(m)
    t = rec.timestep
    n_tok, d = model.n_tok, model.d
    age = int(origin[li, mi]) - t
    if options.use_uas:
        dec = uas.decide(tables, t, rec.lower_anchor, l, m, rec.interval, params, h)
    else:
        dec = None
    b = cache[li, mi].copy()
    if dec is not None and dec.is_prune:
        kept = dec.kept
        part = forward_module(model, l, m, h, cond, kept=kept, full_context=options.full_context)
        b[kept] = part[kept]
        cache[li, mi, kept] = part[kept]
        substituted = np.ones(n_tok, dtype=bool)
        substituted[kept] = False
        oldest = int(refresh[li, mi][substituted].max()) if substituted.any() else None
        refresh[li, mi, kept] = t
        k = len(kept)
        if options.full_context and m is ModuleKind.ATT:
            f = 2 * k * d * d + 2 * n_tok * d * d + 2 * k * n_tok * d
        else:
            f = flops_proxy(n_tok, d, m, k)
        mr = ModuleRecord(l, m.name, "prune", dec.rate, k / n_tok, f, dec.delta,
                          dec.cache_error, False, age, oldest)
    else:
        oldest = int(refresh[li, mi].max())
        if dec is None:
            mr = ModuleRecord(l, m.name, "reuse", 0.0, 0.0, 0, cache_age=age,
                              oldest_substitute=oldest)
        else:
            mr = ModuleRecord(l, m.name, "reuse", dec.rate, 0.0, 0, dec.delta,
                              dec.cache_error, dec.fallback, age, oldest)
    if options.measure_online_errors:
        # observation only: never feeds back into the run
        truth = forward_module(model, l, m, h, cond)
        mr.measured_error = cosine_distance(b, truth)
    return mr, b


@dataclass(frozen=True)
class Consistency:
    fraction: float
    inside: int
    total: int
    vacuous: bool


def online_consistency_check(report: RunReport, tables, k_sigma=4.0) -> Consistency:
    """Share of online errors inside the offline mean +- k_sigma * std band."""
    if not report.measured:
        raise MissingDataError("report has no online error measurements")
    inside = total = 0
    for s, r in report.module_records(PRUNED):
        if r.measured_error is None:
            raise MissingDataError(f"missing measurement at t={s.timestep}, l={r.l}, m={r.m}")
        m = ModuleKind[r.m]
        if r.decision == "prune":
            mean, std = uas.pruning_band(tables, s.timestep, r.l, m, r.rate)
        else:
            mean = tables.caching(s.timestep, r.l, m, r.cache_age)
            std = tables.caching_sd(s.timestep, r.l, m, r.cache_age)
        total += 1
        if mean - k_sigma * std <= r.measured_error <= mean + k_sigma * std:
            inside += 1
    if total == 0:
        return Consistency(1.0, 0, 0, True)
    return Consistency(inside / total, inside, total, False)


@dataclass(frozen=True)
class SweepRecord:
    ns: int
    variant: str
    seed: int
    schedule_cost: float
    flops_ratio: float
    cos_dist: float
    rel_l2: float


def sweep(model, tables, ns_list, params, seeds, candidates=dcs.DEFAULT_CANDIDATES,
          jobs=1, variants=VARIANTS):
    """SODA vs uniform-interval schedules, each with and without UAS."""
    schedules = {}
    for ns in ns_list:
        try:
            schedules[ns, "soda"] = dcs.optimize(tables, ns, candidates)
        except InfeasibleError as exc:
            log.warning("skipping N_s=%d for the SODA schedule: %s", ns, exc)
        iv = dcs.uniform_intervals(model.T, ns)
        sched = dcs.schedule_from_intervals(iv, model.T)
        try:
            cost = dcs.schedule_cost(tables, sched)
        except AbsentCellError as exc:
            log.warning("skipping N_s=%d for the uniform schedule: %s", ns, exc)
        else:
            schedules[ns, "uniform"] = dcs._with_cost(sched, cost)

    oracles = {}
    states = {}
    for seed in seeds:
        states[seed] = initial_state_for_seed(model, seed)
        oracles[seed] = run_full_trajectory(model, states[seed]).final

    jobs_list = []
    for ns in ns_list:
        for variant in variants:
            base = variant.split("+")[0]
            if (ns, base) not in schedules:
                continue
            for seed in seeds:
                jobs_list.append((ns, variant, seed))

    def work(job):
        ns, variant, seed = job
        base = variant.split("+")[0]
        sched = schedules[ns, base]
        opts = RunOptions(use_uas=variant.endswith("+uas"), oracle_final=oracles[seed])
        _, rep = run_accelerated(model, sched, tables, params, states[seed], opts)
        return SweepRecord(ns, variant, seed, sched.total_cost, rep.totals["flops_ratio"],
                           rep.comparison["final_cosine_distance"],
                           rep.comparison["final_relative_l2"])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(work, jobs_list))
    else:
        records = [work(j) for j in jobs_list]
    order = {v: i for i, v in enumerate(VARIANTS)}
    records.sort(key=lambda r: (r.ns, order.get(r.variant, len(order)), r.seed))
    return records


def sweep_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in records:
        w.writerow([r.ns, r.variant, r.seed, repr(float(r.schedule_cost)),
                    repr(float(r.flops_ratio)), repr(float(r.cos_dist)), repr(float(r.rel_l2))])
    return buf.getvalue()
