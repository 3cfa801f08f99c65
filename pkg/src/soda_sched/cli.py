"""Command-line entry point: ``soda-sched <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import dcs, pipeline, store, uas
from .errors import EXIT_CODES, ConfigError, SodaError
from .ofs import DEFAULT_N_MAX, DEFAULT_SAMPLES, build_tables, default_jobs
from .toy_dit import ToyDitConfig, build_model

log = logging.getLogger("soda_sched")

EPILOG = """exit status:
  0  success
  2  config error (bad flag, file or value)
  3  infeasible request (no schedule, unreachable target rate)
  4  corrupted or incompatible file
  5  numeric failure (non-finite state)
  6  resource limit exceeded
"""


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    """``"1,2,5-7"`` -> (1, 2, 5, 6, 7)."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 1,2,5-7, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(out)


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed {v} outside [0, 2**64)")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="soda-sched",
        description="Sensitivity-table building, cache scheduling and accelerated "
                    "sampling on a toy diffusion transformer.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and echo settings")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    b = sub.add_parser("ofs-build", help="profile sensitivity tables", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    b.add_argument("--config", type=Path, help="toy model config JSON (defaults built in)")
    b.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    b.add_argument("--n-max", type=int, default=DEFAULT_N_MAX)
    b.add_argument("--seed", type=_u64, help="overrides the config seed; also seeds samples and pruned sets")
    b.add_argument("--jobs", type=_positive)
    b.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("dcs-schedule", help="optimal cache schedule", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--tables", type=Path, required=True)
    s.add_argument("--ns", type=int, required=True)
    s.add_argument("--candidates", type=_int_list, default=dcs.DEFAULT_CANDIDATES)
    s.add_argument("--phase-constraint", type=_bool, default=False)
    s.add_argument("--xi", choices=dcs.XI_MODES, default="linear")
    s.add_argument("--out", type=Path)

    o = sub.add_parser("dcs-oracle", help="exhaustive schedule search", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    o.add_argument("--tables", type=Path, required=True)
    o.add_argument("--ns", type=int, required=True)
    o.add_argument("--candidates", type=_int_list, default=dcs.DEFAULT_CANDIDATES)
    o.add_argument("--limit", type=int, default=dcs.DEFAULT_ENUM_LIMIT)
    o.add_argument("--xi", choices=dcs.XI_MODES, default="linear")

    r = sub.add_parser("run", help="accelerated sampling run", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    r.add_argument("--config", type=Path, help="model config (default: the tables' snapshot)")
    r.add_argument("--tables", type=Path, required=True)
    r.add_argument("--schedule", type=Path, required=True)
    r.add_argument("--lambda", dest="lam", type=float, default=0.3)
    rate = r.add_mutually_exclusive_group()
    rate.add_argument("--beta", type=float)
    rate.add_argument("--solve-beta-target", type=float, metavar="RATE",
                      help="solve beta for this mean pruning rate")
    rate.add_argument("--speedup", type=float, metavar="R",
                      help="solve beta for the rate implied by a speed-up factor")
    r.add_argument("--convention", choices=("pruned", "kept"), default="pruned",
                   help="how --speedup maps to a rate")
    r.add_argument("--alpha-max", type=float, default=0.95)
    r.add_argument("--no-uas", action="store_true", help="reuse the cache wholesale between anchors")
    r.add_argument("--seed", type=_u64, default=0, help="initial-state seed")
    r.add_argument("--measure-online", type=_bool, default=False)
    r.add_argument("--k-sigma", type=float, default=4.0)
    r.add_argument("--report", type=Path)

    w = sub.add_parser("sweep", help="SODA vs uniform schedules over N_s and seeds",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    w.add_argument("--config", type=Path)
    w.add_argument("--tables", type=Path, required=True)
    w.add_argument("--ns-list", type=_int_list, required=True)
    w.add_argument("--seeds", type=_int_list, default=tuple(range(20)))
    w.add_argument("--candidates", type=_int_list, default=dcs.DEFAULT_CANDIDATES)
    w.add_argument("--lambda", dest="lam", type=float, default=0.3)
    w.add_argument("--beta", type=float, default=0.4)
    w.add_argument("--jobs", type=_positive, help="worker threads (default: $SODA_SCHED_JOBS or 1)")
    w.add_argument("--out", type=Path, required=True)

    i = sub.add_parser("inspect", help="summarize a tables, schedule or report file")
    i.add_argument("path", type=Path)
    return p


def _model_for(args, tables):
    cfg = ToyDitConfig.load(args.config) if args.config else tables.config
    model = build_model(cfg)
    tables.check_model(model)
    return model


def cmd_ofs_build(args):
    cfg = ToyDitConfig.load(args.config) if args.config else ToyDitConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    master = cfg.seed
    jobs = args.jobs or default_jobs()
    log.info("config %s; samples=%d n_max=%d jobs=%d", cfg.to_dict(), args.samples, args.n_max, jobs)
    model = build_model(cfg)
    start = time.perf_counter()
    tables = build_tables(model, samples=args.samples, n_max=args.n_max,
                          master_seed=master, jobs=jobs)
    elapsed = time.perf_counter() - start
    store.save_tables(tables, args.out)
    A = len(tables.alpha_grid)
    populated, absent = store.table_cell_counts(tables.T, tables.L, 2, tables.n_max, A)
    size = args.out.stat().st_size
    print(f"tables: {args.out}")
    print(f"populated cells: {populated}")
    print(f"absent cells: {absent}")
    print(f"file bytes: {size} (header {size - store.table_tensor_bytes(tables.T, tables.L, 2, tables.n_max, A)})")
    print(f"fingerprint: {tables.model_fingerprint.hex()}")
    print(f"elapsed: {elapsed:.2f} s", file=sys.stderr)
    return 0


def _print_schedule(sched):
    print("anchors:", " ".join(map(str, sched.anchors)))
    print("intervals:", " ".join(map(str, sched.intervals)))
    print(f"total cost: {sched.total_cost!r}")


def cmd_dcs_schedule(args):
    tables = store.load_tables(args.tables)
    sched = dcs.optimize(tables, args.ns, args.candidates,
                         phase_constrained=args.phase_constraint, xi=args.xi)
    _print_schedule(sched)
    if sched.phase_constrained:
        print(f"special phase steps: {len(sched.phase)}")
    if args.out:
        store.save_schedule(sched, args.out)
    return 0


def cmd_dcs_oracle(args):
    tables = store.load_tables(args.tables)
    ref = dcs.brute_force_schedule(tables, args.ns, args.candidates, args.limit, xi=args.xi)
    dp = dcs.optimize(tables, args.ns, args.candidates, xi=args.xi)
    _print_schedule(ref)
    same = ref.intervals == dp.intervals and ref.total_cost == dp.total_cost
    print(f"matches optimize: {'yes' if same else 'no'}")
    return 0 if same else 1


def cmd_run(args):
    tables = store.load_tables(args.tables)
    sched = store.load_schedule(args.schedule)
    model = _model_for(args, tables)
    beta = args.beta
    target = args.solve_beta_target
    if args.speedup is not None:
        target = uas.target_from_speedup(args.speedup, args.convention)
    if target is not None:
        beta = uas.solve_beta(tables, sched, args.lam, target, args.alpha_max)
        log.info("solved beta=%r for target rate %r", beta, target)
    elif beta is None:
        beta = 0.4
    params = uas.UasParams(lam=args.lam, beta=beta, alpha_max=args.alpha_max)
    x_T = pipeline.initial_state_for_seed(model, args.seed)
    opts = pipeline.RunOptions(use_uas=not args.no_uas, measure_online_errors=args.measure_online)
    _, report = pipeline.run_accelerated(model, sched, tables, params, x_T, opts)
    report.config["seed"] = args.seed
    report.config["target_rate"] = target
    tot, cmp = report.totals, report.comparison
    print(f"beta: {beta!r}")
    print(f"speedup_ratio: {tot['speedup_ratio']!r}")
    print(f"flops_ratio: {tot['flops_ratio']!r}")
    if tot.get("mean_realized_rate") is not None:
        print(f"mean pruning rate: {tot['mean_realized_rate']!r}")
        print(f"reuse fallbacks: {tot['reuse_fallbacks']}")
    print(f"cos_dist: {cmp['final_cosine_distance']!r}")
    print(f"rel_l2: {cmp['final_relative_l2']!r}")
    if args.measure_online:
        c = pipeline.online_consistency_check(report, tables, args.k_sigma)
        report.comparison["online_consistency"] = c.fraction
        print(f"online consistency: {c.inside}/{c.total} = {c.fraction!r}"
              + (" (vacuous)" if c.vacuous else ""))
    if args.report:
        store.save_report(report, args.report)
    return 0


def cmd_sweep(args):
    tables = store.load_tables(args.tables)
    model = _model_for(args, tables)
    params = uas.UasParams(lam=args.lam, beta=args.beta)
    jobs = args.jobs or default_jobs()
    records = pipeline.sweep(model, tables, args.ns_list, params, args.seeds,
                             candidates=args.candidates, jobs=jobs)
    text = pipeline.sweep_csv(records)
    store._atomic_write(args.out, text.encode())
    print(f"{'ns':>4} {'variant':<12} {'runs':>4} {'mean cos_dist':>14} {'flops_ratio':>11}")
    groups = {}
    for r in records:
        groups.setdefault((r.ns, r.variant), []).append(r)
    for (ns, variant), rs in groups.items():
        mean = sum(r.cos_dist for r in rs) / len(rs)
        print(f"{ns:>4} {variant:<12} {len(rs):>4} {mean:>14.6e} {rs[0].flops_ratio:>11.4f}")
    return 0


def cmd_inspect(args):
    with open(args.path, "rb") as fh:
        head = fh.read(len(store.TABLE_MAGIC))
    if head == store.TABLE_MAGIC:
        t = store.load_tables(args.path)
        print(f"tables: T={t.T} L={t.L} n_max={t.n_max} alphas={len(t.alpha_grid)} "
              f"samples={t.sample_count}")
        print(f"fingerprint: {t.model_fingerprint.hex()}")
        print(f"meta: {json.dumps(t.meta, sort_keys=True)}")
        return 0
    try:
        doc = json.loads(Path(args.path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ConfigError(f"{args.path}: not a tables, schedule or report file") from None
    if isinstance(doc, dict) and "anchors" in doc:
        _print_schedule(store.schedule_from_dict(doc))
    elif isinstance(doc, dict) and "totals" in doc:
        print(json.dumps({"totals": doc["totals"], "comparison": doc["comparison"]},
                         indent=2, sort_keys=True))
    else:
        raise ConfigError(f"{args.path}: unrecognized JSON document")
    return 0


COMMANDS = {
    "ofs-build": cmd_ofs_build,
    "dcs-schedule": cmd_dcs_schedule,
    "dcs-oracle": cmd_dcs_oracle,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.verbose:
        log.info("arguments: %s", {k: str(v) for k, v in sorted(vars(args).items())})
    try:
        return COMMANDS[args.command](args)
    except SodaError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]


if __name__ == "__main__":
    sys.exit(main())
