"""Command line entry point: ``step run|report|cache|attack|plugin-test``.

Exit codes: 0 success, 2 configuration error, 3 partial failure.
"""
from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

from .errors import ConfigError, StepError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


def _cmd_run(args) -> int:
    from .runner import parse_simulation_file, run_plan
    plan = parse_simulation_file(args.plan)
    records, runner = run_plan(plan, workers=args.workers, output_dir=args.output_dir, cache_dir=args.cache_dir)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.status] = counts.get(r.status, 0) + 1
    out = Path(args.output_dir or plan.output_dir)
    print(f"{len(records)} cases: " + ", ".join(f"{n} {s}" for s, n in sorted(counts.items()))
          + f"; {runner.trainings} trainings; store {out / 'results.jsonl'}")
    for r in records:
        if r.status == "failed":
            print(f"  failed case {r.case.index} ({r.case.case_hash[:12]}): {r.message}", file=sys.stderr)
    return EXIT_PARTIAL if counts.get("failed") else EXIT_OK


def _cmd_report(args) -> int:
    from .runner import emit_report
    for name, path in emit_report(args.store, args.output_dir).items():
        print(f"wrote {path}")
    if not args.quiet:
        print((Path(args.output_dir or (args.store if Path(args.store).is_dir() else Path(args.store).parent))
               / "grid.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_cache(args) -> int:
    from .runner import gc_cache, parse_simulation_file, plan_cache_keys, verify_cache
    if args.action == "verify":
        bad = verify_cache(args.cache_dir)
        for p, reason in bad:
            print(f"corrupt {p}: {reason}")
        print(f"{len(bad)} corrupt entries")
        return EXIT_PARTIAL if bad else EXIT_OK
    keep = None
    if args.plan:
        keep = {}
        for p in args.plan:
            for kind, keys in plan_cache_keys(parse_simulation_file(p)).items():
                keep.setdefault(kind, set()).update(keys)
    removed = gc_cache(args.cache_dir, keep, dry_run=args.dry_run)
    for p in removed:
        print(("would remove " if args.dry_run else "removed ") + str(p))
    print(f"{len(removed)} entries {'to remove' if args.dry_run else 'removed'}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    from .runner import parse_simulation_file, run_attacks
    plan = parse_simulation_file(args.plan)
    n = run_attacks(plan, cache_dir=args.cache_dir, output_dir=args.output_dir)
    print(f"built attacked test sets for {n} (split, seed) pairs")
    return EXIT_OK


def conformance_fixture(n_scenes: int = 4):
    """Small noiseless straight-road corpus for protocol checks."""
    from .ingestion import SyntheticConfig, generate_synthetic
    from .sampling import assemble_corpus
    from .scene import DataParams
    ss = generate_synthetic(SyntheticConfig(scene_count=n_scenes, agents_per_scene=2, duration=8.0, seed=7,
                                            dataset_id="fixture"))
    dp = DataParams(n_I=5, n_O=6, dt=0.5, t0_policy="regular_spacing", gap=2.0)
    return list(assemble_corpus([(ss, None)], dp).samples)


def _cmd_plugin_test(args) -> int:
    from .predictors.plugin import run_conformance
    command = args.command if len(args.command) > 1 else shlex.split(args.command[0])
    results = run_conformance(command, conformance_fixture(), builtin_kind=args.builtin, k=args.k)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="step", description="Trajectory prediction benchmark runner.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run every case of a simulation file")
    r.add_argument("plan")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--output-dir", default=None)
    r.add_argument("--cache-dir", default=None)
    r.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help="render tables from a result store")
    rep.add_argument("store", help="results.jsonl or the directory holding it")
    rep.add_argument("--output-dir", default=None)
    rep.add_argument("-q", "--quiet", action="store_true", help="do not print the grid")
    rep.set_defaults(fn=_cmd_report)

    c = sub.add_parser("cache", help="verify or garbage-collect a cache directory")
    c.add_argument("action", choices=("gc", "verify"))
    c.add_argument("cache_dir")
    c.add_argument("--plan", action="append", help="gc: keep only entries these plans reference")
    c.add_argument("--dry-run", action="store_true")
    c.set_defaults(fn=_cmd_cache)

    a = sub.add_parser("attack", help="build attacked test sets only")
    a.add_argument("plan")
    a.add_argument("--output-dir", default=None)
    a.add_argument("--cache-dir", default=None)
    a.set_defaults(fn=_cmd_attack)

    t = sub.add_parser("plugin-test", help="run the plugin conformance suite")
    t.add_argument("command", nargs="+", help="plugin command (one quoted string or separate words)")
    t.add_argument("--builtin", default=None, help="builtin kind the plugin must match bit-exactly")
    t.add_argument("--k", type=int, default=6)
    t.set_defaults(fn=_cmd_plugin_test)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
