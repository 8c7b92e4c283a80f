"""Run the shipped study plans and print their report grids.

    python3 scripts/run_studies.py                 # every plan in plans/
    python3 scripts/run_studies.py attack variability
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from stepbench.runner import parse_simulation_file, run_plan

PLANS = Path(__file__).resolve().parents[1] / "plans"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="plan names (file stems); default all")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--cache-dir", default=None)
    args = ap.parse_args(argv)
    paths = [PLANS / f"{n}.yaml" for n in args.names] or sorted(PLANS.glob("*.yaml"))
    failed = 0
    for path in paths:
        plan = parse_simulation_file(path)
        t = time.perf_counter()
        records, runner = run_plan(plan, workers=args.workers, cache_dir=args.cache_dir)
        bad = [r for r in records if r.status == "failed"]
        failed += len(bad)
        print(f"## {plan.name}: {len(records)} cases, {runner.trainings} trainings, "
              f"{len(bad)} failed, {time.perf_counter() - t:.1f}s -> {plan.output_dir}")
        print((plan.output_dir / "grid.txt").read_text(encoding="utf-8"))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
