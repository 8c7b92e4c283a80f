"""Error increase under attack: attacked / clean value per budget and metric.

Reads the result store of the attack study (run it first with
``python3 scripts/run_studies.py attack``).
"""
from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from pathlib import Path

from stepbench.runner import parse_simulation_file, read_store

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--plan", default=str(ROOT / "plans" / "attack.yaml"))
    args = ap.parse_args(argv)
    plan = parse_simulation_file(args.plan)
    # corpus id -> budget of its (single) attack member, None for clean corpora
    budget = {}
    for c in plan.corpora:
        perts = [plan.perturbations[p] for _, p in c.members if p is not None]
        budget[c.corpus_id] = perts[0].d_max if perts else None
    values = defaultdict(dict)
    for r in read_store(plan.output_dir):
        if r["status"] == "ok":
            values[(r["model"], r["metric"], r["data_params"], r["seed"])][r["corpus"]] = r["value"]
    print(f"{'model':8} {'metric':10} {'d_max':>6} {'clean':>9} {'attacked':>9} {'ratio':>7}")
    for (model, metric, _, _), by_corpus in sorted(values.items()):
        clean = [v for c, v in by_corpus.items() if budget[c] is None]
        if not clean:
            continue
        for c, v in sorted(by_corpus.items(), key=lambda kv: budget[kv[0]] or 0.0):
            if budget[c] is not None:
                print(f"{model:8} {metric:10} {budget[c]:6.2f} {clean[0]:9.4f} {v:9.4f} {v / clean[0]:7.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
