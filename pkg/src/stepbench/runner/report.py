"""Report rendering from a result store: CSV table, text grid, per-fold spreads."""
from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from pathlib import Path

from ..errors import StepError
from ..metrics import REGISTRY
from ..storage import atomic_write_bytes

COLUMNS = ("case_hash", "corpus", "data_params", "split", "fold", "model", "kind", "source", "transfer",
           "metric", "direction", "seed", "k", "status", "reason", "value", "n")
SPREAD_COLUMNS = ("corpus", "data_params", "split", "model", "source", "metric", "scope", "fold",
                  "count", "min", "median", "max", "spread")


def read_store(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "results.jsonl"
    if not path.exists():
        raise StepError("EMPTY_STORE", f"no result store at {path}")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise StepError("EMPTY_STORE", f"{path} holds no records")
    return records


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def results_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def _label(metric: str) -> str:
    m = REGISTRY.get(metric)
    arrow = "(min)" if m is None or m.direction == "min" else "(max)"
    return f"{m.label if m else metric} {arrow}"


def grid_text(records: list[dict]) -> str:
    """Models x metrics for every (corpus, data params, split) condition. Values
    average over seeds and folds; '*' marks the best entry of each column."""
    blocks: dict[tuple, dict[tuple, dict[str, list[float]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    metrics: dict[tuple, list[str]] = defaultdict(list)
    status: dict[tuple, dict[tuple, dict[str, str]]] = defaultdict(lambda: defaultdict(dict))
    for r in records:
        cond = (r["corpus"], r["data_params"], r["split"])
        row = (r["model"], r.get("source") or "")
        if r["metric"] not in metrics[cond]:
            metrics[cond].append(r["metric"])
        if r["status"] == "ok":
            blocks[cond][row][r["metric"]].append(r["value"])
        else:
            status[cond][row].setdefault(r["metric"], r["status"] if r["status"] == "failed" else r["reason"])
        blocks[cond].setdefault(row, defaultdict(list))
    out = []
    for cond in blocks:
        rows = list(blocks[cond])
        ms = metrics[cond]
        means = {(row, m): (sum(v) / len(v)) for row in rows for m, v in blocks[cond][row].items() if v}
        best = {}
        for m in ms:
            vals = [means[(row, m)] for row in rows if (row, m) in means]
            if vals:
                best[m] = min(vals) if REGISTRY[m].direction == "min" else max(vals)
        header = ["model"] + [_label(m) for m in ms]
        table = [header]
        for row in rows:
            name = row[0] + (f" [{row[1]}]" if row[1] else "")
            cells = [name]
            for m in ms:
                if (row, m) in means:
                    v = means[(row, m)]
                    cells.append(f"{v:.4f}" + ("*" if v == best.get(m) else ""))
                else:
                    cells.append(status[cond][row].get(m, "-"))
            table.append(cells)
        widths = [max(len(r[i]) for r in table) for i in range(len(header))]
        out.append(f"== corpus={cond[0]}  data_params={cond[1]}  split={cond[2]} ==")
        for i, r in enumerate(table):
            out.append(" | ".join(c.ljust(widths[j]) for j, c in enumerate(r)).rstrip())
            if i == 0:
                out.append("-+-".join("-" * w for w in widths))
        out.append("")
    return "\n".join(out)


def spread_rows(records: list[dict]) -> list[dict]:
    """Min / median / max across seeds for each fold, and across all folds and seeds."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in records:
        if r["status"] == "ok":
            groups[(r["corpus"], r["data_params"], r["split"], r["model"], r.get("source") or "",
                    r["metric"])].append(r)
    rows = []
    for key, rs in groups.items():
        by_fold: dict = defaultdict(list)
        for r in rs:
            by_fold[r.get("fold")].append(r["value"])
        scopes = [("seeds", f, v) for f, v in by_fold.items()] + [("all", None, [r["value"] for r in rs])]
        for scope, fold, vals in scopes:
            rows.append(dict(zip(SPREAD_COLUMNS[:6], key), scope=scope, fold=fold, count=len(vals),
                             min=min(vals), median=statistics.median(vals), max=max(vals),
                             spread=max(vals) - min(vals)))
    return rows


def spread_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPREAD_COLUMNS)
    for r in spread_rows(records):
        w.writerow([_fmt(r[c]) for c in SPREAD_COLUMNS])
    return buf.getvalue()


def emit_report(store, out_dir=None) -> dict[str, Path]:
    """Write results.csv, grid.txt and spread.csv next to (or into ``out_dir`` for) the store."""
    records = read_store(store)
    store = Path(store)
    out = Path(out_dir) if out_dir is not None else (store if store.is_dir() else store.parent)
    files = {"results.csv": results_csv(records), "grid.txt": grid_text(records),
             "spread.csv": spread_csv(records)}
    paths = {}
    for name, text in files.items():
        paths[name] = out / name
        atomic_write_bytes(paths[name], text.encode("utf-8"))
    return paths
