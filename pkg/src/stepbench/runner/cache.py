"""Cache maintenance: integrity verification and garbage collection."""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import StepError
from ..storage import decode_container

KINDS = ("corpora", "splits", "models", "attacks", "predictions", "metrics")


def _entries(cache_dir: Path):
    for kind in KINDS:
        d = cache_dir / kind
        if d.is_dir():
            for p in sorted(d.iterdir()):
                if p.is_file():
                    yield kind, p


def _check(path: Path) -> str | None:
    """None if the entry is intact, else a reason."""
    data = path.read_bytes()
    if path.suffix in (".bin", ".ckpt"):
        try:
            decode_container(data, data[:8])
        except StepError as exc:
            return str(exc)
        return None
    if path.suffix in (".json",):
        try:
            json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return f"unreadable JSON: {exc}"
    return None


def verify_cache(cache_dir) -> list[tuple[Path, str]]:
    """All corrupt entries with the reason each failed."""
    cache_dir = Path(cache_dir)
    bad = []
    for _, p in _entries(cache_dir):
        if p.name.endswith(".tmp"):
            continue
        reason = _check(p)
        if reason:
            bad.append((p, reason))
    return bad


def gc_cache(cache_dir, keep: dict[str, set[str]] | None = None, dry_run: bool = False) -> list[Path]:
    """Remove temp leftovers, corrupt entries and, given ``keep`` (kind -> keys,
    see :func:`plan_cache_keys`), every entry no listed plan references."""
    cache_dir = Path(cache_dir)
    corrupt = {p for p, _ in verify_cache(cache_dir)}
    removed = []
    for kind, p in _entries(cache_dir):
        key = p.name.split(".")[0]
        drop = p.name.endswith(".tmp") or p in corrupt
        if keep is not None and key not in keep.get(kind, set()):
            drop = True
        if drop:
            removed.append(p)
            if not dry_run:
                p.unlink()
    return removed
