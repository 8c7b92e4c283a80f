"""Train/test splitting procedures.

All methods operate on samples. With ``scene_coherent`` (default on) every
sample of one scene lands on the same side, because samples of neighbouring
t0 share most of their trajectories and would otherwise leak test data into
training.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StepError
from .sampling import Corpus, Sample
from .storage import atomic_write_bytes

METHODS = ("random", "by_location", "cross_validation", "by_criticality", "predefined")
SPLIT_FORMAT = "step-split/1"


@dataclass(frozen=True)
class SplitSpec:
    method: str
    test_fraction: float = 0.2
    held_out: tuple[str, ...] = ()
    held_out_kind: str = "location"  # location | dataset
    n_folds: int = 9
    fold_index: int = 0
    label_key: str = "split"
    scene_coherent: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise StepError("INVALID_PARAMS", f"unknown split method {self.method!r}")
        if self.method in ("random", "by_criticality") and not 0 < self.test_fraction < 1:
            raise StepError("INVALID_PARAMS", "test_fraction must lie in (0, 1)")
        if self.method == "cross_validation" and not (self.n_folds >= 2 and 0 <= self.fold_index < self.n_folds):
            raise StepError("INVALID_PARAMS", "need n_folds >= 2 and 0 <= fold_index < n_folds")
        if self.method == "by_location":
            if not self.held_out:
                raise StepError("INVALID_PARAMS", "by_location needs held_out values")
            if self.held_out_kind not in ("location", "dataset"):
                raise StepError("INVALID_PARAMS", "held_out_kind must be 'location' or 'dataset'")

    def to_dict(self) -> dict:
        d = {"method": self.method, "scene_coherent": self.scene_coherent, "seed": self.seed}
        if self.method in ("random", "by_criticality"):
            d["test_fraction"] = self.test_fraction
        elif self.method == "by_location":
            d.update(held_out=list(self.held_out), held_out_kind=self.held_out_kind)
        elif self.method == "cross_validation":
            d.update(n_folds=self.n_folds, fold_index=self.fold_index)
        else:
            d["label_key"] = self.label_key
        return d


@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    spec: SplitSpec
    seed: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise StepError("INVALID_SPLIT", "train and test overlap")


def _target_size(n: int, fraction: float) -> int:
    return int(round(n * fraction))  # round half to even


def _groups(samples, coherent: bool) -> list[list[int]]:
    """Index groups in corpus order: one per scene, or one per sample."""
    if not coherent:
        return [[i] for i in range(len(samples))]
    order: dict[tuple[str, str], list[int]] = {}
    for i, s in enumerate(samples):
        order.setdefault((s.dataset_id, s.scene_id), []).append(i)
    return list(order.values())


def _make(samples, test_idx, spec: SplitSpec, seed: int, **info) -> Split:
    test = set(test_idx)
    if not test or len(test) == len(samples):
        raise StepError("EMPTY_SIDE", f"{spec.method}: split leaves one side empty")
    train_ids = tuple(s.sample_id for i, s in enumerate(samples) if i not in test)
    test_ids = tuple(s.sample_id for i, s in enumerate(samples) if i in test)
    return Split(train_ids, test_ids, spec, seed, info)


def _fill(groups: list[list[int]], target: int) -> list[int]:
    """Take groups in the given order without overshooting ``target`` samples."""
    chosen: list[int] = []
    for g in groups:
        if len(chosen) >= target:
            break
        if len(chosen) + len(g) <= target:
            chosen += g
    if not chosen and groups and target > 0:
        chosen = list(groups[0])
    return chosen


def _samples(corpus) -> tuple[Sample, ...]:
    return corpus.samples if isinstance(corpus, Corpus) else tuple(corpus)


def split_random(corpus, test_fraction: float, seed: int = 0, scene_coherent: bool = True) -> Split:
    samples = _samples(corpus)
    spec = SplitSpec("random", test_fraction=test_fraction, scene_coherent=scene_coherent, seed=seed)
    if not samples:
        raise StepError("EMPTY_SIDE", "empty corpus")
    groups = _groups(samples, scene_coherent)
    perm = np.random.default_rng(seed).permutation(len(groups))
    target = _target_size(len(samples), test_fraction)
    return _make(samples, _fill([groups[i] for i in perm], target), spec, seed)


def split_by_location(corpus, held_out, kind: str = "location") -> Split:
    samples = _samples(corpus)
    held = tuple(held_out)
    spec = SplitSpec("by_location", held_out=held, held_out_kind=kind)
    key = (lambda s: s.location_id) if kind == "location" else (lambda s: s.dataset_id)
    test = [i for i, s in enumerate(samples) if key(s) in held]
    if not test or len(test) == len(samples):
        raise StepError("INFEASIBLE", f"held-out {kind}s {list(held)} leave one side empty")
    return _make(samples, test, spec, 0)


def cross_validation_folds(corpus, n_folds: int, seed: int = 0, scene_coherent: bool = True) -> list[list[int]]:
    """Index folds defined by one seeded permutation; sizes differ by at most one
    when groups are single samples, otherwise groups are balanced greedily."""
    samples = _samples(corpus)
    if len(samples) < n_folds:
        raise StepError("INFEASIBLE", f"{len(samples)} samples cannot fill {n_folds} folds")
    groups = _groups(samples, scene_coherent)
    if len(groups) < n_folds:
        raise StepError("INFEASIBLE", f"{len(groups)} scenes cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(groups))
    shuffled = [groups[i] for i in perm]
    # largest groups first (stable, so equal sizes keep the shuffled order), each into the smallest fold
    shuffled.sort(key=len, reverse=True)
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for g in shuffled:
        j = min(range(n_folds), key=lambda f: (len(folds[f]), f))
        folds[j] += g
    return [sorted(f) for f in folds]


def split_cross_validation(corpus, n_folds: int, fold_index: int, seed: int = 0,
                           scene_coherent: bool = True) -> Split:
    samples = _samples(corpus)
    spec = SplitSpec("cross_validation", n_folds=n_folds, fold_index=fold_index,
                     scene_coherent=scene_coherent, seed=seed)
    folds = cross_validation_folds(samples, n_folds, seed, scene_coherent)
    return _make(samples, folds[fold_index], spec, seed, fold_sizes=[len(f) for f in folds])


def compute_criticality(sample: Sample) -> float:
    """Smallest time-to-collision proxy over observed past steps and agent pairs.

    For each pair observed at steps j-1 and j, the closing speed is the rate
    at which their distance shrinks, ``-(dp . dv) / |dp|`` with backward
    difference velocities; the proxy is ``|dp| / closing speed``. Pairs that
    never close give +inf, as does a sample with fewer than two agents.
    """
    past, mask, dt = sample.past, sample.past_mask, sample.dt
    A = past.shape[0]
    if A < 2 or past.shape[1] < 2:
        return math.inf
    vel = (past[:, 1:] - past[:, :-1]) / dt
    ok = mask[:, 1:] & mask[:, :-1]
    pos = past[:, 1:]
    best = math.inf
    for a in range(A):
        for b in range(a + 1, A):
            both = ok[a] & ok[b]
            if not both.any():
                continue
            dp = pos[b, both] - pos[a, both]
            dv = vel[b, both] - vel[a, both]
            dist = np.hypot(dp[:, 0], dp[:, 1])
            if np.any(dist == 0):
                return 0.0
            closing = -np.sum(dp * dv, axis=1) / dist
            closing_pos = closing > 0
            if closing_pos.any():
                best = min(best, float(np.min(dist[closing_pos] / closing[closing_pos])))
    return best


def split_by_criticality(corpus, test_fraction: float, scene_coherent: bool = True) -> Split:
    """Most critical samples (lowest proxy, ties by sample_id) form the test set."""
    samples = _samples(corpus)
    spec = SplitSpec("by_criticality", test_fraction=test_fraction, scene_coherent=scene_coherent)
    if not samples:
        raise StepError("EMPTY_SIDE", "empty corpus")
    crit = [compute_criticality(s) for s in samples]
    groups = _groups(samples, scene_coherent)
    key = lambda g: (min(crit[i] for i in g), min(samples[i].sample_id for i in g))  # noqa: E731
    ordered = sorted(groups, key=key)
    target = _target_size(len(samples), test_fraction)
    return _make(samples, _fill(ordered, target), spec, 0)


def split_predefined(corpus, label_key: str = "split") -> Split:
    samples = _samples(corpus)
    spec = SplitSpec("predefined", label_key=label_key)
    missing = [s.sample_id for s in samples if s.labels.get(label_key) not in ("train", "test")]
    if missing:
        raise StepError("MISSING_LABEL", f"no train/test label under {label_key!r}: {missing}",
                        sample_ids=missing)
    test = [i for i, s in enumerate(samples) if s.labels[label_key] == "test"]
    return _make(samples, test, spec, 0)


def make_split(corpus, spec: SplitSpec) -> Split:
    if spec.method == "random":
        return split_random(corpus, spec.test_fraction, spec.seed, spec.scene_coherent)
    if spec.method == "by_location":
        return split_by_location(corpus, spec.held_out, spec.held_out_kind)
    if spec.method == "cross_validation":
        return split_cross_validation(corpus, spec.n_folds, spec.fold_index, spec.seed, spec.scene_coherent)
    if spec.method == "by_criticality":
        return split_by_criticality(corpus, spec.test_fraction, spec.scene_coherent)
    return split_predefined(corpus, spec.label_key)


# --------------------------------------------------------------------------- files

def split_to_json(split: Split) -> str:
    return json.dumps({"format": SPLIT_FORMAT, "spec": split.spec.to_dict(), "seed": split.seed,
                       "train_ids": list(split.train_ids), "test_ids": list(split.test_ids)},
                      indent=1, sort_keys=True)


def save_split(split: Split, path) -> None:
    atomic_write_bytes(path, split_to_json(split).encode("utf-8"))


def load_split(path) -> Split:
    path = Path(path)
    if not path.exists():
        raise StepError("MISSING_FILE", str(path))
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StepError("CORRUPT_FILE", f"{path}: {exc}") from None
    if d.get("format") != SPLIT_FORMAT:
        raise StepError("CORRUPT_FILE", f"{path}: not a split file")
    sd = dict(d["spec"])
    if "held_out" in sd:
        sd["held_out"] = tuple(sd["held_out"])
    return Split(tuple(d["train_ids"]), tuple(d["test_ids"]), SplitSpec(**sd), d["seed"])
