"""Displacement, behavior and likelihood metrics with batch computation and
aggregation.

A metric is computed per batch into a :class:`BatchMetric` and combined into
a :class:`FinalMetric`. Averaged metrics carry per-value weights and combine
by an exactly rounded weighted sum, so the result does not depend on how the
test set was batched. Rank and calibration metrics (AUC, ECE) carry their
(score, label) pairs and are evaluated once on the concatenation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import StepError
from .ingestion import BEHAVIOR_FAMILIES, classify_gap

MISS_THRESHOLD = 2.0
ECE_BINS = 10


# --------------------------------------------------------------------------- displacement

def _check(traj, truth):
    traj = np.asarray(traj, float)
    truth = np.asarray(truth, float)
    if traj.ndim != 4 or truth.ndim != 3 or traj.shape[1:] != truth.shape or traj.shape[-1] != 2:
        raise StepError("SHAPE_MISMATCH", f"predictions {traj.shape} vs truth {truth.shape}")
    if traj.shape[0] < 1:
        raise StepError("SHAPE_MISMATCH", "need k >= 1 samples")
    return traj, truth


def _dist(traj, truth):
    d = traj - truth[None]
    return np.sqrt(np.sum(d * d, axis=-1))  # (k, P, T)


def min_ade(traj, truth, mode: str = "marginal"):
    """Marginal: (P,) min over samples of each agent's ADE. Joint: scalar min
    over samples of the agent-averaged ADE."""
    traj, truth = _check(traj, truth)
    ade = _dist(traj, truth).mean(axis=-1)  # (k, P)
    if mode == "marginal":
        return ade.min(axis=0)
    if mode == "joint":
        return float(ade.mean(axis=1).min())
    raise StepError("INVALID_PARAMS", f"unknown mode {mode!r}")


def min_fde(traj, truth, mode: str = "marginal"):
    traj, truth = _check(traj, truth)
    fde = _dist(traj[:, :, -1:], truth[:, -1:])[..., 0]  # (k, P)
    if mode == "marginal":
        return fde.min(axis=0)
    if mode == "joint":
        return float(fde.mean(axis=1).min())
    raise StepError("INVALID_PARAMS", f"unknown mode {mode!r}")


def miss_flags(traj, truth, threshold: float = MISS_THRESHOLD, per_scene: bool = False):
    """Per-agent (or per-scene) miss indicators: best final displacement > threshold.

    The per-scene variant counts a miss when the best joint sample has any
    agent beyond the threshold.
    """
    if not threshold > 0:
        raise StepError("INVALID_PARAMS", "threshold must be > 0")
    traj, truth = _check(traj, truth)
    fde = _dist(traj[:, :, -1:], truth[:, -1:])[..., 0]  # (k, P)
    if per_scene:
        return np.array([float(fde.max(axis=1).min() > threshold)])
    return (fde.min(axis=0) > threshold).astype(float)


def miss_rate(trajs: Sequence, truths: Sequence, threshold: float = MISS_THRESHOLD,
              per_scene: bool = False) -> float:
    flags = np.concatenate([miss_flags(p, t, threshold, per_scene) for p, t in zip(trajs, truths)])
    return float(flags.mean())


# --------------------------------------------------------------------------- behavior

def classify_prediction_samples(entry, sample, family: str = "gap_acceptance") -> dict[str, float] | None:
    """Fraction of decided joint samples falling in each class of ``family``.

    Agents the model does not predict keep their recorded future. Returns None
    when the sample has no gap geometry or every joint sample is undecided.
    """
    classes = BEHAVIOR_FAMILIES[family]
    g = sample.gap
    if g is None or entry.trajectories is None:
        return None
    ids = sample.agent_ids
    if g.ego_id not in ids or g.circulating_id not in ids:
        return None
    times = np.concatenate([sample.past_times(), sample.future_times()])
    e, c = ids.index(g.ego_id), ids.index(g.circulating_id)
    pred = list(entry.agent_ids)
    counts = dict.fromkeys(classes, 0)
    for i in range(entry.trajectories.shape[0]):
        tracks = []
        for ai in (e, c):
            fut = entry.trajectories[i, pred.index(ids[ai])] if ids[ai] in pred else sample.future[ai]
            tracks.append(np.concatenate([sample.past[ai], fut]))
        try:
            counts[classify_gap(g, times, tracks[0], times, tracks[1]).label] += 1
        except StepError as exc:
            if exc.code != "UNDECIDED":
                raise
    decided = sum(counts.values())
    if decided == 0:
        return None
    return {k: v / decided for k, v in counts.items()}


def behavior_probabilities(entry, sample, family: str = "gap_acceptance") -> dict[str, float] | None:
    if entry.behavior_probs is not None:
        return entry.behavior_probs
    return classify_prediction_samples(entry, sample, family)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise StepError("SINGLE_CLASS", "AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ece(scores, labels, n_bins: int = ECE_BINS) -> float:
    """Binary ECE over equal-width bins of the positive-class probability."""
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(float)
    if len(s) == 0:
        raise StepError("EMPTY", "ECE of no samples")
    if np.any((s < 0) | (s > 1)):
        raise StepError("INVALID_PARAMS", "scores must lie in [0, 1]")
    b = np.minimum(np.floor(s * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for k in np.unique(b):
        m = b == k
        total += m.sum() / len(s) * abs(y[m].mean() - s[m].mean())
    return float(total)


def ece_multiclass(probs, labels, n_bins: int = ECE_BINS) -> float:
    """Top-label ECE: confidence is the max class probability."""
    p = np.asarray(probs, float)
    y = np.asarray(labels, int)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(float)
    b = np.minimum(np.floor(conf * n_bins).astype(int), n_bins - 1)
    return float(sum((b == k).sum() / len(p) * abs(correct[b == k].mean() - conf[b == k].mean())
                     for k in np.unique(b)))


# --------------------------------------------------------------------------- likelihood

def nll(sample, entry=None, state=None) -> float:
    """-log density of the ground-truth future: closed form if the model has
    one, else a KDE over the k sampled joint trajectories."""
    if state is not None:
        from .predictors.core import model_capabilities, model_log_likelihood
        if model_capabilities(state.spec)["likelihood"]:
            return -model_log_likelihood(state, sample)
    if entry is None or entry.trajectories is None:
        raise StepError("UNSUPPORTED_KIND", "no likelihood and no sampled trajectories")
    from .predictors.density import fit_density_estimator
    kde = fit_density_estimator(entry.trajectories)
    if kde.degenerate:
        raise StepError("DEGENERATE", "all sampled trajectories coincide")
    return -float(kde.eval(sample.pred_future))


# --------------------------------------------------------------------------- batch / final

@dataclass
class BatchMetric:
    metric_id: str
    values: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    pairs: list[tuple[float, int]] | None = None  # rank / calibration metrics
    missing: int = 0

    def __post_init__(self):
        if any(w < 1 for w in self.weights):
            raise StepError("INVALID_PARAMS", "weights must be >= 1")

    @property
    def n(self) -> float:
        return len(self.pairs) if self.pairs is not None else math.fsum(self.weights)


@dataclass(frozen=True)
class FinalMetric:
    metric_id: str
    value: float
    n: float
    provenance: str = ""


@dataclass(frozen=True)
class MetricDef:
    metric_id: str
    direction: str  # "min" or "max" is better
    compute: Callable  # (samples, predictions, ctx) -> BatchMetric
    finalize: Callable | None = None  # pairs -> value
    needs_trajectories: bool = False
    needs_behavior: bool = False
    needs_likelihood: bool = False
    needs_joint: bool = False
    label: str = ""


def _displacement(metric_id, fn, mode):
    def compute(samples, preds, ctx):
        bm = BatchMetric(metric_id)
        for s in samples:
            v = fn(preds[s.sample_id].trajectories, s.pred_future, mode)
            bm.values += list(np.atleast_1d(v).astype(float))
            bm.weights += [1.0] * np.atleast_1d(v).size
        return bm
    return compute


def _miss(metric_id, per_scene):
    def compute(samples, preds, ctx):
        bm = BatchMetric(metric_id)
        tau = ctx.get("miss_threshold", MISS_THRESHOLD)
        for s in samples:
            f = miss_flags(preds[s.sample_id].trajectories, s.pred_future, tau, per_scene)
            bm.values += list(f)
            bm.weights += [1.0] * len(f)
        return bm
    return compute


def _behavior_pairs(metric_id):
    def compute(samples, preds, ctx):
        bm = BatchMetric(metric_id, pairs=[])
        for s in samples:
            if s.behavior_label is None:
                continue
            probs = behavior_probabilities(preds[s.sample_id], s)
            if probs is None:
                bm.missing += 1
                continue
            bm.pairs.append((float(probs["accepted"]), int(s.behavior_label == "accepted")))
        return bm
    return compute


def _nll_compute(samples, preds, ctx):
    bm = BatchMetric("nll")
    for s in samples:
        bm.values.append(nll(s, preds[s.sample_id], ctx.get("state")))
        bm.weights.append(1.0)
    return bm


def _pairs_final(fn):
    def finalize(pairs, ctx):
        s = [p[0] for p in pairs]
        y = [p[1] for p in pairs]
        return fn(s, y) if fn is auc else fn(s, y, ctx.get("ece_bins", ECE_BINS))
    return finalize


REGISTRY: dict[str, MetricDef] = {m.metric_id: m for m in (
    MetricDef("min_ade", "min", _displacement("min_ade", min_ade, "marginal"), needs_trajectories=True,
              label="minADE"),
    MetricDef("min_fde", "min", _displacement("min_fde", min_fde, "marginal"), needs_trajectories=True,
              label="minFDE"),
    MetricDef("min_ade_joint", "min", _displacement("min_ade_joint", min_ade, "joint"),
              needs_trajectories=True, needs_joint=True, label="minADE_J"),
    MetricDef("min_fde_joint", "min", _displacement("min_fde_joint", min_fde, "joint"),
              needs_trajectories=True, needs_joint=True, label="minFDE_J"),
    MetricDef("miss_rate", "min", _miss("miss_rate", False), needs_trajectories=True, label="MR"),
    MetricDef("miss_rate_scene", "min", _miss("miss_rate_scene", True), needs_trajectories=True,
              needs_joint=True, label="MR_scene"),
    MetricDef("auc", "max", _behavior_pairs("auc"), _pairs_final(auc), needs_behavior=True, label="AUC"),
    MetricDef("ece", "min", _behavior_pairs("ece"), _pairs_final(ece), needs_behavior=True, label="ECE"),
    MetricDef("nll", "min", _nll_compute, needs_trajectories=True, needs_likelihood=True, label="NLL"),
)}


def compute_batch(metric_id: str, samples, predictions, ctx: dict | None = None) -> BatchMetric:
    if metric_id not in REGISTRY:
        raise StepError("UNKNOWN_METRIC", metric_id)
    return REGISTRY[metric_id].compute(samples, predictions, ctx or {})


def aggregate(batches: Sequence[BatchMetric], ctx: dict | None = None, provenance: str = "") -> FinalMetric:
    """Combine batch metrics. Weighted means use an exactly rounded sum."""
    if not batches:
        raise StepError("EMPTY", "no batches to aggregate")
    mid = batches[0].metric_id
    if any(b.metric_id != mid for b in batches):
        raise StepError("INVALID_PARAMS", "batches of different metrics")
    mdef = REGISTRY.get(mid)
    if batches[0].pairs is not None:
        pairs = [p for b in batches for p in b.pairs]
        if not pairs:
            raise StepError("EMPTY", f"{mid}: no decided behavior samples")
        value = mdef.finalize(pairs, ctx or {})
        return FinalMetric(mid, float(value), float(len(pairs)), provenance)
    vals = [v for b in batches for v in b.values]
    ws = [w for b in batches for w in b.weights]
    n = math.fsum(ws)
    if n <= 0:
        raise StepError("EMPTY", f"{mid}: no values")
    value = math.fsum(v * w for v, w in zip(vals, ws)) / n
    if not math.isfinite(value):
        raise StepError("NUMERICAL", f"{mid}: non-finite value")
    return FinalMetric(mid, value, n, provenance)
