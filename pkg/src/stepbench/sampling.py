"""Sample extraction under data parameters, t0 selection, corpus assembly and
the corpus cache file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import StepError
from .ingestion import classify_gap
from .scene import TIME_TOL, DataParams, GapGeometry, Scene, SceneSet, interpolate_states
from .storage import read_container, write_container

CORPUS_MAGIC = b"STEPCORP"


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    dataset_id: str
    scene_id: str
    location_id: str
    t0: float
    dt: float
    agent_ids: tuple[str, ...]
    agent_types: tuple[str, ...]
    sizes: tuple[tuple[float, float] | None, ...]
    past: np.ndarray  # (A, n_I, 2), NaN where unobserved
    future: np.ndarray  # (A, n_O, 2)
    past_mask: np.ndarray  # (A, n_I) bool
    future_mask: np.ndarray  # (A, n_O) bool
    predict_ids: tuple[str, ...]
    gap: GapGeometry | None = None
    behavior_label: str | None = None
    labels: dict[str, Any] = field(default_factory=dict)
    perturbation_id: str | None = None
    flags: tuple[str, ...] = ()

    @property
    def n_I(self) -> int:
        return self.past.shape[1]

    @property
    def n_O(self) -> int:
        return self.future.shape[1]

    @property
    def predict_index(self) -> np.ndarray:
        return np.array([self.agent_ids.index(a) for a in self.predict_ids], dtype=int)

    @property
    def pred_past(self) -> np.ndarray:
        return self.past[self.predict_index]

    @property
    def pred_future(self) -> np.ndarray:
        return self.future[self.predict_index]

    def past_times(self) -> np.ndarray:
        return self.t0 - (self.n_I - 1 - np.arange(self.n_I)) * self.dt

    def future_times(self) -> np.ndarray:
        return self.t0 + (np.arange(self.n_O) + 1) * self.dt

    def replace(self, **kw) -> "Sample":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True, eq=False)
class Corpus:
    samples: tuple[Sample, ...]
    provenance: tuple[tuple[str, str | None], ...]
    params: DataParams

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise StepError("DUPLICATE_SAMPLE", "sample ids must be unique")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def subset(self, ids: Iterable[str]) -> list[Sample]:
        index = {s.sample_id: s for s in self.samples}
        return [index[i] for i in ids]


def sample_key(dataset_id: str, scene_id: str, t0: float, perturbation_id: str | None = None) -> str:
    prefix = dataset_id if perturbation_id is None else f"{dataset_id}~{perturbation_id}"
    return f"{prefix}/{scene_id}@{t0:.6f}"


# --------------------------------------------------------------------------- t0 selection

def _coverage_window(scene: Scene, params: DataParams) -> tuple[float, float] | None:
    """(earliest, latest) t0 with full past and future coverage of every predicted agent."""
    tracks = [scene.agent(a) for a in scene.predict_agent_ids]
    if not tracks:
        return None
    earliest = max(a.t_start for a in tracks) + params.T_I
    latest = min(a.t_end for a in tracks) - params.T_O
    if earliest > latest + TIME_TOL:
        return None
    return earliest, latest


def select_prediction_times(scene: Scene, params: DataParams) -> list[float]:
    window = _coverage_window(scene, params)
    if window is None:
        return []
    earliest, latest = window
    if params.t0_policy == "first_available":
        return [round(earliest, 9)]
    if params.t0_policy == "behavior_anchored":
        anchor = scene.annotations.get("anchor_t")
        if anchor is None:
            return []
        t0 = float(anchor) - params.lead
        return [round(t0, 9)] if earliest - TIME_TOL <= t0 <= latest + TIME_TOL else []
    out = []
    m = 0
    while True:
        t0 = earliest + m * params.gap
        if t0 > latest + TIME_TOL:
            break
        out.append(round(t0, 9))
        m += 1
    return out


# --------------------------------------------------------------------------- extraction

def extract_sample(scene: Scene, t0: float, params: DataParams) -> Sample:
    n_I, n_O, dt = params.n_I, params.n_O, params.dt
    times_past = t0 - (n_I - 1 - np.arange(n_I)) * dt
    times_future = t0 + (np.arange(n_O) + 1) * dt
    A = len(scene.agents)
    past = np.full((A, n_I, 2), np.nan)
    future = np.full((A, n_O, 2), np.nan)
    pmask = np.zeros((A, n_I), bool)
    fmask = np.zeros((A, n_O), bool)
    for i, a in enumerate(scene.agents):
        past[i], _, pmask[i] = interpolate_states(a, times_past)
        future[i], _, fmask[i] = interpolate_states(a, times_future)
    ids = scene.agent_ids
    for pid in scene.predict_agent_ids:
        i = ids.index(pid)
        if not (pmask[i].all() and fmask[i].all()):
            raise StepError("INSUFFICIENT_COVERAGE", f"{scene.scene_id}@{t0}: agent {pid} not fully observed")
    label = None
    if scene.gap is not None and scene.gap.ego_id in ids and scene.gap.circulating_id in ids:
        e, c = ids.index(scene.gap.ego_id), ids.index(scene.gap.circulating_id)
        times = np.concatenate([times_past, times_future])
        try:
            label = classify_gap(scene.gap, times, np.concatenate([past[e], future[e]]),
                                 times, np.concatenate([past[c], future[c]])).label
        except StepError as exc:
            if exc.code != "UNDECIDED":
                raise
    return Sample(
        sample_id=sample_key(scene.dataset_id, scene.scene_id, t0),
        dataset_id=scene.dataset_id, scene_id=scene.scene_id, location_id=scene.location_id,
        t0=float(t0), dt=dt, agent_ids=ids,
        agent_types=tuple(a.agent_type for a in scene.agents),
        sizes=tuple(a.size for a in scene.agents),
        past=past, future=future, past_mask=pmask, future_mask=fmask,
        predict_ids=tuple(scene.predict_agent_ids), gap=scene.gap, behavior_label=label,
        labels={k: v for k, v in scene.annotations.items() if k == "split"},
    )


def extract_scene_set(ss: SceneSet, params: DataParams) -> list[Sample]:
    out = []
    for scene in sorted(ss.scenes, key=lambda s: s.scene_id):
        for t0 in select_prediction_times(scene, params):
            out.append(extract_sample(scene, t0, params))
    return out


def assemble_corpus(scene_sets: Sequence[tuple[SceneSet, Any]], params: DataParams,
                    models: dict | None = None, defer_attacks: bool = False) -> Corpus:
    """Extract, perturb, and concatenate samples of every (scene set, perturbation) pair.

    Order: listed dataset order, then scene_id, then t0. ``models`` maps
    attack target references to trained model states. With ``defer_attacks``
    attack members are keyed under their perturbation but left clean (flag
    ``pending_attack``) so the runner can attack them once a target model is
    trained.
    """
    from .perturbation import apply_perturbation

    samples: list[Sample] = []
    provenance = []
    for ss, pert in scene_sets:
        pert_id = None if pert is None else pert.perturbation_id
        provenance.append((ss.dataset_id, pert_id))
        for s in extract_scene_set(ss, params):
            if pert is not None and defer_attacks and pert.is_attack:
                s = s.replace(sample_id=sample_key(s.dataset_id, s.scene_id, s.t0, pert_id),
                              perturbation_id=pert_id, flags=s.flags + ("pending_attack",))
            elif pert is not None:
                try:
                    s = apply_perturbation(s, pert, models=models)
                except StepError as exc:
                    raise StepError(exc.code, f"sample {s.sample_id} ({ss.dataset_id}, {pert_id}): {exc}") from exc
                s = s.replace(sample_id=sample_key(s.dataset_id, s.scene_id, s.t0, pert_id),
                              perturbation_id=pert_id)
            samples.append(s)
    return Corpus(tuple(samples), tuple(provenance), params)


# --------------------------------------------------------------------------- cache file

def _sample_meta(s: Sample) -> dict:
    gap = None
    if s.gap is not None:
        gap = dataclasses.asdict(s.gap)
    return {
        "sample_id": s.sample_id, "dataset_id": s.dataset_id, "scene_id": s.scene_id,
        "location_id": s.location_id, "t0": s.t0, "dt": s.dt, "agent_ids": list(s.agent_ids),
        "agent_types": list(s.agent_types), "sizes": [None if z is None else list(z) for z in s.sizes],
        "predict_ids": list(s.predict_ids), "gap": gap, "behavior_label": s.behavior_label,
        "labels": s.labels, "perturbation_id": s.perturbation_id, "flags": list(s.flags),
    }


def corpus_header(corpus: Corpus) -> dict:
    return {
        "format": "step-corpus/1",
        "params": corpus.params.to_dict(),
        "provenance": [list(p) for p in corpus.provenance],
        "counts": {"samples": len(corpus), "agents": sum(len(s.agent_ids) for s in corpus.samples)},
        "samples": [_sample_meta(s) for s in corpus.samples],
    }


def save_corpus(corpus: Corpus, path, extra_header: dict | None = None) -> None:
    arrays = []
    for s in corpus.samples:
        arrays += [s.past, s.past_mask, s.future, s.future_mask]
    header = corpus_header(corpus)
    if extra_header:
        header["extra"] = extra_header
    write_container(path, CORPUS_MAGIC, header, arrays)


def load_corpus(path) -> Corpus:
    header, arrays = read_container(path, CORPUS_MAGIC)
    params = DataParams(**header["params"])
    samples = []
    for i, m in enumerate(header["samples"]):
        past, pmask, fut, fmask = arrays[4 * i:4 * i + 4]
        gap = None if m["gap"] is None else GapGeometry(
            tuple(m["gap"]["point"]), tuple(m["gap"]["ego_normal"]), tuple(m["gap"]["circ_normal"]),
            m["gap"]["ego_id"], m["gap"]["circulating_id"])
        samples.append(Sample(
            sample_id=m["sample_id"], dataset_id=m["dataset_id"], scene_id=m["scene_id"],
            location_id=m["location_id"], t0=m["t0"], dt=m["dt"], agent_ids=tuple(m["agent_ids"]),
            agent_types=tuple(m["agent_types"]),
            sizes=tuple(None if z is None else tuple(z) for z in m["sizes"]),
            past=past, future=fut, past_mask=pmask.astype(bool), future_mask=fmask.astype(bool),
            predict_ids=tuple(m["predict_ids"]), gap=gap, behavior_label=m["behavior_label"],
            labels=m["labels"], perturbation_id=m["perturbation_id"], flags=tuple(m["flags"]),
        ))
    return Corpus(tuple(samples), tuple(tuple(p) for p in header["provenance"]), params)
