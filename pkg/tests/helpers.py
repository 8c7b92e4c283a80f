"""Builders for small hand-made scenes, samples and corpora."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from stepbench.sampling import Corpus, Sample, sample_key
from stepbench.scene import AgentTrack, DataParams, Scene


def track(agent_id, t, xy, agent_type="vehicle", **kw) -> AgentTrack:
    return AgentTrack(agent_id, agent_type, np.asarray(t, float), np.asarray(xy, float), **kw)


def linear_track(agent_id, t, p0, v) -> AgentTrack:
    t = np.asarray(t, float)
    return track(agent_id, t, np.asarray(p0, float) + t[:, None] * np.asarray(v, float))


def scene(agents, scene_id="s0", predict=None, dt=0.1, dataset_id="d", location_id="loc", **kw) -> Scene:
    agents = tuple(agents)
    predict = tuple(a.agent_id for a in agents) if predict is None else tuple(predict)
    return Scene(scene_id, dataset_id, location_id, dt, agents, predict, **kw)


def make_sample(past, future, sample_id="d/s0@0.000000", dt=0.5, predict=None, scene_id="s0",
                dataset_id="d", location_id="loc", t0=0.0, **kw) -> Sample:
    """Sample from raw (A, n_I, 2) / (A, n_O, 2) arrays; every agent fully observed."""
    past = np.asarray(past, float)
    future = np.asarray(future, float)
    A = past.shape[0]
    ids = tuple(f"a{i}" for i in range(A))
    return Sample(
        sample_id=sample_id, dataset_id=dataset_id, scene_id=scene_id, location_id=location_id,
        t0=t0, dt=dt, agent_ids=ids, agent_types=("vehicle",) * A, sizes=(None,) * A,
        past=past, future=future, past_mask=np.ones(past.shape[:2], bool),
        future_mask=np.ones(future.shape[:2], bool),
        predict_ids=ids if predict is None else tuple(ids[i] for i in predict), **kw)


def random_linear_samples(n, rng, n_I=5, n_O=6, dt=0.5, agents=2, noise=0.0, per_scene=1):
    """Samples of agents on straight lines at constant speed, optional position noise."""
    out = []
    for i in range(n):
        p0 = rng.uniform(-20, 20, size=(agents, 2))
        v = rng.uniform(-10, 10, size=(agents, 2))
        t = np.arange(n_I + n_O) * dt
        xy = p0[:, None] + t[None, :, None] * v[:, None]
        xy = xy + noise * rng.standard_normal(xy.shape)
        out.append(make_sample(xy[:, :n_I], xy[:, n_I:], sample_id=sample_key("d", f"s{i // per_scene:04d}", float(i)),
                               dt=dt, scene_id=f"s{i // per_scene:04d}", t0=float(i)))
    return out


def corpus_of(samples, params=None) -> Corpus:
    params = params or DataParams(samples[0].n_I, samples[0].n_O, samples[0].dt)
    return Corpus(tuple(samples), (("d", None),), params)


def write_plan(tmp_path, plan: dict, name: str = "plan") -> Path:
    """Dump a plan dict to ``tmp_path/name.yaml`` with output and cache dirs inside tmp_path."""
    plan = dict(plan)
    plan.setdefault("output_dir", "out")
    plan.setdefault("cache_dir", "cache")
    path = Path(tmp_path) / f"{name}.yaml"
    path.write_text(yaml.safe_dump(plan, sort_keys=False), encoding="utf-8")
    return path


def road_plan(**over) -> dict:
    """Small straight-road plan: one corpus, one data parameter set, one random split."""
    plan = {
        "datasets": [{"id": "road", "synthetic": {"scene_count": 6, "agents_per_scene": 2, "duration": 8.0,
                                                   "noise_sigma": 0.05, "seed": 3}}],
        "corpora": [{"id": "c", "members": ["road"]}],
        "data_params": [{"id": "A", "n_I": 5, "n_O": 6, "dt": 0.5, "t0_policy": "regular_spacing", "gap": 2.0}],
        "splits": [{"id": "r", "method": "random", "test_fraction": 0.3, "seed": 0}],
        "models": [{"id": "cv", "kind": "constant_velocity"}],
        "metrics": ["min_ade"],
        "seeds": [0],
    }
    plan.update(over)
    return plan
