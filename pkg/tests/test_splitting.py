import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepbench.errors import StepError
from stepbench.sampling import sample_key
from stepbench.splitting import (SplitSpec, compute_criticality, cross_validation_folds, load_split, make_split,
                                 save_split, split_by_criticality, split_by_location, split_cross_validation,
                                 split_predefined, split_random)
from tests.helpers import make_sample, random_linear_samples


def _plain(n, rng=None, per_scene=1, **kw):
    return random_linear_samples(n, rng or np.random.default_rng(0), per_scene=per_scene, **kw)


def _is_partition(split, samples):
    ids = [s.sample_id for s in samples]
    assert set(split.train_ids).isdisjoint(split.test_ids)
    assert set(split.train_ids) | set(split.test_ids) == set(ids)
    assert len(split.train_ids) + len(split.test_ids) == len(ids)


# --------------------------------------------------------------------------- random

def test_random_sizes_and_determinism():
    s = _plain(10)
    a = split_random(s, 0.2, seed=3)
    assert (len(a.train_ids), len(a.test_ids)) == (8, 2)
    _is_partition(a, s)
    assert a == split_random(s, 0.2, seed=3)
    assert len(split_random(_plain(100), 0.11, seed=0).test_ids) == 11


def test_random_rounds_half_to_even():
    assert len(split_random(_plain(10), 0.25, seed=1).test_ids) == 2  # 2.5 -> 2
    assert len(split_random(_plain(14), 0.25, seed=1).test_ids) == 4  # 3.5 -> 4


def test_random_empty_side():
    with pytest.raises(StepError) as e:
        split_random(_plain(3), 0.1)
    assert e.value.code == "EMPTY_SIDE"


def test_scene_coherent_random_keeps_scenes_whole():
    s = _plain(30, per_scene=3)
    sp = split_random(s, 0.3, seed=5)
    test_scenes = {x.scene_id for x in s if x.sample_id in sp.test_ids}
    train_scenes = {x.scene_id for x in s if x.sample_id in sp.train_ids}
    assert test_scenes.isdisjoint(train_scenes)
    assert len(sp.test_ids) == 9


# --------------------------------------------------------------------------- by location

def _two_sites(rng):
    out = []
    for i, s in enumerate(_plain(12, rng)):
        loc = "A" if i < 7 else "B"
        out.append(s.replace(location_id=loc, dataset_id="d1" if i < 7 else "d2",
                             sample_id=sample_key("d1" if i < 7 else "d2", s.scene_id, s.t0)))
    return out


def test_by_location(rng):
    s = _two_sites(rng)
    sp = split_by_location(s, ["B"])
    assert len(sp.test_ids) == 5
    train_locs = {x.location_id for x in s if x.sample_id in sp.train_ids}
    assert train_locs == {"A"}
    _is_partition(sp, s)
    ds = split_by_location(s, ["d2"], kind="dataset")
    assert ds.test_ids == sp.test_ids


def test_by_location_infeasible(rng):
    s = _two_sites(rng)
    for held in (["A", "B"], ["C"]):
        with pytest.raises(StepError) as e:
            split_by_location(s, held)
        assert e.value.code == "INFEASIBLE"


# --------------------------------------------------------------------------- cross validation

def test_cv_ninety_into_nine():
    s = _plain(90)
    tests = [set(split_cross_validation(s, 9, f, seed=2).test_ids) for f in range(9)]
    assert all(len(t) == 10 for t in tests)
    assert set().union(*tests) == {x.sample_id for x in s}
    assert all(tests[i].isdisjoint(tests[j]) for i in range(9) for j in range(i + 1, 9))


def test_cv_uneven_sizes():
    sizes = [len(f) for f in cross_validation_folds(_plain(92), 9, seed=0)]
    assert sorted(set(sizes)) == [10, 11] and sum(sizes) == 92


@settings(max_examples=60, deadline=None)
@given(groups=st.lists(st.integers(1, 4), min_size=3, max_size=30), n_folds=st.integers(2, 6),
       seed=st.integers(0, 10_000))
def test_cv_folds_partition(groups, n_folds, seed):
    if len(groups) < n_folds:
        return
    samples = []
    for g, size in enumerate(groups):
        for j in range(size):
            samples.append(make_sample(np.zeros((1, 3, 2)), np.zeros((1, 2, 2)),
                                       sample_id=sample_key("d", f"g{g}", float(j)), scene_id=f"g{g}", t0=float(j)))
    folds = cross_validation_folds(samples, n_folds, seed)
    flat = sorted(i for f in folds for i in f)
    assert flat == list(range(len(samples)))
    for f in folds:
        assert f
        scenes = {samples[i].scene_id for i in f}
        assert all(samples[i].scene_id not in scenes for other in folds if other is not f for i in other)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= max(groups)
    flat_folds = cross_validation_folds(samples, n_folds, seed, scene_coherent=False)
    sizes = [len(f) for f in flat_folds]
    assert max(sizes) - min(sizes) <= 1


def test_cv_too_few_samples():
    with pytest.raises(StepError):
        cross_validation_folds(_plain(5), 9)


# --------------------------------------------------------------------------- criticality

def _pair_sample(p_a, v_a, p_b, v_b, n_I=4, dt=0.5, sid="d/s0@0.000000"):
    t = (np.arange(n_I) - (n_I - 1)) * dt
    a = np.asarray(p_a) + t[:, None] * np.asarray(v_a)
    b = np.asarray(p_b) + t[:, None] * np.asarray(v_b)
    return make_sample(np.stack([a, b]), np.zeros((2, 2, 2)), sample_id=sid, scene_id=sid)


def test_head_on_closing():
    s = _pair_sample((0, 0), (2.5, 0), (10, 0), (-2.5, 0))
    assert compute_criticality(s) == pytest.approx(2.0)


def test_parallel_is_infinite():
    assert compute_criticality(_pair_sample((0, 0), (5, 0), (0, 3), (5, 0))) == math.inf
    single = make_sample(np.zeros((1, 4, 2)), np.zeros((1, 2, 2)))
    assert compute_criticality(single) == math.inf


def _oracle(sample):
    """Plain scalar loops over every pair and step."""
    best = math.inf
    A, n = sample.past.shape[:2]
    for a in range(A):
        for b in range(A):
            if b <= a:
                continue
            for j in range(1, n):
                if not (sample.past_mask[a, j] and sample.past_mask[a, j - 1]
                        and sample.past_mask[b, j] and sample.past_mask[b, j - 1]):
                    continue
                rx = sample.past[b, j, 0] - sample.past[a, j, 0]
                ry = sample.past[b, j, 1] - sample.past[a, j, 1]
                vx = ((sample.past[b, j, 0] - sample.past[b, j - 1, 0])
                      - (sample.past[a, j, 0] - sample.past[a, j - 1, 0])) / sample.dt
                vy = ((sample.past[b, j, 1] - sample.past[b, j - 1, 1])
                      - (sample.past[a, j, 1] - sample.past[a, j - 1, 1])) / sample.dt
                d = math.sqrt(rx * rx + ry * ry)
                rate = -(rx * vx + ry * vy) / d
                if rate > 0:
                    best = min(best, d / rate)
    return best


def test_criticality_matches_pairwise_scan(rng):
    for s in random_linear_samples(25, rng, agents=4, noise=0.3):
        assert compute_criticality(s) == pytest.approx(_oracle(s), rel=1e-12)


def test_criticality_skips_unobserved_steps(rng):
    s = random_linear_samples(1, rng, agents=3)[0]
    mask = s.past_mask.copy()
    mask[2, :3] = False
    past = s.past.copy()
    past[2, :3] = np.nan
    s = s.replace(past=past, past_mask=mask)
    assert compute_criticality(s) == pytest.approx(_oracle(s))


def test_by_criticality_two_finite():
    samples = [_pair_sample((0, 0), (5, 0), (0, 3), (5, 0), sid=f"d/p{i}@0.000000") for i in range(8)]
    samples[3] = _pair_sample((0, 0), (1, 0), (20, 0), (-1, 0), sid="d/p3@0.000000")
    samples[6] = _pair_sample((0, 0), (3, 0), (20, 0), (-3, 0), sid="d/p6@0.000000")
    sp = split_by_criticality(samples, 0.25)
    assert set(sp.test_ids) == {"d/p3@0.000000", "d/p6@0.000000"}


def test_by_criticality_all_infinite_uses_ids():
    ids = [f"d/p{c}@0.000000" for c in "hcfajdbgei"]
    samples = [_pair_sample((0, 0), (5, 0), (0, 3), (5, 0), sid=i) for i in ids]
    assert split_by_criticality(samples, 0.3).test_ids == tuple(i for i in ids if i in sorted(ids)[:3])


def test_by_criticality_sort_oracle(rng):
    samples = random_linear_samples(10, rng, agents=3, noise=0.2)
    crit = {s.sample_id: compute_criticality(s) for s in samples}
    expected = sorted(crit, key=lambda i: (crit[i], i))[:3]
    assert set(split_by_criticality(samples, 0.3).test_ids) == set(expected)


# --------------------------------------------------------------------------- predefined

def _labelled(labels):
    return [s.replace(labels={"split": lab}) for s, lab in zip(_plain(len(labels)), labels)]


def test_predefined_passthrough():
    s = _labelled(["train"] * 7 + ["test"] * 3)
    sp = split_predefined(s)
    assert (len(sp.train_ids), len(sp.test_ids)) == (7, 3)
    flipped = [x.replace(labels={"split": "test" if x.labels["split"] == "train" else "train"}) for x in s]
    assert split_predefined(flipped).test_ids == sp.train_ids


def test_predefined_missing_label():
    s = _labelled(["train", "test", None, "train"])
    with pytest.raises(StepError) as e:
        split_predefined(s)
    assert e.value.code == "MISSING_LABEL" and s[2].sample_id in str(e.value)


# --------------------------------------------------------------------------- files and dispatch

@pytest.mark.parametrize("spec", [
    SplitSpec("random", test_fraction=0.3, seed=4),
    SplitSpec("cross_validation", n_folds=3, fold_index=2, seed=1),
    SplitSpec("by_criticality", test_fraction=0.2),
])
def test_split_file_round_trip(tmp_path, spec, road_corpus):
    sp = make_split(road_corpus, spec)
    _is_partition(sp, road_corpus.samples)
    save_split(sp, tmp_path / "s.json")
    back = load_split(tmp_path / "s.json")
    assert back == sp and back.spec == spec
    save_split(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "s.json").read_bytes()


def test_split_file_errors(tmp_path):
    with pytest.raises(StepError) as e:
        load_split(tmp_path / "none.json")
    assert e.value.code == "MISSING_FILE"
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(StepError) as e:
        load_split(tmp_path / "bad.json")
    assert e.value.code == "CORRUPT_FILE"


def test_spec_validation():
    for bad in (dict(method="random", test_fraction=1.0), dict(method="cross_validation", n_folds=1),
                dict(method="cross_validation", n_folds=3, fold_index=3), dict(method="by_location"),
                dict(method="stratified")):
        with pytest.raises(StepError):
            SplitSpec(**bad)
