import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepbench.errors import StepError
from stepbench.ingestion import SyntheticConfig, generate_synthetic
from stepbench.perturbation import PerturbationSpec
from stepbench.sampling import (assemble_corpus, extract_sample, extract_scene_set, load_corpus, save_corpus,
                                select_prediction_times)
from stepbench.scene import DataParams, SceneSet
from tests.helpers import linear_track, scene


def _covered_scene(t_end, dt=0.1, starts=(0.0,)):
    agents = [linear_track(f"a{i}", np.arange(s, t_end + 1e-9, dt), (0.0, 3.0 * i), (1.0, 0.0))
              for i, s in enumerate(starts)]
    return scene(agents, dt=dt)


def _scan_t0(sc, params, step=0.01):
    """Exhaustive oracle: every grid time whose full past and future lie inside all predicted tracks."""
    out = []
    for t0 in np.arange(0.0, 20.0, step):
        ok = all(sc.agent(a).t_start - 1e-9 <= t0 - params.T_I and t0 + params.T_O <= sc.agent(a).t_end + 1e-9
                 for a in sc.predict_agent_ids)
        if ok:
            out.append(round(t0, 6))
    return out


def test_regular_spacing_on_ten_second_scene():
    sc = _covered_scene(10.0)
    p = DataParams.from_horizon(4.5, 1.5, 0.5, gap=1.0)
    got = select_prediction_times(sc, p)
    assert got == pytest.approx([4.5, 5.5, 6.5, 7.5, 8.5])
    covered = _scan_t0(sc, p)
    assert min(covered) == pytest.approx(4.5) and max(covered) == pytest.approx(8.5)
    assert all(any(abs(c - g) < 1e-6 for c in covered) for g in got)


def test_too_short_scene_yields_nothing():
    p = DataParams.from_horizon(4.5, 1.5, 0.5)
    assert select_prediction_times(_covered_scene(4.5), p) == []
    assert extract_scene_set(SceneSet("d", 0.1, (_covered_scene(4.5),)), p) == []


def test_first_available_is_T_I():
    p = DataParams.from_horizon(4.5, 1.5, 0.5, t0_policy="first_available")
    assert select_prediction_times(_covered_scene(10.0), p) == pytest.approx([4.5])


def test_behavior_anchored_uses_lead():
    sc = _covered_scene(10.0)
    sc = scene(sc.agents, dt=0.1, annotations={"anchor_t": 7.0})
    p = DataParams.from_horizon(2.0, 1.0, 0.5, t0_policy="behavior_anchored", lead=1.5)
    assert select_prediction_times(sc, p) == pytest.approx([5.5])
    far = DataParams.from_horizon(2.0, 1.0, 0.5, t0_policy="behavior_anchored", lead=6.0)
    assert select_prediction_times(sc, far) == []
    assert select_prediction_times(_covered_scene(10.0), p) == []


@settings(max_examples=80, deadline=None)
@given(start=st.integers(0, 30), length=st.integers(0, 120), T_I=st.sampled_from([1.5, 4.5]),
       policy=st.sampled_from(["first_available", "regular_spacing"]))
def test_selection_invariant_across_dt(start, length, T_I, policy):
    sc = _covered_scene(start * 0.1 + length * 0.1, starts=(start * 0.1,))
    sets = []
    for dt in (0.1, 0.25, 0.5):
        p = DataParams.from_horizon(T_I, 1.5, dt, t0_policy=policy, gap=1.0)
        t0s = select_prediction_times(sc, p)
        sets.append([round(t, 6) for t in t0s])
        for t0 in t0s:
            s = extract_sample(sc, t0, p)
            assert s.past.shape[1] == p.n_I and s.future.shape[1] == p.n_O
            assert s.past_times()[-1] == pytest.approx(t0)
            assert s.future_times()[0] == pytest.approx(t0 + dt)
    assert sets[0] == sets[1] == sets[2]


def test_extraction_of_linear_track():
    sc = _covered_scene(10.0)
    s = extract_sample(sc, 2.0, DataParams(4, 3, 0.5))
    assert s.past[0, :, 0] == pytest.approx([0.5, 1.0, 1.5, 2.0])
    assert s.future[0, :, 0] == pytest.approx([2.5, 3.0, 3.5])
    assert s.sample_id == "d/s0@2.000000"
    assert s.past_mask.all() and s.future_mask.all()


def test_bystander_with_late_start_is_masked():
    sc = scene(_covered_scene(10.0, starts=(0.0, 1.2)).agents, dt=0.1, predict=("a0",))
    s = extract_sample(sc, 2.0, DataParams(4, 3, 0.5))
    assert s.past_mask[1].tolist() == [False, False, True, True]
    assert np.isnan(s.past[1, :2]).all()
    assert s.future_mask[1].all()
    assert s.past_mask[0].all()
    assert s.past[1, 2, 0] == pytest.approx(1.5)


def test_predicted_agent_without_coverage_raises():
    sc = _covered_scene(10.0, starts=(0.0, 1.2))
    with pytest.raises(StepError) as e:
        extract_sample(sc, 2.0, DataParams(4, 3, 0.5))
    assert e.value.code == "INSUFFICIENT_COVERAGE"


def _sets():
    a = generate_synthetic(SyntheticConfig(scene_count=3, duration=6.0, seed=1, dataset_id="a"))
    b = generate_synthetic(SyntheticConfig(scene_count=5, duration=6.0, seed=2, dataset_id="b"))
    return a, b


def test_corpus_order_and_count():
    a, b = _sets()
    p = DataParams(5, 6, 0.5, t0_policy="first_available")
    c = assemble_corpus([(b, None), (a, None)], p)
    assert len(c) == 8
    assert [s.dataset_id for s in c.samples] == ["b"] * 5 + ["a"] * 3
    assert [s.scene_id for s in c.samples[:5]] == sorted(s.scene_id for s in c.samples[:5])
    assert c.ids == assemble_corpus([(b, None), (a, None)], p).ids
    multi = assemble_corpus([(a, None)], DataParams(5, 2, 0.5, gap=0.5))
    expected = sum(len(select_prediction_times(sc, multi.params)) for sc in a.scenes)
    assert len(multi) == expected > 3
    t0s = [s.t0 for s in multi.samples if s.scene_id == "s0000"]
    assert t0s == sorted(t0s)


def test_provenance_lists_one_perturbation():
    a, b = _sets()
    spec = PerturbationSpec("white_noise", sigma=0.1, name="wn")
    c = assemble_corpus([(a, spec), (b, None)], DataParams(5, 6, 0.5, t0_policy="first_available"))
    assert [p for _, p in c.provenance if p is not None] == ["wn"]
    assert all(s.sample_id.startswith("a~wn/") for s in c.samples[:3])
    assert len(set(c.ids)) == 8


def test_same_scenes_twice_need_distinct_perturbations():
    a, _ = _sets()
    with pytest.raises(StepError) as e:
        assemble_corpus([(a, None), (a, None)], DataParams(5, 6, 0.5, t0_policy="first_available"))
    assert e.value.code == "DUPLICATE_SAMPLE"


def test_corpus_file_round_trip(tmp_path, gap_corpus):
    save_corpus(gap_corpus, tmp_path / "c.bin")
    back = load_corpus(tmp_path / "c.bin")
    assert back.ids == gap_corpus.ids and back.params == gap_corpus.params
    for x, y in zip(back.samples, gap_corpus.samples):
        np.testing.assert_array_equal(x.past, y.past)
        np.testing.assert_array_equal(x.future_mask, y.future_mask)
        assert x.behavior_label == y.behavior_label and x.gap == y.gap
    assert {s.behavior_label for s in back.samples} <= {"accepted", "rejected", None}
