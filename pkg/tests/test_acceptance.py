"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -s`` to see the
lines as they happen; the terminal summary repeats them in any case.
"""
from __future__ import annotations

import contextlib
import math
import sys
import time

import numpy as np
import pytest

from stepbench.cli import conformance_fixture
from stepbench.ingestion import SyntheticConfig, generate_synthetic
from stepbench.metrics import BatchMetric, aggregate, auc, ece, min_ade, min_fde, miss_flags
from stepbench.perturbation import control_bounds_ok
from stepbench.predictors import (LossSpec, ModelSpec, attack_loss, model_init, model_predict,
                                  model_train, prediction_loss_gradient)
from stepbench.predictors.plugin import run_conformance
from stepbench.runner import (case_keys, enumerate_cases, parse_simulation_file, read_store, run_plan,
                              spread_rows)
from stepbench.sampling import assemble_corpus, load_corpus
from stepbench.scene import DataParams
from stepbench.splitting import SplitSpec, make_split

from tests.helpers import random_linear_samples, road_plan, write_plan

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(n: int, name: str, budget_s: float | None = None):
    """Record PASS or FAIL for criterion ``n``; details go in the yielded dict."""
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
        dt = time.perf_counter() - t0
        info["runtime"] = f"{dt:.1f}s"
        if budget_s is not None:
            assert dt < budget_s, f"runtime {dt:.1f}s exceeds {budget_s}s"
    except BaseException as exc:
        line = f"FAIL {n:2d} {name}: {type(exc).__name__}: {exc}".splitlines()[0]
        RESULTS.append(line)
        print(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"PASS {n:2d} {name}: {detail}"
    RESULTS.append(line)
    print(line)


def _cv0():
    return {"id": "cv0", "kind": "constant_velocity", "hyperparameters": {"sigma": 0.0, "fit_sigma": False}}


# --------------------------------------------------------------------------- 1

def test_01_pipeline_exactness(tmp_path):
    with criterion(1, "pipeline exactness", budget_s=10) as info:
        plan = road_plan(
            datasets=[{"id": "lin", "synthetic": {"scene_count": 10, "agents_per_scene": 3, "duration": 10.0,
                                                  "speed_changes": 0, "noise_sigma": 0.0, "seed": 21}}],
            corpora=[{"id": "c", "members": ["lin"]}], models=[_cv0()],
            metrics=["min_ade", "min_fde", "miss_rate"], k=6)
        records, _ = run_plan(parse_simulation_file(write_plan(tmp_path, plan)))
        assert [r.status for r in records] == ["computed"] * 3
        worst = max(abs(r.value) for r in records)
        assert worst <= 1e-9, f"max |F| = {worst}"
        info["max_F"] = f"{worst:.1e}"


# --------------------------------------------------------------------------- 2

def test_02_scenario_selection_invariance():
    with criterion(2, "scenario-selection invariance") as info:
        ss = generate_synthetic(SyntheticConfig(scene_count=50, agents_per_scene=3, duration=12.0, seed=8))
        sets, n_I = {}, {}
        for dt in (0.5, 0.25, 0.1):
            dp = DataParams.from_horizon(4.5, 3.0, dt, t0_policy="regular_spacing", gap=1.5)
            n_I[dt] = dp.n_I
            corpus = assemble_corpus([(ss, None)], dp)
            sets[dt] = {(s.scene_id, s.t0) for s in corpus.samples}
        assert n_I == {0.5: 10, 0.25: 19, 0.1: 46}
        assert sets[0.5] == sets[0.25] == sets[0.1]
        assert len({sid for sid, _ in sets[0.5]}) == 50
        info["pairs"] = len(sets[0.5])


# --------------------------------------------------------------------------- 3

def test_03_split_correctness():
    with criterion(3, "split correctness") as info:
        ss = generate_synthetic(SyntheticConfig(scene_count=90, agents_per_scene=2, duration=8.0, seed=9))
        corpus = assemble_corpus([(ss, None)], DataParams(5, 6, 0.5, t0_policy="first_available"))
        assert len(corpus.samples) == 90
        folds = [set(make_split(corpus, SplitSpec("cross_validation", n_folds=9, fold_index=f)).test_ids)
                 for f in range(9)]
        assert [len(f) for f in folds] == [10] * 9
        assert all(not (folds[i] & folds[j]) for i in range(9) for j in range(i + 1, 9))
        assert set().union(*folds) == {s.sample_id for s in corpus.samples}

        ss = generate_synthetic(SyntheticConfig(scene_count=100, agents_per_scene=2, duration=8.0, seed=10))
        corpus = assemble_corpus([(ss, None)], DataParams(5, 6, 0.5, t0_policy="first_available"))
        split = make_split(corpus, SplitSpec("random", test_fraction=0.11, seed=0))
        assert len(corpus.samples) == 100 and len(split.test_ids) == 11 and len(split.train_ids) == 89
        info["cv_fold_sizes"] = "9x10"
        info["random_test"] = len(split.test_ids)


# --------------------------------------------------------------------------- 4, 5

def _oracle_displacement(traj, truth):
    """Loop-level minADE/minFDE (marginal per agent, joint) and miss flags at 2 m."""
    k, P, T, _ = traj.shape
    ade = [[sum(math.hypot(*(traj[i, a, t] - truth[a, t])) for t in range(T)) / T for a in range(P)]
           for i in range(k)]
    fde = [[math.hypot(*(traj[i, a, T - 1] - truth[a, T - 1])) for a in range(P)] for i in range(k)]
    return {
        "ade": [min(ade[i][a] for i in range(k)) for a in range(P)],
        "fde": [min(fde[i][a] for i in range(k)) for a in range(P)],
        "ade_j": min(sum(ade[i]) / P for i in range(k)),
        "fde_j": min(sum(fde[i]) / P for i in range(k)),
        "miss": [float(min(fde[i][a] for i in range(k)) > 2.0) for a in range(P)],
    }


def _oracle_auc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [b for b, l in zip(s, y) if not l]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _oracle_ece(s, y, n_bins=10):
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        idx = [i for i, v in enumerate(s) if lo <= v < hi or (b == n_bins - 1 and v == 1.0)]
        if idx:
            conf = sum(s[i] for i in idx) / len(idx)
            acc = sum(y[i] for i in idx) / len(idx)
            total += len(idx) / len(s) * abs(acc - conf)
    return total


def _fixtures(n=200, seed=2024):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        k, P, T = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        truth = rng.normal(size=(P, T, 2)) * 5
        yield truth[None] + rng.normal(size=(k, P, T, 2)) * rng.uniform(0.1, 3.0), truth


def test_04_metric_oracles():
    with criterion(4, "metric oracle equivalence", budget_s=30) as info:
        rng = np.random.default_rng(7)
        worst = 0.0
        for traj, truth in _fixtures():
            o = _oracle_displacement(traj, truth)
            got = {"ade": min_ade(traj, truth), "fde": min_fde(traj, truth),
                   "ade_j": min_ade(traj, truth, "joint"), "fde_j": min_fde(traj, truth, "joint"),
                   "miss": miss_flags(traj, truth, 2.0)}
            for key in o:
                worst = max(worst, float(np.max(np.abs(np.asarray(got[key]) - np.asarray(o[key])))))
        assert worst <= 1e-9, f"displacement max error {worst}"
        info["displacement_err"] = f"{worst:.1e}"

        worst_auc = worst_ece = 0.0
        for i in range(200):
            n = int(rng.integers(2, 60))
            s = rng.uniform(size=n)
            if i % 2:  # ties and bin edges
                s = np.round(s * 20) / 20
            y = rng.uniform(size=n) < s
            y[0], y[1] = True, False
            worst_auc = max(worst_auc, abs(auc(s, y) - _oracle_auc(list(s), list(y))))
            worst_ece = max(worst_ece, abs(ece(s, y) - _oracle_ece(list(s), [float(v) for v in y])))
        assert worst_auc <= 1e-9 and worst_ece <= 1e-9, (worst_auc, worst_ece)
        info["auc_err"] = f"{worst_auc:.1e}"
        info["ece_err"] = f"{worst_ece:.1e}"

        worst_b = 0.0
        for i in range(200):
            n = int(rng.integers(2, 80))
            vals = list(rng.normal(size=n) * 10 ** rng.uniform(-3, 3))
            ws = list(rng.integers(1, 4, size=n).astype(float))
            whole = aggregate([BatchMetric("min_ade", vals, ws)]).value
            cuts = sorted(set(rng.integers(1, n, size=int(rng.integers(1, 5))).tolist()))
            bounds = [0] + cuts + [n]
            parts = [BatchMetric("min_ade", vals[a:b], ws[a:b]) for a, b in zip(bounds, bounds[1:])]
            worst_b = max(worst_b, abs(aggregate(parts).value - whole) / max(1.0, abs(whole)))
            s = rng.uniform(size=n)
            pairs = [(float(v), int(v > 0.5) if j > 1 else j) for j, v in enumerate(s)]
            for mid in ("auc", "ece"):
                whole = aggregate([BatchMetric(mid, pairs=pairs)]).value
                split = aggregate([BatchMetric(mid, pairs=pairs[a:b]) for a, b in zip(bounds, bounds[1:])]).value
                worst_b = max(worst_b, abs(split - whole))
        assert worst_b <= 1e-12, f"batching error {worst_b}"
        info["batching_err"] = f"{worst_b:.1e}"


def _road_predictions():
    ss = generate_synthetic(SyntheticConfig(scene_count=12, agents_per_scene=4, noise_sigma=0.05, seed=13))
    corpus = assemble_corpus([(ss, None)], DataParams(5, 6, 0.5, t0_policy="regular_spacing", gap=2.0))
    out = []
    for kind in ("constant_velocity", "linear_ar"):
        st = model_train(model_init(ModelSpec(kind, kind), corpus.params), list(corpus.samples))
        preds = model_predict(st, list(corpus.samples), 6, 0)
        out += [(preds[s.sample_id].trajectories, s.pred_future) for s in corpus.samples]
    return out


def test_05_joint_vs_marginal():
    with criterion(5, "joint-vs-marginal inequality") as info:
        scenes = list(_fixtures()) + _road_predictions()
        violations = 0
        for traj, truth in scenes:
            for fn in (min_ade, min_fde):
                marg = float(np.mean(fn(traj, truth)))
                # tolerance covers summation-order rounding only
                if fn(traj, truth, "joint") < marg - 1e-12 * max(1.0, marg):
                    violations += 1
        assert violations == 0, f"{violations} violations"
        info["scenes"] = len(scenes)
        info["violations"] = violations


# --------------------------------------------------------------------------- 6

def _attack_plan(d_max):
    return road_plan(
        datasets=[{"id": "road", "synthetic": {"scene_count": 20, "agents_per_scene": 3, "duration": 10.0,
                                               "noise_sigma": 0.05, "seed": 11}}],
        perturbations=[{"id": "atk", "kind": "attack_controls", "d_max": d_max, "target_model": "ar"}],
        corpora=[{"id": "clean", "members": ["road"]},
                 {"id": "attacked", "members": [{"dataset": "road", "perturbation": "atk"}]}],
        models=[{"id": "ar", "kind": "linear_ar"}])


def test_06_attack_contract(tmp_path):
    with criterion(6, "attack contract", budget_s=180) as info:
        ratios = {}
        for d_max in (0.25, 0.5, 1.0):
            plan = parse_simulation_file(write_plan(tmp_path, _attack_plan(d_max), f"atk{d_max}"))
            records, runner = run_plan(plan, cache_dir=tmp_path / "cache")
            clean, attacked = records
            assert attacked.status == "computed"
            assert clean.status == ("computed" if d_max == 0.25 else "cached")  # clean side is shared
            ratios[d_max] = attacked.value / clean.value

            case = next(c for c in enumerate_cases(plan) if c.corpus.corpus_id == "attacked")
            keys = case_keys(plan, case)
            corpus = runner.corpus(keys["corpus"], case.corpus, case.data_params)
            originals = {(s.scene_id, s.t0): s for s in corpus.samples}
            out = load_corpus(tmp_path / "cache" / "attacks" / f"{keys['attacks']['atk']['attack']}.bin")
            worst, attacked_n = 0.0, 0
            for s in out.samples:
                o = originals[(s.scene_id, s.t0)]
                dev = np.hypot(*(np.concatenate([s.past, s.future], 1)
                                 - np.concatenate([o.past, o.future], 1)).transpose(2, 0, 1))
                worst = max(worst, float(np.nanmax(dev)))
                if "attack_infeasible" in s.flags or "degenerate_victim" in s.flags:
                    assert np.nanmax(dev) == 0.0
                    continue
                attacked_n += 1
                for ai in s.predict_index:
                    assert control_bounds_ok(s, int(ai), 4.0, 0.5), (s.sample_id, ai)
            assert worst <= d_max + 1e-9, f"d_max={d_max}: deviation {worst}"
            assert attacked_n > 0
            info[f"dev@{d_max}"] = f"{worst:.4f}"
        assert ratios[0.5] >= 1.2, f"minADE ratio {ratios[0.5]:.3f} < 1.2 at d_max=0.5"
        info["ratio"] = "/".join(f"{ratios[d]:.2f}" for d in (0.25, 0.5, 1.0))


# --------------------------------------------------------------------------- 7

def _central_difference(state, sample, spec, h=1e-5):
    g = np.zeros((len(sample.predict_index), sample.n_I, 2))
    for v, ai in enumerate(sample.predict_index):
        for j in range(sample.n_I):
            for c in range(2):
                up, dn = sample.past.copy(), sample.past.copy()
                up[ai, j, c] += h
                dn[ai, j, c] -= h
                g[v, j, c] = (attack_loss(state, sample.replace(past=up), spec)
                              - attack_loss(state, sample.replace(past=dn), spec)) / (2 * h)
    return g


def test_07_gradient_check():
    with criterion(7, "gradient check") as info:
        rng = np.random.default_rng(77)
        samples = random_linear_samples(80, rng, noise=0.2)
        dp = DataParams(5, 6, 0.5)
        models = [model_train(model_init(ModelSpec(k, k), dp), samples[:30]) for k in ("linear_ar", "constant_velocity")]
        worst = 0.0
        for i, s in enumerate(samples[30:]):
            state = models[i % 2]
            spec = LossSpec(k=6, seed=int(rng.integers(0, 1000)))
            _, g, _ = prediction_loss_gradient(state, s, spec)
            fd = _central_difference(state, s, spec)
            worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-12)))
        assert worst <= 1e-5, f"max relative error {worst}"
        info["cases"] = 50
        info["max_rel_err"] = f"{worst:.1e}"


# --------------------------------------------------------------------------- 8

def test_08_variability_workflow(tmp_path):
    with criterion(8, "variability workflow", budget_s=120) as info:
        plan = road_plan(
            datasets=[{"id": "road", "synthetic": {"scene_count": 18, "agents_per_scene": 2, "duration": 8.0,
                                                   "noise_sigma": 0.05, "seed": 14}}],
            splits=[{"id": "cv", "method": "cross_validation", "n_folds": 9, "folds": [0, 1, 2]}],
            models=[{"id": "ar", "kind": "linear_ar"}, _cv0()], seeds=[0, 1, 2, 3, 4])
        p = parse_simulation_file(write_plan(tmp_path, plan))
        records, _ = run_plan(p)
        assert len(records) == 30 and {r.status for r in records} == {"computed"}
        rows = [r for r in spread_rows(read_store(p.output_dir)) if r["scope"] == "seeds"]
        assert sorted((r["model"], r["fold"]) for r in rows) == sorted((m, f) for m in ("ar", "cv0")
                                                                       for f in range(3))
        assert all(r["count"] == 5 for r in rows)
        ar = [r["spread"] for r in rows if r["model"] == "ar"]
        cv = [r["spread"] for r in rows if r["model"] == "cv0"]
        assert min(ar) > 0, ar
        assert max(cv) == 0.0, cv
        assert (p.output_dir / "spread.csv").exists()
        info["ar_spread"] = f"{min(ar):.2e}..{max(ar):.2e}"
        info["cv_spread"] = max(cv)


# --------------------------------------------------------------------------- 9

def test_09_generalizability_workflow(tmp_path):
    with criterion(9, "generalizability workflow") as info:
        ds = lambda did, loc, seed: {"id": did, "synthetic": {"scene_count": 10, "agents_per_scene": 2,
                                                              "duration": 8.0, "noise_sigma": 0.05,
                                                              "seed": seed, "location_id": loc}}
        values = {}
        for tag, ft in (("scaled", {}), ("zero", {"epochs": 0})):
            plan = road_plan(
                datasets=[ds("north", "locN", 1), ds("south", "locS", 2)],
                corpora=[{"id": "src", "members": ["north"]}, {"id": "tgt", "members": ["south"]}],
                models=[{"id": "ar", "kind": "linear_ar"}],
                transfer=[{"id": "gen", "source": "src", "target": "tgt", "split": "r", "fine_tune": ft}])
            p = parse_simulation_file(write_plan(tmp_path, plan, tag))
            run_plan(p, output_dir=tmp_path / tag)
            store = [r for r in read_store(tmp_path / tag) if r["transfer"] == "gen"]
            assert [r["source"] for r in store] == ["A", "AR", "R"]
            assert all(r["status"] == "ok" for r in store)
            values[tag] = {r["source"]: r["value"] for r in store}
        assert values["zero"]["AR"] == values["zero"]["A"]
        assert values["scaled"]["AR"] != values["scaled"]["A"]
        info["A/AR/R"] = "/".join(f"{values['scaled'][s]:.3f}" for s in ("A", "AR", "R"))


# --------------------------------------------------------------------------- 10

def test_10_caching_idempotence(tmp_path):
    with criterion(10, "caching idempotence") as info:
        plan = road_plan(
            perturbations=[{"id": "atk", "kind": "attack_positions", "d_max": 0.5, "iters": 5,
                            "target_model": "ar"}],
            corpora=[{"id": "c", "members": ["road", {"dataset": "road", "perturbation": "atk"}]}],
            data_params=[{"id": "A", "n_I": 5, "n_O": 6, "dt": 0.5, "t0_policy": "regular_spacing", "gap": 2.0},
                         {"id": "B", "T_I": 1.5, "T_O": 2.0, "dt": 0.25}],
            models=[{"id": "cv", "kind": "constant_velocity"}, {"id": "ar", "kind": "linear_ar"}],
            metrics=["min_ade", "min_fde_joint", "nll", "auc"], seeds=[0, 1])
        p = parse_simulation_file(write_plan(tmp_path, plan))
        first, r1 = run_plan(p)
        store = (p.output_dir / "results.jsonl").read_bytes()
        second, r2 = run_plan(p)
        assert r1.trainings > 0 and r2.trainings == 0
        assert [r.value for r in first] == [r.value for r in second]
        assert (p.output_dir / "results.jsonl").read_bytes() == store
        info["cases"] = len(first)
        info["trainings"] = f"{r1.trainings}->{r2.trainings}"


# --------------------------------------------------------------------------- 11

def test_11_plugin_conformance():
    with criterion(11, "plugin conformance") as info:
        cmd = [sys.executable, "-m", "stepbench.plugins.reference_cv"]
        samples = conformance_fixture()
        results = run_conformance(cmd, samples, builtin_kind="constant_velocity")
        failed = [r for r in results if not r[1]]
        assert not failed, failed
        plug = model_train(model_init(ModelSpec("p", "external_plugin", command=tuple(cmd))), samples)
        cv = model_train(model_init(ModelSpec("cv", "constant_velocity")), samples)
        a, b = model_predict(plug, samples, 6, 3), model_predict(cv, samples, 6, 3)
        for s in samples:
            assert np.array_equal(a[s.sample_id].trajectories, b[s.sample_id].trajectories)
        info["checks"] = len(results)
        info["samples"] = len(samples)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
