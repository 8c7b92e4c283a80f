"""Case enumeration and execution with a content-addressed cache.

Every intermediate (corpus, split, trained model, attacked test set,
predictions, metric value) is stored under ``cache_dir/<kind>/<key>`` where
``key`` hashes everything the intermediate depends on. Keys are derived from
the plan alone (dataset files enter through their content hash), so the
set of keys a plan needs can be listed without running it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from ..errors import StepError
from ..ingestion import generate_synthetic, load_raw, transform_to_internal
from ..metrics import REGISTRY, aggregate, compute_batch
from ..perturbation import apply_perturbation
from ..predictors import core as pred
from ..predictors.baselines import KINDS
from ..sampling import Corpus, assemble_corpus, load_corpus, save_corpus
from ..scene import DataParams, SceneSet
from ..splitting import Split, SplitSpec, load_split, make_split, save_split
from ..storage import atomic_write_bytes, stable_hash
from .plan import CorpusDef, ExperimentPlan, TransferDef

log = logging.getLogger("stepbench")

SKIP_INFEASIBLE_SPLIT = "INFEASIBLE_SPLIT"
SKIP_NO_BEHAVIOR = "NO_BEHAVIOR_DATA"
SKIP_NO_TRAJECTORIES = "MODEL_NO_TRAJECTORIES"
SKIP_NO_LIKELIHOOD = "NO_LIKELIHOOD"
SKIP_SINGLE_CLASS = "SINGLE_CLASS"
SKIP_NO_DECIDED = "NO_DECIDED_SAMPLES"


# --------------------------------------------------------------------------- cases

@dataclass(frozen=True)
class ExperimentCase:
    index: int
    corpus: CorpusDef
    dp_id: str
    data_params: DataParams
    split_id: str
    split: SplitSpec
    model: pred.ModelSpec | None = None
    metric: str = ""
    seed: int = 0
    k: int = pred.DEFAULT_K
    source: str | None = None  # A | AR | R for transfer cases
    transfer: TransferDef | None = None
    skip: str | None = None
    resolved: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def case_hash(self) -> str:
        return stable_hash(self.resolved)

    @property
    def fold(self) -> int | None:
        return self.split.fold_index if self.split.method == "cross_validation" else None

    def identity(self) -> dict:
        return {"corpus": self.corpus.corpus_id, "data_params": self.dp_id, "split": self.split_id,
                "fold": self.fold, "model": self.model.model_id, "kind": self.model.kind,
                "metric": self.metric, "seed": self.seed, "k": self.k, "source": self.source,
                "transfer": None if self.transfer is None else self.transfer.transfer_id}



def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


class _Fingerprints:
    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self._memo: dict[str, dict] = {}

    def dataset(self, did: str) -> dict:
        if did not in self._memo:
            ds = self.plan.datasets[did]
            if ds.synthetic is not None:
                d = dataclasses.asdict(ds.synthetic)
                d["speed_range"] = list(d["speed_range"])
                self._memo[did] = {"synthetic": d}
            else:
                digest = _file_digest(ds.path) if ds.path.exists() else f"missing:{ds.path}"
                self._memo[did] = {"adapter": ds.adapter, "content": digest, "options": ds.options,
                                   "dataset_id": did}
        return self._memo[did]

    def corpus(self, cdef: CorpusDef) -> list:
        out = []
        for did, pid in cdef.members:
            pert = None
            if pid is not None:
                spec = self.plan.perturbations[pid]
                pert = dict(spec.to_dict(), id=pid)
                if spec.is_attack:
                    pert["target_model"] = self.plan.model(spec.target_model_ref).to_dict()
            out.append({"dataset": self.dataset(did), "perturbation": pert})
        return out


def _static_skip(plan: ExperimentPlan, cdef: CorpusDef, split: SplitSpec, model: pred.ModelSpec,
                 metric: str, k: int) -> str | None:
    ds = [plan.datasets[d] for d, _ in cdef.members]
    if split.method == "by_location":
        if split.held_out_kind == "dataset":
            values = {d.dataset_id for d in ds}
        else:
            locs = [d.locations for d in ds]
            values = None if any(x is None for x in locs) else set().union(*locs)
        if values is not None:
            held = set(split.held_out)
            if len(values) < 2 or not (held & values) or values <= held:
                return SKIP_INFEASIBLE_SPLIT
    mdef = REGISTRY[metric]
    no_behavior = all(d.behavior_known is False for d in ds)
    kind = KINDS.get(model.kind)
    if mdef.needs_trajectories and kind is not None and not kind.predicts_trajectories:
        return SKIP_NO_TRAJECTORIES
    if (mdef.needs_behavior or (kind is not None and kind.predicts_behavior)) and no_behavior:
        return SKIP_NO_BEHAVIOR
    if mdef.needs_likelihood and kind is not None and not kind.supports_likelihood and k < 2:
        return SKIP_NO_LIKELIHOOD
    return None


def enumerate_cases(plan: ExperimentPlan) -> list[ExperimentCase]:
    """Full cross product (corpus x data params x split/fold x model x metric x seed),
    then the A / AR / R triples of every transfer block. Infeasible combinations are
    kept with a skip reason."""
    fp = _Fingerprints(plan)
    cases = []
    mopts = plan.metric_options

    def add(cdef, dp_id, dp, sdef_id, spec, model, metric, seed, source=None, transfer=None):
        seeded = model.with_seed(seed)
        resolved = {
            "corpus": fp.corpus(cdef), "data_params": dp.to_dict(), "split": spec.to_dict(),
            "model": seeded.to_dict(), "metric": metric, "metric_options": mopts, "k": plan.k,
            "seed": seed, "validation_fraction": plan.validation_fraction,
        }
        if transfer is not None:
            resolved["transfer"] = {"source": fp.corpus(plan.corpus(transfer.source)), "label": source,
                                    "fine_tune": dataclasses.asdict(transfer.fine_tune)}
        skip = _static_skip(plan, cdef, spec, model, metric, plan.k)
        cases.append(ExperimentCase(len(cases), cdef, dp_id, dp, sdef_id, spec, seeded, metric, seed,
                                    plan.k, source, transfer, skip, resolved))

    for cdef in plan.corpora:
        for dp_id, dp in plan.data_params:
            for sdef in plan.splits:
                for spec in sdef.expanded():
                    for model in plan.models:
                        for metric in plan.metrics:
                            for seed in plan.seeds:
                                add(cdef, dp_id, dp, sdef.split_id, spec, model, metric, seed)
    for t in plan.transfer:
        target = plan.corpus(t.target)
        sdef = plan.split(t.split)
        for dp_id, dp in plan.data_params:
            for spec in sdef.expanded():
                for mid in t.models:
                    for metric in plan.metrics:
                        for seed in plan.seeds:
                            for source in ("A", "AR", "R"):
                                add(target, dp_id, dp, sdef.split_id, spec, plan.model(mid), metric, seed,
                                    source, t)
    return cases


# --------------------------------------------------------------------------- cache keys

def _k(*parts) -> str:
    return stable_hash(list(parts))


def fine_tune_schedule(model: pred.ModelSpec, ft) -> tuple[int | None, float | None]:
    """(epochs, lr) for fine-tuning: explicit values, else the model's schedule scaled."""
    kind = KINDS.get(model.kind)
    base_epochs = model.hyperparameters.get("epochs", getattr(kind, "default_epochs", None))
    base_lr = model.hyperparameters.get("lr", getattr(kind, "default_lr", None))
    epochs = ft.epochs
    if epochs is None and base_epochs is not None:
        epochs = int(round(base_epochs * ft.epochs_scale))
    lr = ft.lr
    if lr is None and base_lr is not None:
        lr = float(base_lr) * ft.lr_scale
    return epochs, lr


def case_keys(plan: ExperimentPlan, case: ExperimentCase) -> dict:
    r = case.resolved
    vf = plan.validation_fraction
    corpus = _k("corpus", r["corpus"], r["data_params"])
    split = _k("split", corpus, r["split"])
    keys = {"corpus": corpus, "split": split, "train": _k("train", split, r["model"], vf)}
    attacks = {}
    for (did, pid), member in zip(case.corpus.members, r["corpus"]):
        if pid is not None and plan.perturbations[pid].is_attack and pid not in attacks:
            target = plan.model(plan.perturbations[pid].target_model_ref).with_seed(case.seed)
            tkey = _k("train", split, target.to_dict(), vf)
            attacks[pid] = {"target_train": tkey, "attack": _k("attack", split, tkey, member["perturbation"])}
    keys["attacks"] = attacks
    model_key = keys["train"]
    if case.transfer is not None:
        src_corpus = _k("corpus", r["transfer"]["source"], r["data_params"])
        keys["source_corpus"] = src_corpus
        keys["train_source"] = _k("train_all", src_corpus, r["model"], vf)
        epochs, lr = fine_tune_schedule(case.model, case.transfer.fine_tune)
        keys["fine_tune"] = _k("finetune", keys["train_source"], split, {"epochs": epochs, "lr": lr})
        model_key = {"A": keys["train_source"], "AR": keys["fine_tune"], "R": keys["train"]}[case.source]
    keys["model"] = model_key
    keys["predictions"] = _k("predict", model_key, split, sorted(a["attack"] for a in attacks.values()),
                             case.k, case.seed)
    keys["metric"] = _k("metric", keys["predictions"], case.metric, r["metric_options"])
    return keys


def plan_cache_keys(plan: ExperimentPlan) -> dict[str, set[str]]:
    """Cache keys by store kind for every feasible case of ``plan``."""
    out: dict[str, set[str]] = defaultdict(set)
    for case in enumerate_cases(plan):
        if case.skip:
            continue
        k = case_keys(plan, case)
        out["corpora"].add(k["corpus"])
        out["splits"].add(k["split"])
        out["models"].add(k["model"])
        for a in k["attacks"].values():
            out["models"].add(a["target_train"])
            out["attacks"].add(a["attack"])
        if case.transfer is not None:
            out["corpora"].add(k["source_corpus"])
            out["models"].update((k["train_source"], k["train"]))
        out["predictions"].add(k["predictions"])
        out["metrics"].add(k["metric"])
    return out


# --------------------------------------------------------------------------- records

@dataclass
class ResultRecord:
    case: ExperimentCase
    status: str  # computed | cached | skipped | failed
    reason: str | None = None
    message: str | None = None
    value: float | None = None
    n: float | None = None
    timings: dict = field(default_factory=dict)
    trained: int = 0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.status in ("computed", "cached") and (self.value is None or not math.isfinite(self.value)):
            raise StepError("INVALID_RECORD", "computed records need a finite value")
        if self.status == "skipped" and not self.reason:
            raise StepError("INVALID_RECORD", "skipped records need a reason")

    def store_dict(self) -> dict:
        """Stable fields only: identical for a fresh and a cached evaluation."""
        d = {"case_hash": self.case.case_hash, **self.case.identity(),
             "direction": REGISTRY[self.case.metric].direction,
             "status": "ok" if self.status in ("computed", "cached") else self.status,
             "reason": self.reason, "value": self.value, "n": self.n, "version": __version__}
        if self.status == "failed":
            d["message"] = self.message
        return d

    def runlog_dict(self) -> dict:
        return {"case_hash": self.case.case_hash, "index": self.case.index, "status": self.status,
                "reason": self.reason, "trained": self.trained, "timings": self.timings,
                "warnings": self.warnings}


# --------------------------------------------------------------------------- runner

class Runner:
    """Executes cases of one plan; safe to call from several worker threads."""

    def __init__(self, plan: ExperimentPlan, cache_dir: Path | None = None):
        self.plan = plan
        self.cache = Path(cache_dir or plan.cache_dir)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._memo: dict[str, object] = {}
        self._scene_sets: dict[str, SceneSet] = {}
        self.trainings = 0
        self.attack_log: list[str] = []
        self._local = threading.local()

    # ---- infrastructure

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[key]

    def _path(self, kind: str, key: str, ext: str) -> Path:
        return self.cache / kind / f"{key}{ext}"

    def _warn(self, msg: str):
        log.warning(msg)
        getattr(self._local, "warnings", []).append(msg)

    def _cached(self, key: str, path: Path, load, build, save):
        """Memory, then disk, then build. A corrupt file is reported and rebuilt."""
        if key in self._memo:
            return self._memo[key], True
        with self._lock(key):
            if key in self._memo:
                return self._memo[key], True
            if path.exists():
                try:
                    obj = load(path)
                    self._memo[key] = obj
                    return obj, True
                except StepError as exc:
                    if exc.code != "CORRUPT_FILE":
                        raise
                    self._warn(f"cache entry {path} failed its integrity check; recomputing")
            obj = build()
            save(obj, path)
            self._memo[key] = obj
            return obj, False

    # ---- data

    def scene_set(self, did: str) -> SceneSet:
        with self._lock("dataset:" + did):
            if did not in self._scene_sets:
                ds = self.plan.datasets[did]
                if ds.synthetic is not None:
                    ss = generate_synthetic(ds.synthetic)
                else:
                    raw = load_raw(ds.path, ds.adapter)
                    opts = dict(ds.options, dataset_id=did) if ds.adapter == "drone_csv" else {}
                    ss = transform_to_internal(raw, **opts)
                    ss = dataclasses.replace(ss, dataset_id=did, scenes=tuple(
                        dataclasses.replace(s, dataset_id=did) for s in ss.scenes))
                self._scene_sets[did] = ss
            return self._scene_sets[did]

    def corpus(self, key: str, cdef: CorpusDef, dp: DataParams) -> Corpus:
        def build():
            sets = [(self.scene_set(did), None if pid is None else self.plan.perturbations[pid])
                    for did, pid in cdef.members]
            return assemble_corpus(sets, dp, defer_attacks=True)
        return self._cached(key, self._path("corpora", key, ".bin"), load_corpus, build, save_corpus)[0]

    def split(self, key: str, corpus: Corpus, spec: SplitSpec) -> Split:
        return self._cached(key, self._path("splits", key, ".json"), load_split,
                            lambda: make_split(corpus, spec), save_split)[0]

    # ---- models

    def _fit(self, key: str, spec: pred.ModelSpec, dp: DataParams, samples, base=None, epochs=None, lr=None):
        def build():
            self.trainings += 1
            self._local.trained = getattr(self._local, "trained", 0) + 1
            state = base if base is not None else pred.model_init(spec, dp)
            cfg = pred.TrainConfig(epochs=epochs, lr=lr, validation_fraction=self.plan.validation_fraction,
                                   fine_tune=base is not None, fingerprint=key)
            return pred.model_train(state, samples, cfg)
        return self._cached(key, self._path("models", key, ".ckpt"), lambda p: pred.model_load(spec, p),
                            build, pred.model_save)[0]

    def trained(self, key, spec, dp, corpus: Corpus, split: Split):
        train = [s for s in corpus.subset(split.train_ids)]
        return self._fit(key, spec, dp, train)

    def attacked_test(self, case: ExperimentCase, keys: dict, corpus: Corpus, split: Split) -> list:
        """Test samples with deferred attacks applied against their target models."""
        test = corpus.subset(split.test_ids)
        for pid, ak in keys["attacks"].items():
            pert = self.plan.perturbations[pid]
            target = self.plan.model(pert.target_model_ref).with_seed(case.seed)
            victims = [s for s in test if s.perturbation_id == pid and "pending_attack" in s.flags]

            def build(victims=victims, pert=pert, target=target, ak=ak):
                state = self.trained(ak["target_train"], target, case.data_params, corpus, split)
                lines: list[str] = []
                out = []
                for s in victims:
                    a = apply_perturbation(s, pert, {pert.target_model_ref: state}, log=lines)
                    out.append(a.replace(flags=tuple(f for f in a.flags if f != "pending_attack")))
                self.attack_log.extend(lines)
                atomic_write_bytes(self._path("attacks", ak["attack"], ".log"),
                                   ("\n".join(lines) + "\n").encode("utf-8"))
                return Corpus(tuple(out), ((pid, pid),), corpus.params)

            done = self._cached(ak["attack"], self._path("attacks", ak["attack"], ".bin"), load_corpus,
                                build, save_corpus)[0]
            repl = {s.sample_id: s for s in done.samples}
            test = [repl.get(s.sample_id, s) for s in test]
        return test

    def eval_model(self, case: ExperimentCase, keys: dict, corpus: Corpus, split: Split):
        dp = case.data_params
        if case.transfer is None or case.source == "R":
            return self.trained(keys["train"], case.model, dp, corpus, split)
        src_def = self.plan.corpus(case.transfer.source)
        src = self.corpus(keys["source_corpus"], src_def, dp)
        base = self._fit(keys["train_source"], case.model, dp, list(src.samples))
        if case.source == "A":
            return base
        epochs, lr = fine_tune_schedule(case.model, case.transfer.fine_tune)
        return self._fit(keys["fine_tune"], case.model, dp, corpus.subset(split.train_ids), base=base,
                         epochs=epochs, lr=lr)

    def predictions(self, key: str, state, samples, case: ExperimentCase):
        return self._cached(key, self._path("predictions", key, ".bin"), pred.load_predictions,
                            lambda: pred.model_predict(state, samples, case.k, case.seed),
                            pred.save_predictions)[0]

    # ---- one case

    def run_case(self, case: ExperimentCase) -> ResultRecord:
        self._local.trained = 0
        self._local.warnings = []
        if case.skip:
            return ResultRecord(case, "skipped", case.skip)
        t_start = time.perf_counter()
        timings = {}
        try:
            keys = case_keys(self.plan, case)
            mpath = self._path("metrics", keys["metric"], ".json")
            if mpath.exists():
                try:
                    d = json.loads(mpath.read_text(encoding="utf-8"))
                    if d.get("key") == keys["metric"]:
                        return self._record(case, "cached", d, t_start, timings)
                except (json.JSONDecodeError, UnicodeDecodeError):
                    pass
                self._warn(f"cache entry {mpath} is unreadable; recomputing")
            t = time.perf_counter()
            corpus = self.corpus(keys["corpus"], case.corpus, case.data_params)
            try:
                split = self.split(keys["split"], corpus, case.split)
            except StepError as exc:
                if exc.code in ("INFEASIBLE", "EMPTY_SIDE"):
                    return ResultRecord(case, "skipped", SKIP_INFEASIBLE_SPLIT, str(exc))
                raise
            timings["data"] = time.perf_counter() - t
            mdef = REGISTRY[case.metric]
            t = time.perf_counter()
            test = self.attacked_test(case, keys, corpus, split)
            if mdef.needs_behavior and not any(s.behavior_label is not None for s in test):
                return ResultRecord(case, "skipped", SKIP_NO_BEHAVIOR, "no behavior-labelled test samples")
            try:
                state = self.eval_model(case, keys, corpus, split)
            except StepError as exc:
                kind = KINDS.get(case.model.kind)
                if exc.code == "EMPTY_TRAIN" and kind is not None and kind.predicts_behavior:
                    return ResultRecord(case, "skipped", SKIP_NO_BEHAVIOR, str(exc))
                raise
            caps = pred.model_capabilities(case.model)
            if mdef.needs_trajectories and not caps["trajectories"]:
                return ResultRecord(case, "skipped", SKIP_NO_TRAJECTORIES)
            timings["train"] = time.perf_counter() - t
            t = time.perf_counter()
            preds = self.predictions(keys["predictions"], state, test, case)
            timings["predict"] = time.perf_counter() - t
            ctx = dict(self.plan.metric_options, state=state)
            batches = [compute_batch(case.metric, test[i:i + pred.BATCH_SIZE], preds, ctx)
                       for i in range(0, len(test), pred.BATCH_SIZE)]
            try:
                final = aggregate(batches, ctx, provenance=case.case_hash)
            except StepError as exc:
                if exc.code == "SINGLE_CLASS":
                    return ResultRecord(case, "skipped", SKIP_SINGLE_CLASS, str(exc))
                if exc.code == "EMPTY" and mdef.needs_behavior:
                    return ResultRecord(case, "skipped", SKIP_NO_DECIDED, str(exc))
                raise
            d = {"key": keys["metric"], "value": final.value, "n": final.n}
            atomic_write_bytes(mpath, json.dumps(d, sort_keys=True).encode("utf-8"))
            return self._record(case, "computed", d, t_start, timings)
        except Exception as exc:  # noqa: BLE001  one failing case must not stop the plan
            code = exc.code if isinstance(exc, StepError) else type(exc).__name__
            log.error("case %d (%s) failed: %s", case.index, case.case_hash[:12], exc)
            return ResultRecord(case, "failed", code, str(exc), trained=self._local.trained,
                                warnings=list(self._local.warnings))

    def _record(self, case, status, d, t_start, timings):
        timings["total"] = time.perf_counter() - t_start
        return ResultRecord(case, status, None, None, float(d["value"]), float(d["n"]), timings,
                            self._local.trained, list(self._local.warnings))


# --------------------------------------------------------------------------- plan level

def write_store(records: list[ResultRecord], output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    path = output_dir / "results.jsonl"
    text = "".join(json.dumps(r.store_dict(), sort_keys=True, allow_nan=False) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))
    with open(output_dir / "runlog.jsonl", "a", encoding="utf-8") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        for r in records:
            fh.write(json.dumps(dict(r.runlog_dict(), run=stamp), sort_keys=True) + "\n")
    return path


def run_plan(plan: ExperimentPlan, workers: int | None = None, output_dir: Path | None = None,
             cache_dir: Path | None = None, report: bool = True) -> tuple[list[ResultRecord], Runner]:
    """Run every case of ``plan``; returns records in case order."""
    cases = enumerate_cases(plan)
    runner = Runner(plan, cache_dir)
    n = workers or plan.workers
    if n <= 1:
        records = [runner.run_case(c) for c in cases]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(runner.run_case, cases))
    out = Path(output_dir or plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = write_store(records, out)
    if runner.attack_log:
        with open(out / "attack_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write("\n".join(runner.attack_log) + "\n")
    if report:
        from .report import emit_report
        emit_report(store, out)
    return records, runner


def run_attacks(plan: ExperimentPlan, cache_dir: Path | None = None, output_dir: Path | None = None) -> int:
    """Perturbation-only pre-pass: build every attacked test set the plan needs."""
    runner = Runner(plan, cache_dir)
    done = set()
    for case in enumerate_cases(plan):
        if case.skip:
            continue
        keys = case_keys(plan, case)
        if not keys["attacks"] or keys["split"] + str(case.seed) in done:
            continue
        done.add(keys["split"] + str(case.seed))
        corpus = runner.corpus(keys["corpus"], case.corpus, case.data_params)
        split = runner.split(keys["split"], corpus, case.split)
        runner.attacked_test(case, keys, corpus, split)
    out = Path(output_dir or plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if runner.attack_log:
        with open(out / "attack_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write("\n".join(runner.attack_log) + "\n")
    return len(done)
