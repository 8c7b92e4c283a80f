"""Simulation-file parsing and validation.

Every diagnostic names the offending node by its tree path (``root.models[1].kind``)
and, where the YAML parser recorded one, its line number.
"""
from __future__ import annotations

import dataclasses
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError, StepError
from ..ingestion import ADAPTERS, SyntheticConfig
from ..metrics import REGISTRY
from ..perturbation import PerturbationSpec
from ..predictors.core import DEFAULT_K, ModelSpec
from ..scene import DataParams
from ..splitting import SplitSpec

MODEL_KINDS = ("constant_velocity", "ctrv", "linear_ar", "logistic_behavior", "external_plugin")
FINE_TUNE_EPOCH_SCALE = 1.0 / 20.0
FINE_TUNE_LR_SCALE = 0.4


@dataclass(frozen=True)
class DatasetDef:
    dataset_id: str
    synthetic: SyntheticConfig | None = None
    adapter: str | None = None
    path: Path | None = None
    options: dict = field(default_factory=dict)

    @property
    def behavior_known(self) -> bool | None:
        """Whether the dataset carries gap-acceptance data; None if unknown before loading."""
        if self.synthetic is not None:
            return self.synthetic.scenario_kind == "roundabout_gap"
        return None

    @property
    def locations(self) -> set[str] | None:
        return {self.synthetic.location_id} if self.synthetic is not None else None


@dataclass(frozen=True)
class CorpusDef:
    corpus_id: str
    members: tuple[tuple[str, str | None], ...]  # (dataset id, perturbation id)


@dataclass(frozen=True)
class SplitDef:
    split_id: str
    spec: SplitSpec
    folds: tuple[int, ...] | None = None  # expanded fold indices (cross-validation)

    def expanded(self) -> list[SplitSpec]:
        if self.folds is None:
            return [self.spec]
        return [dataclasses.replace(self.spec, fold_index=f) for f in self.folds]


@dataclass(frozen=True)
class FineTuneDef:
    epochs: int | None = None
    lr: float | None = None
    epochs_scale: float = FINE_TUNE_EPOCH_SCALE
    lr_scale: float = FINE_TUNE_LR_SCALE


@dataclass(frozen=True)
class TransferDef:
    transfer_id: str
    source: str  # corpus id, all samples used for pre-training
    target: str  # corpus id
    split: str  # split id applied to the target corpus
    models: tuple[str, ...]
    fine_tune: FineTuneDef


@dataclass(frozen=True)
class ExperimentPlan:
    path: Path
    name: str
    datasets: dict[str, DatasetDef]
    perturbations: dict[str, PerturbationSpec]
    corpora: tuple[CorpusDef, ...]
    data_params: tuple[tuple[str, DataParams], ...]
    splits: tuple[SplitDef, ...]
    models: tuple[ModelSpec, ...]
    metrics: tuple[str, ...]
    seeds: tuple[int, ...]
    k: int = DEFAULT_K
    output_dir: Path = Path("results")
    cache_dir: Path = Path(".step_cache")
    workers: int = 1
    metric_options: dict = field(default_factory=dict)
    validation_fraction: float = 0.1
    transfer: tuple[TransferDef, ...] = ()
    lines: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def model(self, model_id: str) -> ModelSpec:
        return next(m for m in self.models if m.model_id == model_id)

    def corpus(self, corpus_id: str) -> CorpusDef:
        return next(c for c in self.corpora if c.corpus_id == corpus_id)

    def split(self, split_id: str) -> SplitDef:
        return next(s for s in self.splits if s.split_id == split_id)


# --------------------------------------------------------------------------- YAML with lines

def _line_map(node, path: str, lines: dict[str, int], where: str):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            if key in seen:
                raise ConfigError(f"{path}.{key}", "duplicate key", k.start_mark.line + 1)
            seen.add(key)
            _line_map(v, f"{path}.{key}", lines, where)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, f"{path}[{i}]", lines, where)


def load_yaml(path) -> tuple[Any, dict[str, int]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError("root", f"simulation file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("root", f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    lines: dict[str, int] = {}
    if node is not None:
        _line_map(node, "root", lines, str(path))
    return data, lines


# --------------------------------------------------------------------------- validation helpers

class _V:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, path, reason):
        line = self.lines.get(path)
        if line is None:  # fall back to the closest recorded ancestor
            p = path
            while line is None and ("." in p or "[" in p):
                p = p[:max(p.rfind("."), p.rfind("["))]
                line = self.lines.get(p)
        raise ConfigError(path, reason, line)

    def mapping(self, obj, path, required=(), optional=()):
        if not isinstance(obj, dict):
            self.fail(path, "expected a mapping")
        for key in obj:
            if key not in required and key not in optional:
                self.fail(f"{path}.{key}", f"unknown key {key!r}")
        for key in required:
            if key not in obj:
                self.fail(f"{path}.{key}", "missing required key")
        return obj

    def seq(self, obj, path, nonempty=True):
        if not isinstance(obj, list):
            self.fail(path, "expected a list")
        if nonempty and not obj:
            self.fail(path, "must not be empty")
        return obj

    def typed(self, obj, path, types, what):
        if isinstance(obj, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            self.fail(path, f"expected {what}")
        if not isinstance(obj, types):
            self.fail(path, f"expected {what}")
        return obj

    def ident(self, obj, path):
        return self.typed(obj, path, str, "a string id")

    def unique(self, items, path, what):
        seen = set()
        for i, x in enumerate(items):
            if x in seen:
                self.fail(f"{path}[{i}].id", f"duplicate {what} id {x!r}")
            seen.add(x)


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SyntheticConfig)}
_PERT_FIELDS = {"kind", "sigma", "d_max", "iters", "step_size", "a_max", "omega_max", "target_model",
                "victim_agent", "seed", "k", "probing"}
_SPLIT_FIELDS = {"method", "test_fraction", "held_out", "held_out_kind", "n_folds", "fold_index", "folds",
                 "label_key", "scene_coherent", "seed"}


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(os.path.normpath(base / q))


def parse_simulation_file(path) -> ExperimentPlan:
    """Parse and fully validate a simulation file."""
    path = Path(path)
    data, lines = load_yaml(path)
    v = _V(lines)
    if data is None:
        data = {}
    root = v.mapping(data, "root",
                     required=("datasets", "corpora", "data_params", "splits", "models", "metrics", "seeds"),
                     optional=("name", "output_dir", "cache_dir", "k", "workers", "perturbations",
                               "metric_options", "transfer", "training"))
    base = path.parent

    # datasets
    datasets: dict[str, DatasetDef] = {}
    for i, d in enumerate(v.seq(root["datasets"], "root.datasets")):
        p = f"root.datasets[{i}]"
        v.mapping(d, p, required=("id",), optional=("synthetic", "adapter", "path", "options"))
        did = v.ident(d["id"], f"{p}.id")
        if did in datasets:
            v.fail(f"{p}.id", f"duplicate dataset id {did!r}")
        if ("synthetic" in d) == ("adapter" in d):
            v.fail(p, "give exactly one of 'synthetic' or 'adapter'")
        if "synthetic" in d:
            cfg = v.mapping(d["synthetic"], f"{p}.synthetic", optional=tuple(_SYNTH_FIELDS))
            try:
                sc = SyntheticConfig.from_dict(dict(cfg, dataset_id=did))
            except (StepError, TypeError, ValueError) as exc:
                v.fail(f"{p}.synthetic", str(exc))
            datasets[did] = DatasetDef(did, synthetic=sc)
        else:
            adapter = v.ident(d["adapter"], f"{p}.adapter")
            if adapter not in ADAPTERS:
                v.fail(f"{p}.adapter", f"unknown adapter {adapter!r} (known: {sorted(ADAPTERS)})")
            if "path" not in d:
                v.fail(f"{p}.path", "missing required key")
            opts = d.get("options") or {}
            v.mapping(opts, f"{p}.options", optional=("scene_mode",))
            datasets[did] = DatasetDef(did, adapter=adapter, path=_resolve(base, str(d["path"])), options=opts)

    model_ids = []
    for i, m in enumerate(v.seq(root["models"], "root.models")):
        if isinstance(m, dict) and "id" in m:
            model_ids.append(m["id"])

    # perturbations
    perts: dict[str, PerturbationSpec] = {}
    for i, d in enumerate(v.seq(root.get("perturbations") or [], "root.perturbations", nonempty=False)):
        p = f"root.perturbations[{i}]"
        v.mapping(d, p, required=("id", "kind"), optional=tuple(_PERT_FIELDS))
        pid = v.ident(d["id"], f"{p}.id")
        if pid in perts:
            v.fail(f"{p}.id", f"duplicate perturbation id {pid!r}")
        kw = {k: val for k, val in d.items() if k not in ("id", "target_model")}
        if "target_model" in d:
            if d["target_model"] not in model_ids:
                v.fail(f"{p}.target_model", f"unknown model id {d['target_model']!r}")
            kw["target_model_ref"] = d["target_model"]
        try:
            perts[pid] = PerturbationSpec(name=pid, **kw)
        except (StepError, TypeError) as exc:
            v.fail(p, str(exc))

    # corpora
    corpora = []
    for i, d in enumerate(v.seq(root["corpora"], "root.corpora")):
        p = f"root.corpora[{i}]"
        v.mapping(d, p, required=("id", "members"))
        members = []
        for j, m in enumerate(v.seq(d["members"], f"{p}.members")):
            mp = f"{p}.members[{j}]"
            if isinstance(m, str):
                m = {"dataset": m}
            v.mapping(m, mp, required=("dataset",), optional=("perturbation",))
            if m["dataset"] not in datasets:
                v.fail(f"{mp}.dataset", f"unknown dataset id {m['dataset']!r}")
            pert = m.get("perturbation")
            if pert is not None and pert not in perts:
                v.fail(f"{mp}.perturbation", f"unknown perturbation id {pert!r}")
            if (m["dataset"], pert) in members:
                v.fail(mp, "duplicate corpus member")
            members.append((m["dataset"], pert))
        corpora.append(CorpusDef(v.ident(d["id"], f"{p}.id"), tuple(members)))
    v.unique([c.corpus_id for c in corpora], "root.corpora", "corpus")

    # data params
    dps = []
    for i, d in enumerate(v.seq(root["data_params"], "root.data_params")):
        p = f"root.data_params[{i}]"
        v.mapping(d, p, required=("dt",), optional=("id", "n_I", "n_O", "T_I", "T_O", "t0_policy", "gap", "lead"))
        kw = {k: d[k] for k in ("t0_policy", "gap", "lead") if k in d}
        try:
            if "T_I" in d or "T_O" in d:
                if "n_I" in d or "n_O" in d:
                    v.fail(p, "give either n_I/n_O or T_I/T_O")
                dp = DataParams.from_horizon(float(d["T_I"]), float(d["T_O"]), float(d["dt"]), **kw)
            else:
                dp = DataParams(int(d["n_I"]), int(d["n_O"]), float(d["dt"]), **kw)
        except KeyError as exc:
            v.fail(f"{p}.{exc.args[0]}", "missing required key")
        except (StepError, TypeError, ValueError) as exc:
            v.fail(p, str(exc))
        dps.append((str(d.get("id", f"A{i}")), dp))
    v.unique([x[0] for x in dps], "root.data_params", "data_params")

    # splits
    splits = []
    for i, d in enumerate(v.seq(root["splits"], "root.splits")):
        p = f"root.splits[{i}]"
        v.mapping(d, p, required=("id", "method"), optional=tuple(_SPLIT_FIELDS | {"id"}))
        kw = {k: val for k, val in d.items() if k not in ("id", "folds")}
        if "held_out" in kw:
            kw["held_out"] = tuple(v.seq(kw["held_out"], f"{p}.held_out"))
        folds = None
        if d["method"] == "cross_validation" and "folds" in d:
            n = int(d.get("n_folds", 9))
            f = d["folds"]
            if f == "all":
                folds = tuple(range(n))
            else:
                folds = tuple(int(x) for x in v.seq(f, f"{p}.folds"))
                if any(not 0 <= x < n for x in folds):
                    v.fail(f"{p}.folds", f"fold indices must lie in [0, {n})")
            kw["fold_index"] = folds[0]
        elif "folds" in d:
            v.fail(f"{p}.folds", "only cross_validation splits take 'folds'")
        try:
            spec = SplitSpec(**kw)
        except (StepError, TypeError) as exc:
            v.fail(p, str(exc))
        splits.append(SplitDef(v.ident(d["id"], f"{p}.id"), spec, folds))
    v.unique([s.split_id for s in splits], "root.splits", "split")

    # models
    models = []
    for i, d in enumerate(root["models"]):
        p = f"root.models[{i}]"
        v.mapping(d, p, required=("id", "kind"), optional=("hyperparameters", "command"))
        kind = d["kind"]
        if kind not in MODEL_KINDS:
            v.fail(f"{p}.kind", f"unknown model kind {kind!r} for model {d['id']!r}")
        cmd = d.get("command")
        if kind == "external_plugin":
            if not cmd:
                v.fail(f"{p}.command", "external_plugin needs a command")
            cmd = tuple(shlex.split(cmd) if isinstance(cmd, str) else (str(c) for c in cmd))
        elif cmd is not None:
            v.fail(f"{p}.command", "only external_plugin models take a command")
        hp = d.get("hyperparameters") or {}
        v.mapping(hp, f"{p}.hyperparameters", optional=tuple(hp))
        models.append(ModelSpec(v.ident(d["id"], f"{p}.id"), kind, dict(hp), 0, cmd))
    v.unique([m.model_id for m in models], "root.models", "model")

    # metrics, seeds
    metrics = []
    for i, m in enumerate(v.seq(root["metrics"], "root.metrics")):
        if m not in REGISTRY:
            v.fail(f"root.metrics[{i}]", f"unknown metric id {m!r} (known: {sorted(REGISTRY)})")
        metrics.append(m)
    seeds = []
    for i, s in enumerate(v.seq(root["seeds"], "root.seeds")):
        seeds.append(v.typed(s, f"root.seeds[{i}]", int, "an integer seed"))
    mopts = v.mapping(root.get("metric_options") or {}, "root.metric_options",
                      optional=("miss_threshold", "ece_bins"))
    training = v.mapping(root.get("training") or {}, "root.training", optional=("validation_fraction",))

    # transfer
    transfers = []
    corpus_ids = {c.corpus_id for c in corpora}
    split_ids = {s.split_id for s in splits}
    for i, d in enumerate(v.seq(root.get("transfer") or [], "root.transfer", nonempty=False)):
        p = f"root.transfer[{i}]"
        v.mapping(d, p, required=("id", "source", "target", "split"), optional=("models", "fine_tune"))
        for key in ("source", "target"):
            if d[key] not in corpus_ids:
                v.fail(f"{p}.{key}", f"unknown corpus id {d[key]!r}")
        if d["split"] not in split_ids:
            v.fail(f"{p}.split", f"unknown split id {d['split']!r}")
        mids = d.get("models") or [m.model_id for m in models]
        for j, mid in enumerate(mids):
            if mid not in model_ids:
                v.fail(f"{p}.models[{j}]", f"unknown model id {mid!r}")
        ft = v.mapping(d.get("fine_tune") or {}, f"{p}.fine_tune",
                       optional=("epochs", "lr", "epochs_scale", "lr_scale"))
        transfers.append(TransferDef(v.ident(d["id"], f"{p}.id"), d["source"], d["target"], d["split"],
                                     tuple(mids), FineTuneDef(**ft)))

    k = v.typed(root.get("k", DEFAULT_K), "root.k", int, "an integer")
    workers = v.typed(root.get("workers", 1), "root.workers", int, "an integer")
    if k < 1:
        v.fail("root.k", "k must be >= 1")
    if workers < 1:
        v.fail("root.workers", "workers must be >= 1")
    return ExperimentPlan(
        path=path, name=str(root.get("name", path.stem)), datasets=datasets, perturbations=perts,
        corpora=tuple(corpora), data_params=tuple(dps), splits=tuple(splits), models=tuple(models),
        metrics=tuple(metrics), seeds=tuple(seeds), k=k,
        output_dir=_resolve(base, str(root.get("output_dir", f"results/{path.stem}"))),
        cache_dir=_resolve(base, str(root.get("cache_dir", ".step_cache"))),
        workers=workers, metric_options=dict(mopts),
        validation_fraction=float(training.get("validation_fraction", 0.1)),
        transfer=tuple(transfers), lines=lines,
    )
