"""Model contract: init / train / save+load / predict / likelihood, plus the
attack loss and its gradient with respect to victim positions.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..errors import StepError
from ..scene import DataParams
from ..storage import read_container, stable_hash, write_container

CKPT_MAGIC = b"STEPCKPT"
PRED_MAGIC = b"STEPPRED"
DEFAULT_K = 6
BATCH_SIZE = 256


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    kind: str
    hyperparameters: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    command: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "kind": self.kind, "hyperparameters": self.hyperparameters,
                "seed": self.seed, "command": None if self.command is None else list(self.command)}

    @property
    def spec_hash(self) -> str:
        return stable_hash(self.to_dict())

    def with_seed(self, seed: int) -> "ModelSpec":
        return dataclasses.replace(self, seed=seed)


@dataclass(frozen=True, eq=False)
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    trained: bool = False
    training_fingerprint: str | None = None
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.trained:
            if self.training_fingerprint is None:
                raise StepError("INVALID_STATE", "trained state needs a fingerprint")
            if not all(np.all(np.isfinite(v)) for v in self.params.values()):
                raise StepError("NUMERICAL", "trained parameters must be finite")


@dataclass(frozen=True, eq=False)
class PredictionEntry:
    sample_id: str
    agent_ids: tuple[str, ...]  # predicted agents, row order of ``trajectories``
    trajectories: np.ndarray | None  # (k, P, n_O, 2)
    log_likelihood: np.ndarray | None = None  # (k,) joint log-density of each draw
    behavior_probs: dict[str, float] | None = None


@dataclass(frozen=True, eq=False)
class PredictionSet:
    entries: dict[str, PredictionEntry]
    k: int
    seed: int
    fixed_set: bool = False

    def __getitem__(self, sample_id: str) -> PredictionEntry:
        return self.entries[sample_id]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int | None = None  # None -> the model's own default
    lr: float | None = None
    validation_fraction: float = 0.1
    fine_tune: bool = False
    fingerprint: str = ""


# --------------------------------------------------------------------------- RNG

def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample generator so draws do not depend on batching."""
    h = int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([int(seed), h])


# --------------------------------------------------------------------------- dispatch

def _kind(spec: ModelSpec):
    from .baselines import KINDS
    if spec.kind == "external_plugin":
        if not spec.command:
            raise StepError("UNKNOWN_KIND", f"{spec.model_id}: external_plugin without a command")
        from .plugin import PluginKind
        return PluginKind(spec.command)
    if spec.kind not in KINDS:
        raise StepError("UNKNOWN_KIND", spec.kind)
    return KINDS[spec.kind]


def model_capabilities(spec: ModelSpec) -> dict[str, bool]:
    k = _kind(spec)
    return {"trajectories": k.predicts_trajectories, "behavior": k.predicts_behavior,
            "likelihood": k.supports_likelihood, "gradient": k.is_affine}


def model_init(spec: ModelSpec, data_params: DataParams | None = None) -> ModelState:
    kind = _kind(spec)
    params = kind.init_params(spec, data_params, np.random.default_rng(spec.seed))
    return ModelState(spec, params)


def _carve_validation(samples: Sequence, fraction: float, seed: int):
    n = len(samples)
    n_val = int(np.floor(n * fraction)) if n >= 2 else 0
    n_val = min(n_val, n - 1)
    if n_val <= 0:
        return list(samples), []
    perm = np.random.default_rng([int(seed), 0x5A17]).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    fit = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return fit, val


def model_train(state: ModelState, samples: Sequence, config: TrainConfig | None = None) -> ModelState:
    """Fit on ``samples`` (consumed in batches). A validation fraction is
    carved off with the model seed and reported in ``info``."""
    config = config or TrainConfig()
    if len(samples) == 0:
        raise StepError("EMPTY_TRAIN", f"{state.spec.model_id}: no training samples")
    if state.trained and not config.fine_tune:
        raise StepError("ALREADY_TRAINED", "use fine_tune=True to continue training")
    kind = _kind(state.spec)
    if config.fine_tune and config.epochs == 0:
        return state
    fit, val = _carve_validation(samples, config.validation_fraction, state.spec.seed)
    batches = [fit[i:i + BATCH_SIZE] for i in range(0, len(fit), BATCH_SIZE)]
    params, info = kind.train(state, batches, config)
    info = dict(info, n_fit=len(fit), n_validation=len(val))
    fingerprint = stable_hash([state.training_fingerprint, config.fingerprint, state.spec.seed,
                               [s.sample_id for s in fit]])
    new = ModelState(state.spec, params, True, fingerprint, info)
    if val and kind.predicts_trajectories:
        from ..metrics import min_ade
        preds = model_predict(new, val, DEFAULT_K, state.spec.seed)
        vals = [float(np.mean(min_ade(preds[s.sample_id].trajectories, s.pred_future))) for s in val]
        info["validation_min_ade"] = float(np.mean(vals))
    return new


def model_predict(state: ModelState, samples: Sequence, k: int = DEFAULT_K, seed: int = 0) -> PredictionSet:
    if not state.trained:
        raise StepError("UNTRAINED", state.spec.model_id)
    if k < 1:
        raise StepError("INVALID_PARAMS", "k must be >= 1")
    kind = _kind(state.spec)
    entries = {}
    for i in range(0, len(samples), BATCH_SIZE):
        for e in kind.predict(state, samples[i:i + BATCH_SIZE], k, seed):
            entries[e.sample_id] = e
    return PredictionSet(entries, k, seed, fixed_set=getattr(kind, "fixed_set", False))


def model_log_likelihood(state: ModelState, sample, y=None) -> float:
    """Joint log-density of predicted-agent futures ``y`` (default: ground truth)."""
    kind = _kind(state.spec)
    if not kind.supports_likelihood:
        raise StepError("UNSUPPORTED_KIND", f"{state.spec.kind} has no closed-form likelihood")
    y = sample.pred_future if y is None else np.asarray(y, float)
    return kind.log_likelihood(state, sample, y)


# --------------------------------------------------------------------------- checkpoints

def model_save(state: ModelState, path) -> None:
    if not state.trained:
        raise StepError("UNTRAINED", "only trained models are saved")
    names = sorted(state.params)
    header = {"format": "step-checkpoint/1", "kind": state.spec.kind, "spec_hash": state.spec.spec_hash,
              "spec": state.spec.to_dict(), "fingerprint": state.training_fingerprint,
              "info": state.info, "names": names}
    write_container(path, CKPT_MAGIC, header, [state.params[n] for n in names])


def model_load(spec: ModelSpec, path) -> ModelState:
    header, arrays = read_container(path, CKPT_MAGIC)
    if header["kind"] != spec.kind:
        raise StepError("KIND_MISMATCH", f"checkpoint kind {header['kind']!r}, spec kind {spec.kind!r}")
    params = dict(zip(header["names"], arrays))
    return ModelState(spec, params, True, header["fingerprint"], header["info"])


def save_predictions(ps: PredictionSet, path) -> None:
    meta, arrays = [], []
    for sid, e in ps.entries.items():
        m = {"sample_id": sid, "agent_ids": list(e.agent_ids), "behavior_probs": e.behavior_probs,
             "has_traj": e.trajectories is not None, "has_ll": e.log_likelihood is not None}
        if e.trajectories is not None:
            arrays.append(e.trajectories)
        if e.log_likelihood is not None:
            arrays.append(e.log_likelihood)
        meta.append(m)
    write_container(path, PRED_MAGIC, {"k": ps.k, "seed": ps.seed, "fixed_set": ps.fixed_set,
                                       "entries": meta}, arrays)


def load_predictions(path) -> PredictionSet:
    header, arrays = read_container(path, PRED_MAGIC)
    it = iter(arrays)
    entries = {}
    for m in header["entries"]:
        traj = next(it) if m["has_traj"] else None
        ll = next(it) if m["has_ll"] else None
        entries[m["sample_id"]] = PredictionEntry(m["sample_id"], tuple(m["agent_ids"]), traj, ll,
                                                  m["behavior_probs"])
    return PredictionSet(entries, header["k"], header["seed"], header["fixed_set"])


# --------------------------------------------------------------------------- attack loss

@dataclass(frozen=True)
class LossSpec:
    k: int = DEFAULT_K
    seed: int = 0
    victims: tuple[int, ...] | None = None  # agent indices into the sample; None = predicted agents
    truth: np.ndarray | None = None  # (P, n_O, 2); None = the sample's own future
    probing: bool = True
    h: float = 1e-3


KINK_TOL = 1e-12  # m; distances this small sit on the norm's kink, subgradient 0


def _min_ade_loss(traj: np.ndarray, truth: np.ndarray):
    """Mean over agents of min-over-samples ADE, and d loss / d traj at the argmin."""
    diff = traj - truth[None]  # (k, P, T, 2)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))  # (k, P, T)
    ade = dist.mean(axis=-1)  # (k, P)
    best = np.argmin(ade, axis=0)  # (P,)
    P, T = truth.shape[0], truth.shape[1]
    loss = float(np.mean(ade[best, np.arange(P)]))
    g = np.zeros_like(traj)
    for a in range(P):
        d = diff[best[a], a]
        n = dist[best[a], a]
        safe = np.where(n > KINK_TOL, n, 1.0)
        g[best[a], a] = np.where((n > KINK_TOL)[:, None], d / safe[:, None], 0.0) / (T * P)
    return loss, g


def attack_loss(state: ModelState, sample, loss_spec: LossSpec = LossSpec()) -> float:
    truth = sample.pred_future if loss_spec.truth is None else loss_spec.truth
    pred = model_predict(state, [sample], loss_spec.k, loss_spec.seed)[sample.sample_id]
    return _min_ade_loss(pred.trajectories, truth)[0]


def prediction_loss_gradient(state: ModelState, sample, loss_spec: LossSpec = LossSpec()):
    """Loss and gradients w.r.t. victim past positions and w.r.t. the truth future.

    Returns ``(loss, grad_past (V, n_I, 2), grad_truth (P, n_O, 2))``. Affine
    kinds use the exact chain rule; others fall back to central differences.
    """
    kind = _kind(state.spec)
    victims = tuple(sample.predict_index) if loss_spec.victims is None else tuple(loss_spec.victims)
    truth = sample.pred_future if loss_spec.truth is None else np.asarray(loss_spec.truth, float)
    pred = model_predict(state, [sample], loss_spec.k, loss_spec.seed)[sample.sample_id]
    loss, g_traj = _min_ade_loss(pred.trajectories, truth)
    g_truth = -g_traj.sum(axis=0)
    if kind.is_affine:
        M = kind.mean_map(state, sample.n_I, sample.n_O)  # (n_O, n_I)
        g_pred = g_traj.sum(axis=0)  # (P, n_O, 2)
        pidx = list(sample.predict_index)
        grad = np.zeros((len(victims), sample.n_I, 2))
        for v, ai in enumerate(victims):
            if ai in pidx:
                grad[v] = M.T @ g_pred[pidx.index(ai)]
        return loss, grad, g_truth
    if not loss_spec.probing:
        raise StepError("GRADIENT_UNAVAILABLE", f"{state.spec.kind} has no analytic gradient and probing is off")
    grad = finite_difference_gradient(state, sample, victims, truth, loss_spec)
    return loss, grad, g_truth


def finite_difference_gradient(state: ModelState, sample, victims, truth, loss_spec: LossSpec) -> np.ndarray:
    h = loss_spec.h
    base = sample.past
    grad = np.zeros((len(victims), sample.n_I, 2))
    spec = dataclasses.replace(loss_spec, truth=truth)
    for v, ai in enumerate(victims):
        for j in range(sample.n_I):
            for c in range(2):
                up = base.copy()
                up[ai, j, c] += h
                dn = base.copy()
                dn[ai, j, c] -= h
                grad[v, j, c] = (attack_loss(state, sample.replace(past=up), spec)
                                 - attack_loss(state, sample.replace(past=dn), spec)) / (2 * h)
    return grad
