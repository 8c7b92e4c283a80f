"""Out-of-process models over a newline-delimited JSON protocol.

Every message is one line ``{"op": ..., "payload": ...}`` on the child's
stdin/stdout. The child answers each request with exactly one line whose op
is ``"result"`` or ``"error"``. Sample batches are chunked to at most 256
samples per message.

Request ops: ``hello``, ``init``, ``train_begin``, ``train_batch``,
``train_end``, ``load``, ``predict``, ``likelihood``, ``shutdown``.
"""
from __future__ import annotations

import atexit
import json
import math
import queue
import subprocess
import tempfile
import threading
from typing import Any

import numpy as np

from ..errors import PluginError, StepError
from ..storage import stable_hash
from .core import BATCH_SIZE, PredictionEntry

PROTOCOL_VERSION = "step-plugin/1"
DEFAULT_TIMEOUT = 60.0


def _nested(a: np.ndarray):
    """Array to nested lists with NaN as null."""
    a = np.asarray(a, float)
    out = a.tolist()

    def fix(x):
        if isinstance(x, list):
            return [fix(v) for v in x]
        return None if isinstance(x, float) and math.isnan(x) else x

    return fix(out) if np.isnan(a).any() else out


def _array(x) -> np.ndarray:
    def fix(v):
        if isinstance(v, list):
            return [fix(u) for u in v]
        return math.nan if v is None else v
    return np.asarray(fix(x), dtype=float)


def sample_to_wire(s, include_future: bool) -> dict:
    d = {"sample_id": s.sample_id, "dt": s.dt, "n_I": s.n_I, "n_O": s.n_O,
         "agent_ids": list(s.agent_ids), "agent_types": list(s.agent_types),
         "predict_ids": list(s.predict_ids), "past": _nested(s.past),
         "past_mask": s.past_mask.tolist()}
    if include_future:
        d["future"] = _nested(s.future)
        d["future_mask"] = s.future_mask.tolist()
    return d


def params_to_wire(params: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, float).ravel().tolist()}
            for k, v in sorted(params.items())}


def params_from_wire(d: dict) -> dict:
    return {k: np.asarray(v["data"], float).reshape(v["shape"]) for k, v in d.items()}


class PluginSession:
    """One child process; calls are serialized through a lock."""

    def __init__(self, command, timeout: float = DEFAULT_TIMEOUT, version: str = PROTOCOL_VERSION):
        self.command = list(command)
        self.timeout = timeout
        self._stderr = tempfile.TemporaryFile(mode="w+b")
        try:
            self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         stderr=self._stderr)
        except OSError as exc:
            raise PluginError("CRASH", f"cannot spawn {self.command}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._lock = threading.Lock()
        self.txn = threading.RLock()  # held across multi-message exchanges
        self.loaded_params: str | None = None
        try:
            reply = self.call("hello", {"version": version})
        except BaseException:
            self.close()
            raise
        if reply.get("version") != PROTOCOL_VERSION:
            self.close()
            raise PluginError("PROTOCOL_ERROR", f"plugin speaks {reply.get('version')!r}, expected {PROTOCOL_VERSION!r}")
        caps = reply.get("capabilities", {})
        self.capabilities = {
            "supports_train": bool(caps.get("supports_train", False)),
            "supports_likelihood": bool(caps.get("supports_likelihood", False)),
            "supports_gradient": bool(caps.get("supports_gradient", False)),
            "fixed_set": bool(caps.get("fixed_set", False)),
        }

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def stderr_text(self) -> str:
        self._stderr.flush()
        self._stderr.seek(0)
        return self._stderr.read().decode("utf-8", "replace")

    def call(self, op: str, payload: Any = None, timeout: float | None = None) -> Any:
        with self._lock:
            msg = json.dumps({"op": op, "payload": payload}, allow_nan=False) + "\n"
            try:
                self.proc.stdin.write(msg.encode("utf-8"))
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError):
                self._crash(op)
            try:
                line = self._lines.get(timeout=self.timeout if timeout is None else timeout)
            except queue.Empty:
                self.proc.kill()
                raise PluginError("TIMEOUT", f"op {op!r} exceeded {self.timeout if timeout is None else timeout}s",
                                  self.stderr_text()) from None
            if line is None:
                self._crash(op)
            try:
                reply = json.loads(line)
                rop, rpayload = reply["op"], reply.get("payload")
            except (ValueError, KeyError, TypeError):
                raise PluginError("PROTOCOL_ERROR", f"malformed reply to {op!r}: {line[:200]!r}") from None
            if rop == "error":
                detail = rpayload if isinstance(rpayload, dict) else {"message": str(rpayload)}
                code = detail.get("code", "PLUGIN_ERROR")
                if code == "PROTOCOL_ERROR":
                    raise PluginError(code, detail.get("message", ""), self.stderr_text())
                raise StepError(code, f"plugin: {detail.get('message', '')}")
            if rop != "result":
                raise PluginError("PROTOCOL_ERROR", f"unexpected reply op {rop!r}")
            return rpayload

    def _crash(self, op):
        try:
            code = self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            code = self.proc.wait()
        raise PluginError("CRASH", f"plugin exited with code {code} during {op!r}", self.stderr_text())

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write(b'{"op": "shutdown", "payload": null}\n')
                self.proc.stdin.flush()
                self.proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()
        self._stderr.close()


def plugin_session(command, timeout: float = DEFAULT_TIMEOUT) -> PluginSession:
    return PluginSession(command, timeout=timeout)


_SESSIONS: dict[tuple, PluginSession] = {}
_SESSIONS_LOCK = threading.Lock()


def shared_session(command) -> PluginSession:
    key = tuple(command)
    with _SESSIONS_LOCK:
        sess = _SESSIONS.get(key)
        if sess is None or sess.proc.poll() is not None:
            sess = _SESSIONS[key] = PluginSession(command)
        return sess


@atexit.register
def _close_all():
    for s in list(_SESSIONS.values()):
        try:
            s.close()
        except Exception:
            pass
    _SESSIONS.clear()


class PluginKind:
    """Adapts a plugin session to the in-process model-kind interface."""
    predicts_behavior = False
    predicts_trajectories = True
    is_affine = False

    def __init__(self, command):
        self.command = tuple(command)

    @property
    def session(self) -> PluginSession:
        return shared_session(self.command)

    @property
    def supports_likelihood(self):
        return self.session.capabilities["supports_likelihood"]

    @property
    def fixed_set(self):
        return self.session.capabilities["fixed_set"]

    def init_params(self, spec, data_params, rng):
        payload = {"spec": {"model_id": spec.model_id, "hyperparameters": spec.hyperparameters, "seed": spec.seed},
                   "data_params": None if data_params is None else data_params.to_dict()}
        return params_from_wire(self.session.call("init", payload)["params"])

    def _ensure_loaded(self, params):
        sess = self.session
        h = stable_hash(params_to_wire(params))
        if sess.loaded_params != h:
            sess.call("load", {"params": params_to_wire(params)})
            sess.loaded_params = h

    def train(self, state, batches, config):
        with self.session.txn:
            sess = self.session
            if not sess.capabilities["supports_train"]:
                raise StepError("UNSUPPORTED_KIND", "plugin does not support training")
            sess.call("train_begin", {"params": params_to_wire(state.params),
                                      "hyperparameters": state.spec.hyperparameters,
                                      "config": {"epochs": config.epochs, "lr": config.lr,
                                                 "fine_tune": config.fine_tune}})
            for b in batches:
                for i in range(0, len(b), BATCH_SIZE):
                    sess.call("train_batch", {"samples": [sample_to_wire(s, True) for s in b[i:i + BATCH_SIZE]]})
            reply = sess.call("train_end", None)
            sess.loaded_params = None
            return params_from_wire(reply["params"]), reply.get("info", {})

    def predict(self, state, samples, k, seed):
        with self.session.txn:
            self._ensure_loaded(state.params)
            out = []
            for i in range(0, len(samples), BATCH_SIZE):
                chunk = samples[i:i + BATCH_SIZE]
                reply = self.session.call("predict", {"samples": [sample_to_wire(s, False) for s in chunk],
                                                      "k": k, "seed": seed})
                by_id = {p["sample_id"]: p for p in reply["predictions"]}
                for s in chunk:
                    p = by_id.get(s.sample_id)
                    if p is None:
                        raise PluginError("PROTOCOL_ERROR", f"no prediction for {s.sample_id}")
                    traj = _array(p["trajectories"])
                    if traj.shape != (k, len(s.predict_ids), s.n_O, 2):
                        raise PluginError("PROTOCOL_ERROR", f"trajectory shape {traj.shape} for {s.sample_id}")
                    ll = None if p.get("log_likelihood") is None else _array(p["log_likelihood"])
                    out.append(PredictionEntry(s.sample_id, tuple(p.get("agent_ids", s.predict_ids)), traj, ll))
            return out

    def log_likelihood(self, state, sample, y):
        with self.session.txn:
            self._ensure_loaded(state.params)
            reply = self.session.call("likelihood", {"sample": sample_to_wire(sample, False), "y": _nested(y)})
            return float(reply["log_density"])


# --------------------------------------------------------------------------- conformance

def run_conformance(command, samples, builtin_kind: str | None = None, k: int = 6,
                    hyperparameters: dict | None = None) -> list[tuple[str, bool, str]]:
    """Exercise the full protocol on fixture ``samples``.

    Returns ``(check, passed, detail)`` triples. With ``builtin_kind`` the
    plugin's trained predictions must equal that builtin's bit-for-bit.
    """
    from .core import ModelSpec, TrainConfig, model_init, model_predict, model_train

    results = []

    def check(name, fn):
        try:
            detail = fn()
            results.append((name, True, detail or "ok"))
        except Exception as exc:  # noqa: BLE001 - report every failure as a row
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    hp = hyperparameters or {}
    sess = PluginSession(command)
    spec = ModelSpec("plugin", "external_plugin", hp, seed=0, command=tuple(command))
    state = {}

    def handshake():
        return f"capabilities {sess.capabilities}"

    def init():
        state["init"] = model_init(spec)
        return f"params {sorted(state['init'].params)}"

    def train():
        state["trained"] = model_train(state["init"], samples, TrainConfig())
        return f"info {state['trained'].info}"

    def shapes():
        ps = model_predict(state["trained"], samples, k, seed=1)
        for s in samples:
            traj = ps[s.sample_id].trajectories
            assert traj.shape == (k, len(s.predict_ids), s.n_O, 2), traj.shape
            assert np.all(np.isfinite(traj))
        state["pred"] = ps

    def determinism():
        ps = model_predict(state["trained"], samples, k, seed=1)
        for s in samples:
            assert np.array_equal(ps[s.sample_id].trajectories, state["pred"][s.sample_id].trajectories)

    def batching():
        for s in samples:
            one = model_predict(state["trained"], [s], k, seed=1)[s.sample_id].trajectories
            assert np.array_equal(one, state["pred"][s.sample_id].trajectories)

    def reload():
        shared_session(command).loaded_params = None
        ps = model_predict(state["trained"], samples, k, seed=1)
        for s in samples:
            assert np.array_equal(ps[s.sample_id].trajectories, state["pred"][s.sample_id].trajectories)

    def bad_version():
        try:
            PluginSession(command, version="step-plugin/0", timeout=10).close()
        except PluginError as exc:
            assert exc.code == "PROTOCOL_ERROR", exc.code
            return "rejected"
        raise AssertionError("plugin accepted a wrong protocol version")

    def builtin_equal():
        b = model_train(model_init(ModelSpec("builtin", builtin_kind, hp, seed=0)), samples, TrainConfig())
        bp = model_predict(b, samples, k, seed=1)
        for s in samples:
            assert np.array_equal(bp[s.sample_id].trajectories, state["pred"][s.sample_id].trajectories), s.sample_id
            llb, llp = bp[s.sample_id].log_likelihood, state["pred"][s.sample_id].log_likelihood
            assert (llb is None) == (llp is None) and (llb is None or np.array_equal(llb, llp))
        return f"bit-exact vs {builtin_kind} on {len(samples)} samples"

    try:
        check("handshake", handshake)
        check("init", init)
        check("train", train)
        check("predict_shapes", shapes)
        check("determinism", determinism)
        check("batching_invariance", batching)
        check("reload", reload)
        check("protocol_version_rejected", bad_version)
        if builtin_kind:
            check("builtin_equivalence", builtin_equal)
    finally:
        sess.close()
    return results
