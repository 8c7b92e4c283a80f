"""Reference plugin: a constant-velocity predictor speaking step-plugin/1.

Standalone on purpose (numpy + stdlib only) so it doubles as a template for
wrapping external models. Run as ``python -m stepbench.plugins.reference_cv``.

Test switches: ``--version V`` announces another protocol version,
``--crash-on OP`` exits with status 3 when OP arrives, ``--sleep-on OP``
stalls for an hour on OP.
"""
import argparse
import hashlib
import json
import math
import sys
import time

import numpy as np

VERSION = "step-plugin/1"
LOG_2PI = math.log(2 * math.pi)


def arr(x):
    def fix(v):
        if isinstance(v, list):
            return [fix(u) for u in v]
        return math.nan if v is None else v
    return np.asarray(fix(x), dtype=float)


def rng_for(seed, sample_id):
    h = int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([int(seed), h])


def predicted(sample, key):
    a = arr(sample[key])
    idx = [sample["agent_ids"].index(p) for p in sample["predict_ids"]]
    return a[idx]


def cv_mean(past, n_O):
    last = past[:, -1]
    vel = last - past[:, -2]
    steps = np.arange(1, n_O + 1, dtype=float)
    return last[:, None, :] + steps[None, :, None] * vel[:, None, :]


def logpdf(r, sigma):
    return float(-0.5 * np.sum(r * r) / sigma ** 2 - r.size * (math.log(sigma) + 0.5 * LOG_2PI))


class Model:
    def __init__(self):
        self.sigma = 0.5
        self.fit_sigma = True
        self.residuals = []

    def params(self):
        return {"sigma": {"shape": [1], "data": [self.sigma]}}

    def init(self, p):
        hp = p["spec"].get("hyperparameters") or {}
        self.sigma = float(hp.get("sigma", 0.5))
        return {"params": self.params()}

    def load(self, p):
        self.sigma = float(p["params"]["sigma"]["data"][0])
        return {}

    def train_begin(self, p):
        self.load(p)
        self.fit_sigma = bool((p.get("hyperparameters") or {}).get("fit_sigma", True))
        self.residuals = []
        return {}

    def train_batch(self, p):
        for s in p["samples"]:
            past, fut = predicted(s, "past"), predicted(s, "future")
            self.residuals.append(cv_mean(past, s["n_O"]) - fut)
        return {}

    def train_end(self, p):
        r = np.concatenate([x.ravel() for x in self.residuals])
        if self.fit_sigma:
            self.sigma = float(np.sqrt(np.mean(r * r)))
        info = {"train_rms": float(np.sqrt(np.mean(r ** 2)))}
        self.residuals = []
        return {"params": self.params(), "info": info}

    def predict(self, p):
        out = []
        k, seed = p["k"], p["seed"]
        for s in p["samples"]:
            mu = cv_mean(predicted(s, "past"), s["n_O"])
            z = rng_for(seed, s["sample_id"]).standard_normal((k,) + mu.shape)
            traj = mu[None] + self.sigma * z
            ll = None
            if self.sigma > 0:
                ll = [logpdf(self.sigma * z[i], self.sigma) for i in range(k)]
            out.append({"sample_id": s["sample_id"], "agent_ids": s["predict_ids"],
                        "trajectories": traj.tolist(), "log_likelihood": ll})
        return {"predictions": out}

    def likelihood(self, p):
        if self.sigma <= 0:
            raise PluginFailure("DEGENERATE", "sigma = 0 has no density")
        s = p["sample"]
        r = arr(p["y"]) - cv_mean(predicted(s, "past"), s["n_O"])
        return {"log_density": logpdf(r, self.sigma)}


class PluginFailure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--version", default=VERSION)
    ap.add_argument("--crash-on")
    ap.add_argument("--sleep-on")
    args = ap.parse_args(argv)
    model = Model()
    out = sys.stdout

    def reply(op, payload):
        out.write(json.dumps({"op": op, "payload": payload}, allow_nan=False) + "\n")
        out.flush()

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        op, payload = msg["op"], msg.get("payload")
        if op == args.crash_on:
            print(f"reference_cv: crashing on {op}", file=sys.stderr)
            sys.exit(3)
        if op == args.sleep_on:
            time.sleep(3600)
        if op == "shutdown":
            break
        if op == "hello":
            if payload.get("version") != VERSION:
                reply("error", {"code": "PROTOCOL_ERROR", "message": f"unsupported version {payload.get('version')!r}"})
                continue
            reply("result", {"version": args.version, "capabilities": {
                "supports_train": True, "supports_likelihood": True,
                "supports_gradient": False, "fixed_set": False}})
            continue
        handler = getattr(model, op, None)
        if handler is None:
            reply("error", {"code": "PROTOCOL_ERROR", "message": f"unknown op {op!r}"})
            continue
        try:
            reply("result", handler(payload))
        except PluginFailure as exc:
            reply("error", {"code": exc.code, "message": str(exc)})
        except Exception as exc:  # noqa: BLE001
            print(f"reference_cv: {type(exc).__name__}: {exc}", file=sys.stderr)
            reply("error", {"code": "PLUGIN_ERROR", "message": str(exc)})


if __name__ == "__main__":
    main()
