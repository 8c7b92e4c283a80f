"""Built-in baseline models.

Trajectory baselines sample predicted agents independently; the k draws are
indexed jointly (draw i of every agent forms joint sample i).
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import StepError
from ..scene import wrap_angle
from .core import ModelState, PredictionEntry, TrainConfig, sample_rng

LOG_2PI = math.log(2 * math.pi)


def _gauss_iid_logpdf(r: np.ndarray, sigma: float) -> float:
    return float(-0.5 * np.sum(r * r) / sigma ** 2 - r.size * (math.log(sigma) + 0.5 * LOG_2PI))


class ConstantVelocity:
    """Extrapolates the last observed displacement; isotropic Gaussian noise ``sigma``.

    Hyperparameters: ``sigma`` (initial value, default 0.5 m), ``fit_sigma``
    (default True: sigma becomes the RMS constant-velocity residual on train).
    """
    kind = "constant_velocity"
    default_epochs = None  # closed-form fit, no schedule
    default_lr = None
    predicts_trajectories = True
    predicts_behavior = False
    supports_likelihood = True
    is_affine = True

    def init_params(self, spec, data_params, rng):
        return {"sigma": np.array([float(spec.hyperparameters.get("sigma", 0.5))])}

    @staticmethod
    def mean(past: np.ndarray, n_O: int) -> np.ndarray:
        last = past[:, -1]
        vel = last - past[:, -2]
        steps = np.arange(1, n_O + 1, dtype=float)
        return last[:, None, :] + steps[None, :, None] * vel[:, None, :]

    def mean_map(self, state, n_I, n_O):
        M = np.zeros((n_O, n_I))
        steps = np.arange(1, n_O + 1, dtype=float)
        M[:, -1] = 1.0 + steps
        M[:, -2] = -steps
        return M

    def _residuals(self, batches):
        res = [self.mean(s.pred_past, s.n_O) - s.pred_future for b in batches for s in b]
        return np.concatenate([r.ravel() for r in res])

    def train(self, state: ModelState, batches, config: TrainConfig):
        hp = state.spec.hyperparameters
        sigma = state.params["sigma"]
        if hp.get("fit_sigma", True):
            r = self._residuals(batches)
            sigma = np.array([float(np.sqrt(np.mean(r * r)))])
        return {"sigma": sigma}, {"train_rms": float(np.sqrt(np.mean(self._residuals(batches) ** 2)))}

    def predict(self, state, samples, k, seed):
        sigma = float(state.params["sigma"][0])
        out = []
        for s in samples:
            mu = self.mean(s.pred_past, s.n_O)
            z = sample_rng(seed, s.sample_id).standard_normal((k,) + mu.shape)
            traj = mu[None] + sigma * z
            ll = None
            if sigma > 0:
                ll = np.array([_gauss_iid_logpdf(sigma * z[i], sigma) for i in range(k)])
            out.append(PredictionEntry(s.sample_id, s.predict_ids, traj, ll))
        return out

    def log_likelihood(self, state, sample, y):
        sigma = float(state.params["sigma"][0])
        if sigma <= 0:
            raise StepError("DEGENERATE", "sigma = 0 has no density")
        return _gauss_iid_logpdf(y - self.mean(sample.pred_past, sample.n_O), sigma)


class CTRV(ConstantVelocity):
    """Constant turn rate and velocity from the last three observations."""
    kind = "ctrv"
    is_affine = False

    @staticmethod
    def mean(past: np.ndarray, n_O: int) -> np.ndarray:
        d1 = past[:, -1] - past[:, -2]
        speed = np.hypot(d1[:, 0], d1[:, 1])
        h1 = np.arctan2(d1[:, 1], d1[:, 0])
        if past.shape[1] >= 3:
            d0 = past[:, -2] - past[:, -3]
            turn = wrap_angle(h1 - np.arctan2(d0[:, 1], d0[:, 0]))
            turn = np.where(np.hypot(d0[:, 0], d0[:, 1]) > 1e-9, turn, 0.0)
        else:
            turn = np.zeros(len(past))
        steps = np.arange(1, n_O + 1, dtype=float)
        heading = h1[:, None] + steps[None, :] * turn[:, None]
        step = speed[:, None, None] * np.stack([np.cos(heading), np.sin(heading)], axis=-1)
        return past[:, -1][:, None, :] + np.cumsum(step, axis=1)


class LinearAR:
    """Ridge regression from past displacements (relative to the t0 position)
    to future displacements, with weights shared by the x and y coordinates.

    Sharing weights across coordinates makes the predictor equivariant to
    rotations and translations, so no explicit agent-frame rotation is
    needed, and the mean prediction is affine in the past positions.
    Residuals are modelled as Gaussian with an ``n_O x n_O`` covariance per
    coordinate.

    Hyperparameters: ``ridge`` (1e-3), ``noise_floor`` (1e-3 m), ``epochs``
    (100, gradient-descent fine-tuning only), ``lr`` (0.5, relative to the
    Lipschitz constant of the squared loss).
    """
    kind = "linear_ar"
    default_epochs = 100
    default_lr = 0.5
    predicts_trajectories = True
    predicts_behavior = False
    supports_likelihood = True
    is_affine = True

    def init_params(self, spec, data_params, rng):
        if data_params is None:
            return {}
        return {"W": rng.normal(0.0, 0.01, (data_params.n_I - 1, data_params.n_O)),
                "chol": 0.5 * np.eye(data_params.n_O)}

    @staticmethod
    def _rows(s):
        X = np.transpose(s.pred_past, (0, 2, 1)).reshape(-1, s.n_I)  # (P*2, n_I)
        phi = X[:, :-1] - X[:, -1:]
        target = None
        if s.future is not None:
            target = np.transpose(s.pred_future, (0, 2, 1)).reshape(-1, s.n_O) - X[:, -1:]
        return phi, target, X[:, -1:]

    def _stack(self, batches):
        rows = [self._rows(s) for b in batches for s in b]
        return np.concatenate([r[0] for r in rows]), np.concatenate([r[1] for r in rows])

    def train(self, state: ModelState, batches, config: TrainConfig):
        hp = state.spec.hyperparameters
        lam = float(hp.get("ridge", 1e-3))
        floor = float(hp.get("noise_floor", 1e-3))
        phi, target = self._stack(batches)
        N, d = phi.shape
        A = phi.T @ phi
        B = phi.T @ target
        if config.fine_tune:
            if "W" not in state.params:
                raise StepError("UNTRAINED", "fine-tuning needs trained weights")
            W = state.params["W"].copy()
            epochs = int(hp.get("epochs", self.default_epochs) if config.epochs is None else config.epochs)
            lr = float(hp.get("lr", self.default_lr) if config.lr is None else config.lr)
            lip = float(np.linalg.eigvalsh(A / N)[-1]) + lam / N
            for _ in range(epochs):
                W -= (lr / lip) * ((A @ W - B) / N + (lam / N) * W)
        else:
            try:
                W = np.linalg.solve(A + lam * np.eye(d), B)
            except np.linalg.LinAlgError:
                raise StepError("NUMERICAL", "singular normal equations; increase 'ridge'") from None
        R = target - phi @ W
        cov = R.T @ R / N
        chol = np.linalg.cholesky(cov + floor ** 2 * np.eye(cov.shape[0]))
        rms = float(np.sqrt(np.mean(R * R)))
        return {"W": W, "chol": chol}, {"train_rms": rms}

    def _check(self, state, s):
        W = state.params["W"]
        if W.shape != (s.n_I - 1, s.n_O):
            raise StepError("SHAPE_MISMATCH", f"model trained for n_I={W.shape[0] + 1}, n_O={W.shape[1]}")
        return W

    def mean(self, state, s) -> np.ndarray:
        W = self._check(state, s)
        phi, _, last = self._rows(s.replace(future=None))
        mu = last + phi @ W  # (P*2, n_O)
        return np.transpose(mu.reshape(-1, 2, s.n_O), (0, 2, 1))

    def mean_map(self, state, n_I, n_O):
        W = state.params["W"]
        M = np.zeros((n_O, n_I))
        M[:, :-1] = W.T
        M[:, -1] = 1.0 - W.sum(axis=0)
        return M

    def _logpdf_rows(self, L, r):
        # r: (rows, n_O) independent Gaussian rows with covariance L L^T
        from scipy.linalg import solve_triangular
        z = solve_triangular(L, r.T, lower=True)
        n = r.shape[1]
        return float(-0.5 * np.sum(z * z) - r.shape[0] * (np.sum(np.log(np.diag(L))) + 0.5 * n * LOG_2PI))

    def predict(self, state, samples, k, seed):
        L = state.params["chol"]
        out = []
        for s in samples:
            mu = self.mean(state, s)
            z = sample_rng(seed, s.sample_id).standard_normal((k,) + mu.shape)
            eps = np.einsum("ts,kpsc->kptc", L, z)
            ll = np.array([self._logpdf_rows(L, np.transpose(eps[i], (0, 2, 1)).reshape(-1, s.n_O))
                           for i in range(k)])
            out.append(PredictionEntry(s.sample_id, s.predict_ids, mu[None] + eps, ll))
        return out

    def log_likelihood(self, state, sample, y):
        r = y - self.mean(state, sample)
        return self._logpdf_rows(state.params["chol"], np.transpose(r, (0, 2, 1)).reshape(-1, sample.n_O))


def gap_features(s) -> np.ndarray | None:
    """(gap distance [m], time to conflict [s]) of the circulating agent at t0."""
    g = s.gap
    if g is None or g.circulating_id not in s.agent_ids:
        return None
    c = s.agent_ids.index(g.circulating_id)
    p = s.past[c, -1]
    v = (s.past[c, -1] - s.past[c, -2]) / s.dt
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
        return None
    n = np.asarray(g.circ_normal, float)
    n = n / np.hypot(*n)
    dist = -float((p - np.asarray(g.point)) @ n)
    closing = float(v @ n)
    ttc = dist / closing if closing > 0.1 else math.copysign(100.0, dist)
    return np.array([dist, float(np.clip(ttc, -100.0, 100.0))])


class LogisticBehavior:
    """P(accepted | gap distance, time to conflict) by gradient-descent logistic regression.

    Hyperparameters: ``epochs`` (2000), ``lr`` (0.5), ``l2`` (1e-4).
    """
    kind = "logistic_behavior"
    default_epochs = 2000
    default_lr = 0.5
    predicts_trajectories = False
    predicts_behavior = True
    supports_likelihood = False
    is_affine = False

    def init_params(self, spec, data_params, rng):
        return {"w": rng.normal(0.0, 0.01, 2), "b": np.zeros(1), "mu": np.zeros(2), "sd": np.ones(2)}

    @staticmethod
    def _labelled(batches):
        X, y = [], []
        for b in batches:
            for s in b:
                f = gap_features(s)
                if f is not None and s.behavior_label is not None:
                    X.append(f)
                    y.append(1.0 if s.behavior_label == "accepted" else 0.0)
        return np.array(X).reshape(-1, 2), np.array(y)

    def train(self, state, batches, config: TrainConfig):
        hp = state.spec.hyperparameters
        X, y = self._labelled(batches)
        if len(y) == 0:
            raise StepError("EMPTY_TRAIN", "no behavior-labelled training samples")
        p = state.params
        if config.fine_tune:
            mu, sd = p["mu"], p["sd"]
        else:
            mu, sd = X.mean(axis=0), X.std(axis=0)
            sd = np.where(sd > 1e-9, sd, 1.0)
        Z = (X - mu) / sd
        w, b = p["w"].copy(), float(p["b"][0])
        epochs = int(hp.get("epochs", self.default_epochs) if config.epochs is None else config.epochs)
        lr = float(hp.get("lr", self.default_lr) if config.lr is None else config.lr)
        l2 = float(hp.get("l2", 1e-4))
        for _ in range(epochs):
            q = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
            w -= lr * (Z.T @ (q - y) / len(y) + l2 * w)
            b -= lr * float(np.mean(q - y))
        q = 1.0 / (1.0 + np.exp(-(Z @ w + b)))
        acc = float(np.mean((q >= 0.5) == (y == 1.0)))
        return {"w": w, "b": np.array([b]), "mu": mu, "sd": sd}, {"train_accuracy": acc}

    def prob(self, state, s) -> float | None:
        f = gap_features(s)
        if f is None:
            return None
        p = state.params
        z = (f - p["mu"]) / p["sd"]
        return float(1.0 / (1.0 + np.exp(-(z @ p["w"] + p["b"][0]))))

    def predict(self, state, samples, k, seed):
        out = []
        for s in samples:
            q = self.prob(state, s)
            probs = None if q is None else {"accepted": q, "rejected": 1.0 - q}
            out.append(PredictionEntry(s.sample_id, s.predict_ids, None, None, probs))
        return out


KINDS = {k.kind: k() for k in (ConstantVelocity, CTRV, LinearAR, LogisticBehavior)}
