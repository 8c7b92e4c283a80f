"""Input perturbations: white noise, adversarial attacks on past positions, and
adversarial attacks on the control actions of a kinematic unicycle.

Attacks hold a read-only reference to the target model. Every attack is
deterministic for a fixed spec seed and fixed model weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import StepError
from .predictors.core import DEFAULT_K, LossSpec, ModelState, prediction_loss_gradient, sample_rng
from .sampling import Sample
from .scene import wrap_angle
from .storage import stable_hash

KINDS = ("white_noise", "attack_positions", "attack_controls")
VICTIMS = ("all_predicted", "nearest_neighbor")
BISECTION_STEPS = 40


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    sigma: float = 0.0
    d_max: float = 0.5
    iters: int = 50
    step_size: float = 0.05  # m, per-iteration displacement scale
    a_max: float = 4.0
    omega_max: float = 0.5
    target_model_ref: str | None = None
    victim_agent: str = "all_predicted"
    seed: int = 0
    k: int = DEFAULT_K
    probing: bool = True
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StepError("INVALID_PARAMS", f"unknown perturbation kind {self.kind!r}")
        if self.victim_agent not in VICTIMS:
            raise StepError("INVALID_PARAMS", f"unknown victim_agent {self.victim_agent!r}")
        if self.sigma < 0:
            raise StepError("INVALID_PARAMS", "sigma must be >= 0")
        if self.kind != "white_noise":
            if not self.d_max > 0:
                raise StepError("INVALID_PARAMS", "d_max must be > 0")
            if self.iters < 1:
                raise StepError("INVALID_PARAMS", "iters must be >= 1")
            if not (self.step_size > 0 and self.a_max > 0 and self.omega_max > 0):
                raise StepError("INVALID_PARAMS", "step_size and control bounds must be positive")
            if self.target_model_ref is None:
                raise StepError("INVALID_PARAMS", "attacks need a target_model_ref")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "victim_agent": self.victim_agent, "seed": self.seed}
        if self.kind == "white_noise":
            d["sigma"] = self.sigma
        else:
            d.update(d_max=self.d_max, iters=self.iters, step_size=self.step_size, k=self.k,
                     target_model_ref=self.target_model_ref, probing=self.probing)
            if self.kind == "attack_controls":
                d.update(a_max=self.a_max, omega_max=self.omega_max)
        return d

    @property
    def perturbation_id(self) -> str:
        return self.name or f"{self.kind}-{stable_hash(self.to_dict())[:10]}"

    @property
    def is_attack(self) -> bool:
        return self.kind != "white_noise"


@dataclass(frozen=True, eq=False)
class ControlSequence:
    """Unicycle state before the first step plus one (accel, yaw_rate) pair per step."""
    initial: tuple[float, float, float, float]  # x, y, heading, speed
    controls: np.ndarray  # (N, 2)
    dt: float

    def __post_init__(self):
        c = np.asarray(self.controls, float)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 1:
            raise StepError("INVALID_PARAMS", "controls must have shape (N >= 1, 2)")
        if not (np.all(np.isfinite(c)) and all(math.isfinite(v) for v in self.initial) and self.dt > 0):
            raise StepError("INVALID_PARAMS", "control sequence must be finite with dt > 0")

    def with_controls(self, controls) -> "ControlSequence":
        return ControlSequence(self.initial, np.asarray(controls, float), self.dt)


# --------------------------------------------------------------------------- kinematics

def _rollout_states(cs: ControlSequence):
    x, y, h, v = cs.initial
    dt = cs.dt
    n = len(cs.controls)
    pos = np.empty((n, 2))
    heading = np.empty(n)
    speed = np.empty(n)
    clamped = np.zeros(n, bool)
    for i, (a, w) in enumerate(np.asarray(cs.controls, float)):
        h = h + w * dt
        v_new = v + a * dt
        if v_new < 0.0:
            v_new, clamped[i] = 0.0, True
        v = v_new
        x = x + v * math.cos(h) * dt
        y = y + v * math.sin(h) * dt
        pos[i] = (x, y)
        heading[i] = h
        speed[i] = v
    return pos, heading, speed, clamped


def kinematic_rollout(cs: ControlSequence) -> np.ndarray:
    """Explicit Euler unicycle: heading, then speed (clamped at 0), then position.

    Returns the (N, 2) positions reached after each of the N steps.
    """
    return _rollout_states(cs)[0]


def rollout_vjp(cs: ControlSequence, grad_pos: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. controls of ``sum(grad_pos * kinematic_rollout(cs))``."""
    _, h, v, clamped = _rollout_states(cs)
    dt = cs.dt
    G = np.asarray(grad_pos, float)
    C = np.cumsum(G[::-1], axis=0)[::-1]  # suffix sums over later positions
    e = np.stack([np.cos(h), np.sin(h)], axis=1)
    nrm = np.stack([-np.sin(h), np.cos(h)], axis=1)
    turn = dt * dt * v * np.sum(nrm * C, axis=1)
    g_w = np.cumsum(turn[::-1])[::-1]
    q = dt * np.sum(e * C, axis=1)
    g_a = np.zeros(len(q))
    acc = 0.0
    for j in range(len(q) - 1, -1, -1):
        acc = 0.0 if clamped[j] else q[j] + acc
        g_a[j] = dt * acc
    return np.stack([g_a, g_w], axis=1)


def rollout_jvp(cs: ControlSequence, d_controls: np.ndarray) -> np.ndarray:
    """Linearized change of the rollout positions for a control change."""
    _, h, v, clamped = _rollout_states(cs)
    dt = cs.dt
    du = np.asarray(d_controls, float)
    dh = dt * np.cumsum(du[:, 1])
    dv = np.zeros(len(du))
    prev = 0.0
    for i in range(len(du)):
        prev = 0.0 if clamped[i] else prev + dt * du[i, 0]
        dv[i] = prev
    e = np.stack([np.cos(h), np.sin(h)], axis=1)
    nrm = np.stack([-np.sin(h), np.cos(h)], axis=1)
    return dt * np.cumsum(dv[:, None] * e + (v * dh)[:, None] * nrm, axis=0)


def recover_controls(positions, dt: float, heading: float | None = None) -> ControlSequence:
    """Controls whose rollout passes through ``positions`` (N >= 3).

    The initial state sits one step before the first position, moving with the
    first step's heading and speed, so the first control is zero. A
    zero-length step keeps the previous heading. Any finite trajectory is
    reproduced up to round-off because the controls are unconstrained here.
    """
    p = np.asarray(positions, float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise StepError("INVALID_PARAMS", "recover_controls needs >= 3 positions of shape (N, 2)")
    d = np.diff(p, axis=0)
    step = np.hypot(d[:, 0], d[:, 1])
    if float(step.sum()) < 1e-6:
        raise StepError("DEGENERATE", "stationary trajectory has no recoverable controls")
    n = len(p)
    v = np.empty(n)
    th = np.empty(n)
    v[1:] = step / dt
    moving = np.flatnonzero(step > 0)
    first = float(np.arctan2(d[moving[0], 1], d[moving[0], 0]))
    prev = first if heading is None or step[0] > 0 else float(heading)
    for i in range(1, n):
        if step[i - 1] > 0:
            prev = float(np.arctan2(d[i - 1, 1], d[i - 1, 0]))
        th[i] = prev
    th[0], v[0] = th[1], v[1]
    # unwrap so heading increments carry turns by less than pi per step
    th = th[0] + np.concatenate([[0.0], np.cumsum(wrap_angle(np.diff(th)))])
    controls = np.zeros((n, 2))
    controls[1:, 0] = np.diff(v) / dt
    controls[1:, 1] = np.diff(th) / dt
    start = p[0] - v[0] * dt * np.array([math.cos(th[0]), math.sin(th[0])])
    return ControlSequence((float(start[0]), float(start[1]), float(th[0]), float(v[0])), controls, dt)


# --------------------------------------------------------------------------- victims

def select_victims(sample: Sample, victim_agent: str, need_future: bool = False) -> list[int]:
    if victim_agent == "all_predicted":
        return [int(i) for i in sample.predict_index]
    ref = sample.predict_index[0]
    anchor = sample.past[ref, -1]
    best, best_d = None, math.inf
    for i, aid in enumerate(sample.agent_ids):
        if aid in sample.predict_ids or not sample.past_mask[i].all():
            continue
        if need_future and not sample.future_mask[i].all():
            continue
        dist = float(np.hypot(*(sample.past[i, -1] - anchor)))
        if dist < best_d:
            best, best_d = i, dist
    return [] if best is None else [best]


# --------------------------------------------------------------------------- white noise

def perturb_white_noise(sample: Sample, sigma: float, seed: int = 0,
                        victim_agent: str = "all_predicted") -> Sample:
    """Add i.i.d. N(0, sigma^2) offsets to the past positions of the victims."""
    if sigma < 0:
        raise StepError("INVALID_PARAMS", "sigma must be >= 0")
    if sigma == 0:
        return sample
    victims = select_victims(sample, victim_agent)
    past = sample.past.copy()
    noise = sample_rng(seed, sample.sample_id).normal(0.0, sigma, size=(len(victims),) + past.shape[1:])
    for v, ai in enumerate(victims):
        past[ai] = past[ai] + noise[v]
    return sample.replace(past=past)


# --------------------------------------------------------------------------- position attack

def _smooth_matrix(n: int) -> np.ndarray:
    """3-point moving average along a track, shortened window at the ends."""
    S = np.zeros((n, n))
    if n < 2:
        return np.eye(n)
    for i in range(n):
        lo, hi = max(0, i - 1), min(n - 1, i + 1)
        S[i, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return S


def _escape_direction(sample: Sample, seed: int, shape) -> np.ndarray:
    """Seeded random direction for ascent from a point where the loss gradient
    vanishes (an exact prediction sits on the kink of the distance)."""
    return sample_rng(seed, sample.sample_id + "#escape").standard_normal(shape)


def _project_ball(off: np.ndarray, radius: float) -> np.ndarray:
    n = np.sqrt(np.sum(off * off, axis=-1, keepdims=True))
    scale = np.where(n > radius, radius / np.where(n > 0, n, 1.0), 1.0)
    return off * scale


def attack_positions(sample: Sample, model: ModelState, d_max: float, iters: int = 50,
                     step_size: float = 0.05, seed: int = 0, victim_agent: str = "all_predicted",
                     k: int = DEFAULT_K, probing: bool = True, log: list | None = None) -> Sample:
    """Projected gradient ascent on the victims' past positions.

    The ascent variable is a per-waypoint offset. Each iteration takes a unit
    step of ``step_size`` per waypoint along the loss gradient and clamps every
    waypoint into the ``d_max`` ball around its original. The candidate fed to
    the model is that offset after a 3-point moving average, and the gradient
    is chained back through the average. Averaging points of a ball stays in
    the ball, so the budget survives the smoothing. The loss compares
    predictions against the unperturbed future. Where the gradient vanishes
    (an exact prediction), the step follows a seeded random direction.
    """
    if not d_max > 0 or iters < 1:
        raise StepError("INVALID_PARAMS", "need d_max > 0 and iters >= 1")
    victims = select_victims(sample, victim_agent)
    spec = LossSpec(k=k, seed=seed, victims=tuple(victims), truth=sample.pred_future, probing=probing)
    orig = sample.past[victims].copy()
    valid = sample.past_mask[victims][..., None]
    S = _smooth_matrix(sample.n_I)

    def candidate(z):
        return np.where(valid, np.einsum("ij,vjc->vic", S, z), 0.0)

    def evaluate(z):
        cur = sample.past.copy()
        cur[victims] = orig + candidate(z)
        return prediction_loss_gradient(model, sample.replace(past=cur), spec)

    z = np.zeros_like(orig)
    best_loss, best_z = None, z.copy()
    loss0 = None
    for it in range(iters + 1):
        loss, g, _ = evaluate(z)
        loss0 = loss if loss0 is None else loss0
        if best_loss is None or loss > best_loss:
            best_loss, best_z = loss, z.copy()
        if it == iters:
            break
        g = np.where(valid, np.nan_to_num(g), 0.0)
        if not np.any(g):
            g = np.where(valid, _escape_direction(sample, seed, g.shape), 0.0)
        g = np.einsum("ji,vjc->vic", S, g)
        n = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
        z = z + step_size * np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
        z = np.where(valid, _project_ball(z, d_max), 0.0)
    off = candidate(best_z)
    past = sample.past.copy()
    past[victims] = orig + off
    disp = float(np.nanmax(np.sqrt(np.sum(off ** 2, axis=-1)))) if victims else 0.0
    _log(log, sample, "attack_positions", iters, loss0, best_loss, disp, ())
    return sample.replace(past=past)


# --------------------------------------------------------------------------- control attack

def _track_fit(cs: ControlSequence, target: np.ndarray, a_max: float, omega_max: float,
               iters: int = 200) -> ControlSequence:
    """Bounded controls whose rollout stays close to ``target`` (projected gradient descent)."""
    lo = np.array([-a_max, -omega_max])
    u = np.clip(cs.controls, lo, -lo)
    cur = cs.with_controls(u)
    err = kinematic_rollout(cur) - target
    best = (float(np.max(np.hypot(err[:, 0], err[:, 1]))), u)
    if best[0] == 0.0 or np.array_equal(u, cs.controls):
        return cur
    for _ in range(iters):
        g = rollout_vjp(cur, err)
        jg = rollout_jvp(cur, g)
        denom = float(np.sum(jg * jg))
        if denom <= 0:
            break
        u = np.clip(u - (float(np.sum(err * jg)) / denom) * g, lo, -lo)
        cur = cs.with_controls(u)
        err = kinematic_rollout(cur) - target
        dev = float(np.max(np.hypot(err[:, 0], err[:, 1])))
        if dev < best[0]:
            best = (dev, u)
    return cs.with_controls(best[1])


def _max_dev(cs: ControlSequence, target: np.ndarray) -> float:
    d = kinematic_rollout(cs) - target
    return float(np.max(np.hypot(d[:, 0], d[:, 1])))


def _bisect_budget(cs: ControlSequence, base: np.ndarray, u: np.ndarray, target: np.ndarray,
                   d_max: float) -> np.ndarray:
    """Pull ``u`` toward ``base`` until the rollout is within ``d_max`` of ``target``."""
    if _max_dev(cs.with_controls(u), target) <= d_max:
        return u
    lo, hi = 0.0, 1.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if _max_dev(cs.with_controls(base + mid * (u - base)), target) <= d_max:
            lo = mid
        else:
            hi = mid
    return base + lo * (u - base)


def attack_controls(sample: Sample, model: ModelState, d_max: float, iters: int = 50,
                    step_size: float = 0.05, a_max: float = 4.0, omega_max: float = 0.5,
                    seed: int = 0, victim_agent: str = "all_predicted", k: int = DEFAULT_K,
                    probing: bool = True, log: list | None = None) -> Sample:
    """Projected gradient ascent on the controls of each victim's whole trajectory.

    The victim's past and future are rolled out from the perturbed controls,
    so the returned sample carries a perturbed past and a matching perturbed
    future. Controls are clipped to the bounds; if a victim's rollout leaves
    the ``d_max`` tube around its original positions, its controls are
    bisected back toward the bounded base fit. A victim whose bounded base
    fit already leaves the tube cannot be attacked; the sample is returned
    unperturbed with the flag ``attack_infeasible``.
    """
    if not d_max > 0 or iters < 1 or not (a_max > 0 and omega_max > 0 and step_size > 0):
        raise StepError("INVALID_PARAMS", "need d_max, iters, step_size and bounds > 0")
    victims = select_victims(sample, victim_agent, need_future=True)
    n_I = sample.n_I
    full = np.concatenate([sample.past, sample.future], axis=1)
    seqs, bases, targets = [], [], []
    for ai in victims:
        try:
            cs = recover_controls(full[ai], sample.dt)
        except StepError as exc:
            if exc.code != "DEGENERATE":
                raise
            _log(log, sample, "attack_controls", 0, None, None, 0.0, ("degenerate_victim",))
            return sample.replace(flags=sample.flags + ("degenerate_victim",))
        cs = _track_fit(cs, full[ai], a_max, omega_max)
        if _max_dev(cs, full[ai]) > d_max:
            _log(log, sample, "attack_controls", 0, None, None, 0.0, ("attack_infeasible",))
            return sample.replace(flags=sample.flags + ("attack_infeasible",))
        seqs.append(cs)
        bases.append(cs.controls.copy())
        targets.append(full[ai])
    if not victims:
        _log(log, sample, "attack_controls", 0, None, None, 0.0, ("no_victim",))
        return sample.replace(flags=sample.flags + ("no_victim",))

    lo = np.array([-a_max, -omega_max])
    pidx = list(sample.predict_index)

    def build(us):
        past, fut = sample.past.copy(), sample.future.copy()
        for v, ai in enumerate(victims):
            traj = kinematic_rollout(seqs[v].with_controls(us[v]))
            past[ai], fut[ai] = traj[:n_I], traj[n_I:]
        return sample.replace(past=past, future=fut)

    us = [b.copy() for b in bases]
    loss0, best_loss, best_us = None, None, [u.copy() for u in us]
    for it in range(iters + 1):
        cur = build(us)
        spec = LossSpec(k=k, seed=seed, victims=tuple(victims), truth=cur.pred_future, probing=probing)
        loss, g_past, g_truth = prediction_loss_gradient(model, cur, spec)
        loss0 = loss if loss0 is None else loss0
        if best_loss is None or loss > best_loss:
            best_loss, best_us = loss, [u.copy() for u in us]
        if it == iters:
            break
        for v, ai in enumerate(victims):
            G = np.zeros((len(targets[v]), 2))
            G[:n_I] = np.nan_to_num(g_past[v])
            if ai in pidx:
                G[n_I:] = g_truth[pidx.index(ai)]
            if not np.any(G):
                G = _escape_direction(sample, seed + v, G.shape)
            cs = seqs[v].with_controls(us[v])
            g = rollout_vjp(cs, G)
            move = rollout_jvp(cs, g)
            scale = float(np.max(np.hypot(move[:, 0], move[:, 1])))
            if scale <= 0:
                continue
            u = np.clip(us[v] + (step_size / scale) * g, lo, -lo)
            us[v] = _bisect_budget(seqs[v], bases[v], u, targets[v], d_max)
    out = build(best_us)
    disp = max(_max_dev(seqs[v].with_controls(best_us[v]), targets[v]) for v in range(len(victims)))
    _log(log, sample, "attack_controls", iters, loss0, best_loss, disp, ())
    return out


def control_bounds_ok(sample: Sample, agent_index: int, a_max: float, omega_max: float,
                      tol: float = 1e-9) -> bool:
    """Whether an agent's full trajectory is reachable with bounded controls from its recovered state."""
    full = np.concatenate([sample.past[agent_index], sample.future[agent_index]])
    c = recover_controls(full, sample.dt).controls
    return bool(np.all(np.abs(c[:, 0]) <= a_max + tol) and np.all(np.abs(c[:, 1]) <= omega_max + tol))


# --------------------------------------------------------------------------- dispatch

def _log(log, sample, kind, iters, loss0, loss, disp, flags):
    if log is None:
        return
    log.append(json.dumps({"sample_id": sample.sample_id, "kind": kind, "iterations": iters,
                           "initial_loss": loss0, "final_loss": loss, "max_displacement": disp,
                           "flags": list(flags)}, sort_keys=True))


def apply_perturbation(sample: Sample, spec: PerturbationSpec, models: dict | None = None,
                       log: list | None = None) -> Sample:
    """Apply one perturbation spec. ``models`` maps target refs to trained states."""
    if spec.kind == "white_noise":
        return perturb_white_noise(sample, spec.sigma, spec.seed, spec.victim_agent)
    model = (models or {}).get(spec.target_model_ref)
    if model is None:
        raise StepError("UNKNOWN_MODEL", f"attack target {spec.target_model_ref!r} is not available")
    common = dict(d_max=spec.d_max, iters=spec.iters, step_size=spec.step_size, seed=spec.seed,
                  victim_agent=spec.victim_agent, k=spec.k, probing=spec.probing, log=log)
    if spec.kind == "attack_positions":
        return attack_positions(sample, model, **common)
    return attack_controls(sample, model, a_max=spec.a_max, omega_max=spec.omega_max, **common)
