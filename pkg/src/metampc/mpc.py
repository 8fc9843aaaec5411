"""Random-shooting model predictive control.

Each control step samples a population of candidate action sequences,
rolls every candidate through the dynamics model from the current state,
scores them with a discounted sum of per-step rewards and executes the
first action of the best sequence.

Scoring convention: the reward of step t is evaluated on the state the
action produces, r(s_{t+1}, a_t), discounted by gamma^(t-1) for
t = 1..H. Candidates whose rollout turns non-finite are given -inf
return instead of aborting the plan; ties break toward the lowest
population index.

Episode logs are written as one CSV row per executed step (sim time,
pre-action state, action, reward, planner diagnostics and, when
adapting, the selected condition index and per-condition losses) plus a
JSON header holding configs, seeds and initial/final states. Sim time is
the only clock in the CSV; wall-clock timestamps live in the header.
"""

from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PlanningError
from .dynamics import Transition
from .sampling import (
    ActionHistory,
    ConstraintLimits,
    sample_sequences,
    sample_sequences_unconstrained,
)

LOG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    n_pop: int = 1000
    discount: float = 0.99
    sampler_mode: str = "constrained"  # "constrained" | "uniform"

    def __post_init__(self):
        if self.horizon < 1 or self.n_pop < 1:
            raise ConfigError("horizon and n_pop must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")
        if self.sampler_mode not in ("constrained", "uniform"):
            raise ConfigError(f"unknown sampler_mode {self.sampler_mode!r}")

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n_pop": self.n_pop,
                "discount": self.discount, "sampler_mode": self.sampler_mode}


def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^(t-1) * r_t over a reward sequence (t starting at 1)."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size < 1:
        raise ConfigError("need at least one reward")
    return float(np.sum(rewards * gamma ** np.arange(rewards.size)))


def reward_velocity_tracking(s, a, params: dict, prev_a=None) -> float:
    """Quadratic velocity-tracking reward with action-smoothness and posture terms.

    r = -w_vel * (v - v_des)^2 - w_act * ||a - prev_a||^2 - w_posture * posture_err
    The smoothness term is zero when no previous action is given, so the
    reward stays evaluable from (state, action) alone.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1)
    v = s[params.get("v_index", 1)]
    err = v - params["v_des"]
    r = -params.get("w_vel", 1.0) * err * err
    if prev_a is not None:
        da = a - np.asarray(prev_a, dtype=float).reshape(-1)
        r -= params.get("w_act", 0.0) * float(da @ da)
    w_post = params.get("w_posture", 0.0)
    if w_post:
        idx = params.get("posture_index", [])
        tgt = np.asarray(params.get("posture_target", np.zeros(len(idx))), dtype=float)
        dp = s[np.asarray(idx, dtype=int)] - tgt
        r -= w_post * float(dp @ dp)
    return float(r)


def _reward_velocity_tracking_batch(states, actions, prev_actions, params) -> np.ndarray:
    v = states[:, params.get("v_index", 1)]
    err = v - params["v_des"]
    r = -params.get("w_vel", 1.0) * err * err
    w_act = params.get("w_act", 0.0)
    if w_act and prev_actions is not None:
        da = actions - prev_actions
        r = r - w_act * np.sum(da * da, axis=1)
    w_post = params.get("w_posture", 0.0)
    if w_post:
        idx = np.asarray(params.get("posture_index", []), dtype=int)
        tgt = np.asarray(params.get("posture_target", np.zeros(idx.size)), dtype=float)
        dp = states[:, idx] - tgt
        r = r - w_post * np.sum(dp * dp, axis=1)
    return r


_REWARD_BATCH_FNS = {"velocity_tracking": _reward_velocity_tracking_batch}
_REWARD_FNS = {"velocity_tracking": reward_velocity_tracking}


@dataclass
class RewardSpec:
    """Named reward function plus parameters; v_des may be retargeted online."""

    kind: str = "velocity_tracking"
    params: dict = field(default_factory=lambda: {"v_des": 0.5, "w_vel": 1.0, "w_act": 0.05})

    def __post_init__(self):
        if self.kind not in _REWARD_FNS:
            raise ConfigError(f"unknown reward kind {self.kind!r}")

    def evaluate(self, s, a, prev_a=None) -> float:
        return _REWARD_FNS[self.kind](s, a, self.params, prev_a)

    def evaluate_batch(self, states, actions, prev_actions=None) -> np.ndarray:
        return _REWARD_BATCH_FNS[self.kind](states, actions, prev_actions, self.params)

    def with_params(self, **updates) -> "RewardSpec":
        return RewardSpec(self.kind, {**self.params, **updates})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def velocity_schedule(spec: dict | None, seed=None):
    """Build v_des(t) from a schedule spec; None means no retargeting.

    Specs: {"type": "constant", "v": x};
           {"type": "ramp", "v_start": x, "v_end": y, "duration": s};
           {"type": "piecewise_random", "v_min": x, "v_max": y,
            "interval": s, "duration": s}  (resampled per interval, seeded).
    """
    if spec is None:
        return None
    kind = spec.get("type")
    if kind == "constant":
        v = float(spec["v"])
        return lambda t: v
    if kind == "ramp":
        v0, v1 = float(spec["v_start"]), float(spec["v_end"])
        dur = float(spec["duration"])
        return lambda t: v0 + (v1 - v0) * min(max(t / dur, 0.0), 1.0)
    if kind == "piecewise_random":
        rng = np.random.default_rng(seed)
        n = int(np.ceil(float(spec["duration"]) / float(spec["interval"]))) + 1
        levels = rng.uniform(float(spec["v_min"]), float(spec["v_max"]), size=n)
        interval = float(spec["interval"])
        return lambda t: float(levels[min(int(t / interval), n - 1)])
    raise ConfigError(f"unknown velocity schedule {kind!r}")


@dataclass
class PlanDiagnostics:
    best_return: float
    mean_return: float
    worst_return: float
    best_index: int


def plan(
    model,
    state: np.ndarray,
    hist: ActionHistory,
    cfg: MpcConfig,
    lim: ConstraintLimits,
    reward: RewardSpec,
    *,
    context: np.ndarray | None = None,
    seed=None,
    candidates: np.ndarray | None = None,
) -> tuple[np.ndarray, PlanDiagnostics]:
    """One planning step: sample, roll out, score, return the best first action.

    ``model`` needs only predict_next_batch(states, actions, context).
    ``candidates`` overrides the sampler with an explicit (n, H, dim)
    candidate set (used by oracle-equivalence tests).
    """
    if candidates is None:
        if cfg.sampler_mode == "constrained":
            seqs = sample_sequences(hist, lim, cfg.horizon, cfg.n_pop, seed)
        else:
            seqs = sample_sequences_unconstrained(lim, cfg.horizon, cfg.n_pop, seed)
    else:
        seqs = np.asarray(candidates, dtype=float)
        if seqs.ndim != 3:
            raise ConfigError("candidates must have shape (n, horizon, action_dim)")
    n, horizon = seqs.shape[0], seqs.shape[1]
    states = np.tile(np.asarray(state, dtype=float), (n, 1))
    prev = np.tile(hist.last, (n, 1))
    returns = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for t in range(horizon):
        acts = seqs[:, t, :]
        states = model.predict_next_batch(states, acts, context)
        r = reward.evaluate_batch(states, acts, prev)
        ok = np.all(np.isfinite(states), axis=1) & np.isfinite(r)
        alive &= ok
        returns[alive] += (cfg.discount**t) * r[alive]
        # freeze dead candidates so later numerics cannot resurrect them
        states[~alive] = 0.0
        prev = acts
    returns[~alive] = -np.inf
    if not np.any(alive):
        raise PlanningError("all candidate rollouts were non-finite")
    best = int(np.argmax(returns))
    finite = returns[alive]
    diag = PlanDiagnostics(
        best_return=float(returns[best]),
        mean_return=float(np.mean(finite)),
        worst_return=float(np.min(finite)),
        best_index=best,
    )
    return seqs[best, 0].copy(), diag


@dataclass
class EpisodeLog:
    """Per-step record of one closed-loop episode."""

    dt: float
    initial_state: np.ndarray
    states: list = field(default_factory=list)  # pre-action state per step
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    condition_idx: list = field(default_factory=list)
    condition_losses: list = field(default_factory=list)  # one row per step, may be []
    final_state: np.ndarray | None = None
    terminated_early: bool = False
    header: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    def states_array(self) -> np.ndarray:
        return np.asarray(self.states, dtype=float).reshape(self.n_steps, -1)

    def actions_array(self) -> np.ndarray:
        return np.asarray(self.actions, dtype=float).reshape(self.n_steps, -1)

    def rewards_array(self) -> np.ndarray:
        return np.asarray(self.rewards, dtype=float)

    def save(self, path_prefix: str) -> None:
        n_cond = len(self.condition_losses[0]) if self.condition_losses else 0
        s_dim = len(np.atleast_1d(self.initial_state))
        a_dim = self.actions_array().shape[1] if self.n_steps else 0
        with open(path_prefix + ".csv", "w", newline="") as f:
            writer = csv.writer(f)
            header = (
                ["time"]
                + [f"s_{i}" for i in range(s_dim)]
                + [f"a_{i}" for i in range(a_dim)]
                + ["reward", "ret_best", "ret_mean", "ret_worst", "argmax_idx"]
                + ["condition_idx"]
                + [f"cond_loss_{i}" for i in range(n_cond)]
            )
            writer.writerow(header)
            for i in range(self.n_steps):
                diag: PlanDiagnostics = self.diagnostics[i]
                cond_idx = self.condition_idx[i] if self.condition_idx else -1
                losses = self.condition_losses[i] if self.condition_losses else []
                writer.writerow(
                    [repr(float(i * self.dt))]
                    + [repr(float(v)) for v in np.atleast_1d(self.states[i])]
                    + [repr(float(v)) for v in np.atleast_1d(self.actions[i])]
                    + [repr(float(self.rewards[i])), repr(diag.best_return),
                       repr(diag.mean_return), repr(diag.worst_return), diag.best_index]
                    + [cond_idx]
                    + [repr(float(v)) for v in losses]
                )
        head = {
            "format_version": LOG_FORMAT_VERSION,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "initial_state": np.atleast_1d(self.initial_state).tolist(),
            "final_state": (np.atleast_1d(self.final_state).tolist()
                            if self.final_state is not None else None),
            "terminated_early": self.terminated_early,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **self.header,
        }
        with open(path_prefix + ".json", "w") as f:
            json.dump(head, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path_prefix: str) -> "EpisodeLog":
        with open(path_prefix + ".json") as f:
            head = json.load(f)
        rows = list(csv.reader(open(path_prefix + ".csv")))
        cols = rows[0]
        s_dim = sum(c.startswith("s_") for c in cols)
        a_dim = sum(c.startswith("a_") for c in cols)
        n_cond = sum(c.startswith("cond_loss_") for c in cols)
        log = cls(dt=head["dt"], initial_state=np.asarray(head["initial_state"], dtype=float))
        log.final_state = (np.asarray(head["final_state"], dtype=float)
                           if head.get("final_state") is not None else None)
        log.terminated_early = bool(head.get("terminated_early", False))
        log.header = {k: v for k, v in head.items()
                      if k not in ("format_version", "dt", "n_steps", "initial_state",
                                   "final_state", "terminated_early", "created_at")}
        for row in rows[1:]:
            vals = row
            i = 1
            log.states.append(np.array([float(v) for v in vals[i : i + s_dim]])); i += s_dim
            log.actions.append(np.array([float(v) for v in vals[i : i + a_dim]])); i += a_dim
            log.rewards.append(float(vals[i])); i += 1
            log.diagnostics.append(PlanDiagnostics(
                float(vals[i]), float(vals[i + 1]), float(vals[i + 2]), int(vals[i + 3])))
            i += 4
            log.condition_idx.append(int(vals[i])); i += 1
            if n_cond:
                log.condition_losses.append([float(v) for v in vals[i : i + n_cond]])
        return log


def run_episode(
    env,
    model,
    cfg: MpcConfig,
    lim: ConstraintLimits,
    reward: RewardSpec,
    *,
    T: int,
    seed: int,
    adaptation=None,
    context: np.ndarray | None = None,
    v_des_schedule=None,
    header: dict | None = None,
) -> EpisodeLog:
    """Closed loop for T control steps at the env's period.

    ``adaptation``, when given, is called each step with the recent
    transition window and must return (model, context, extras) where
    extras may carry "condition_idx" and "condition_losses" for the log.
    Early env termination (the divergence/fall analog) ends the episode
    and is flagged in the log.
    """
    s = env.reset(seed=[seed, 0])
    d = env.descriptor
    log = EpisodeLog(dt=d.dt, initial_state=s.copy(), header=dict(header or {}))
    log.header.setdefault("seed", seed)
    hist = ActionHistory.constant(np.asarray(d.neutral_action))
    window = deque(maxlen=getattr(adaptation, "window_len", 1) if adaptation else 1)
    for t in range(T):
        rew_t = reward
        if v_des_schedule is not None:
            rew_t = reward.with_params(v_des=v_des_schedule(t * d.dt))
        model_t, context_t, extras = model, context, {}
        if adaptation is not None:
            model_t, context_t, extras = adaptation(list(window))
        a, diag = plan(model_t, s, hist, cfg, lim, rew_t,
                       context=context_t, seed=[seed, 1, t])
        s_next, _, done = env.step(a)
        r = rew_t.evaluate(s_next, a, prev_a=hist.last)
        log.states.append(s.copy())
        log.actions.append(np.atleast_1d(a).copy())
        log.rewards.append(r)
        log.diagnostics.append(diag)
        if adaptation is not None:
            log.condition_idx.append(int(extras.get("condition_idx", -1)))
            log.condition_losses.append(list(extras.get("condition_losses", [])))
        window.append(Transition(s.copy(), np.atleast_1d(a).copy(), s_next.copy()))
        hist = hist.shifted(a)
        s = s_next
        if done:
            log.terminated_early = True
            break
    log.final_state = s.copy()
    return log
