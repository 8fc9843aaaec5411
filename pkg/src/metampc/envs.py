"""Parametric test environments with scheduled condition changes.

Two deterministic discrete-time systems stand in for a physics simulator:

* ``LinearParamEnv``: s' = A s + p * B a + f with known matrices, exactly
  solvable, used as the ground-truth oracle for model training tests. The
  scalar condition parameter p scales the actuation.

* ``FrictionCartEnv``: a 1-D cart whose action is a desired-velocity
  command. One explicit Euler step per control period:

      F     = gain * (a - v) * eta  -  mu * coulomb * tanh(v / width)
              -  viscous * v  +  force_ext
      v'    = v + dt * F / mass
      x'    = x + dt * v

  where eta = 0 when the actuator is disabled (zero_torque / amputated)
  and a is replaced by a frozen command when blocked. The tanh smoothing
  keeps the map well defined at v = 0 (width defaults to 1e-3). The env
  IS this discrete map: tests can recompute it in closed form.

Condition families (friction scale mu, external force, actuator faults,
channel amputation) each map to one parameter of the closed-form
dynamics, so behavioral claims can be verified exactly. Episodes end
early when |v| exceeds ``v_limit`` (divergence analog of a fall).

Scheduled conditions: constant, linear ramp (friction only), or a
piecewise sequence of phases. Reward returned by ``step`` is 0.0 unless a
reward callable is attached; the control loop computes its own task
reward and the env stays reward-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MU_RANGE = (0.05, 1.0)


@dataclass(frozen=True)
class EnvDescriptor:
    """Dims, control period, state layout and action semantics of an env."""

    state_dim: int
    action_dim: int
    dt: float
    state_labels: tuple[str, ...]
    action_semantic: str
    q_min: float
    q_max: float
    neutral_action: tuple[float, ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.neutral_action is None:
            object.__setattr__(self, "neutral_action", (0.0,) * self.action_dim)

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim, "action_dim": self.action_dim, "dt": self.dt,
            "state_labels": list(self.state_labels), "action_semantic": self.action_semantic,
            "q_min": self.q_min, "q_max": self.q_max, "neutral_action": list(self.neutral_action),
        }


@dataclass(frozen=True)
class ResolvedCondition:
    """Concrete condition parameters in effect at one instant."""

    mu: float = 0.8
    force: float = 0.0
    fault: str | None = None  # "blocked" | "zero_torque" | "amputated"
    fault_value: float = 0.0  # frozen command when blocked
    fault_channel: int = 0


_KINDS = ("default", "friction", "external_force", "actuator_fault", "amputation")
_FAULT_MODES = ("blocked", "zero_torque")
DEFAULT_MU = 0.8


@dataclass(frozen=True)
class ConditionSpec:
    """A condition family plus an optional time schedule.

    kind/params:
        default: {}
        friction: {"mu": float in [0.05, 1.0]}
        external_force: {"force": float, "mu": optional}
        actuator_fault: {"mode": "blocked"|"zero_torque", "channel": int, "value": float}
        amputation: {"channel": int}

    schedule:
        {"type": "constant"}
        {"type": "ramp", "mu_start": float, "mu_end": float, "duration": float}
        {"type": "piecewise", "phases": [{"t": float, "kind": ..., "params": {...}}, ...],
         "duration": float}
    """

    kind: str = "default"
    params: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {"type": "constant"})

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown condition kind {self.kind!r}")
        sched = self.schedule.get("type", "constant")
        if sched not in ("constant", "ramp", "piecewise"):
            raise ConfigError(f"unknown schedule type {sched!r}")
        if sched == "ramp":
            for key in ("mu_start", "mu_end", "duration"):
                if key not in self.schedule:
                    raise ConfigError(f"ramp schedule missing {key!r}")
            for mu in (self.schedule["mu_start"], self.schedule["mu_end"]):
                _check_mu(mu)
        if sched == "piecewise":
            phases = self.schedule.get("phases")
            if not phases:
                raise ConfigError("piecewise schedule needs at least one phase")
            if any(p0["t"] >= p1["t"] for p0, p1 in zip(phases, phases[1:])):
                raise ConfigError("piecewise phase times must be strictly increasing")
        _resolve_static(self.kind, self.params)  # validates params eagerly

    def resolve(self, t: float) -> ResolvedCondition:
        """Condition parameters in effect at time t (seconds)."""
        sched = self.schedule.get("type", "constant")
        if t < 0:
            raise ConfigError(f"t={t} outside the schedule domain")
        if sched == "constant":
            return _resolve_static(self.kind, self.params)
        if sched == "ramp":
            duration = float(self.schedule["duration"])
            if t > duration * (1 + 1e-9):
                raise ConfigError(f"t={t} beyond ramp duration {duration}")
            frac = min(t / duration, 1.0)
            mu0, mu1 = float(self.schedule["mu_start"]), float(self.schedule["mu_end"])
            return ResolvedCondition(mu=mu0 + frac * (mu1 - mu0))
        phases = self.schedule["phases"]
        duration = self.schedule.get("duration")
        if duration is not None and t > float(duration) * (1 + 1e-9):
            raise ConfigError(f"t={t} beyond schedule duration {duration}")
        active = phases[0]
        for ph in phases:
            if t >= ph["t"] - 1e-12:
                active = ph
        return _resolve_static(active.get("kind", "default"), active.get("params", {}))

    @property
    def tag(self) -> str:
        if self.schedule.get("type") == "ramp":
            return f"friction_ramp_{self.schedule['mu_start']}_{self.schedule['mu_end']}"
        if self.schedule.get("type") == "piecewise":
            return "piecewise"
        if self.kind == "friction":
            return f"friction_{self.params['mu']}"
        if self.kind == "external_force":
            return f"force_{self.params['force']}"
        if self.kind == "actuator_fault":
            return f"fault_{self.params.get('mode', 'blocked')}"
        if self.kind == "amputation":
            return "amputation"
        return "default"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "schedule": dict(self.schedule)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSpec":
        return cls(d.get("kind", "default"), dict(d.get("params", {})),
                   dict(d.get("schedule", {"type": "constant"})))


def _check_mu(mu: float) -> float:
    mu = float(mu)
    if not (MU_RANGE[0] <= mu <= MU_RANGE[1]):
        raise ConfigError(f"mu={mu} outside {MU_RANGE}")
    return mu


def _resolve_static(kind: str, params: dict) -> ResolvedCondition:
    if kind == "default":
        return ResolvedCondition()
    if kind == "friction":
        return ResolvedCondition(mu=_check_mu(params["mu"]))
    if kind == "external_force":
        mu = _check_mu(params.get("mu", DEFAULT_MU))
        return ResolvedCondition(mu=mu, force=float(params["force"]))
    if kind == "actuator_fault":
        mode = params.get("mode", "blocked")
        if mode not in _FAULT_MODES:
            raise ConfigError(f"unknown fault mode {mode!r}")
        return ResolvedCondition(
            fault=mode, fault_value=float(params.get("value", 0.0)),
            fault_channel=int(params.get("channel", 0)),
        )
    if kind == "amputation":
        return ResolvedCondition(fault="amputated", fault_channel=int(params.get("channel", 0)))
    raise ConfigError(f"unknown condition kind {kind!r}")


class FrictionCartEnv:
    """1-D cart driven by a desired-velocity command, with scaled Coulomb drag."""

    def __init__(
        self,
        condition: ConditionSpec | None = None,
        *,
        dt: float = 0.02,
        mass: float = 1.0,
        gain: float = 5.0,
        viscous: float = 0.5,
        coulomb: float = 4.0,
        tanh_width: float = 1e-3,
        v_limit: float = 10.0,
        q_min: float = -2.0,
        q_max: float = 2.0,
        init_noise: float = 0.0,
        reward_fn=None,
    ):
        self.dt = float(dt)
        self.mass = float(mass)
        self.gain = float(gain)
        self.viscous = float(viscous)
        self.coulomb = float(coulomb)
        self.tanh_width = float(tanh_width)
        self.v_limit = float(v_limit)
        self.init_noise = float(init_noise)
        self.reward_fn = reward_fn
        self.condition = condition or ConditionSpec()
        self.descriptor = EnvDescriptor(
            state_dim=2, action_dim=1, dt=self.dt,
            state_labels=("x", "v"), action_semantic="desired velocity",
            q_min=float(q_min), q_max=float(q_max),
        )
        self._state: np.ndarray | None = None
        self._t = 0.0

    def reset(self, condition: ConditionSpec | None = None, seed=None) -> np.ndarray:
        if condition is not None:
            self.condition = condition
        self._t = 0.0
        s = np.zeros(2)
        if self.init_noise > 0:
            s += np.random.default_rng(seed).normal(0.0, self.init_noise, size=2)
        self._state = s
        return s.copy()

    def condition_at(self, t: float) -> ResolvedCondition:
        return self.condition.resolve(t)

    def forces(self, v: float, a: float, cond: ResolvedCondition) -> float:
        """Net force on the cart for velocity v under command a."""
        if cond.fault == "blocked":
            a = cond.fault_value
        if cond.fault in ("zero_torque", "amputated"):
            actuator = 0.0
        else:
            actuator = self.gain * (a - v)
        friction = cond.mu * self.coulomb * np.tanh(v / self.tanh_width) + self.viscous * v
        return actuator - friction + cond.force

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise ConfigError("step before reset")
        a = float(np.asarray(action).reshape(-1)[0])
        if not np.isfinite(a):
            raise ValueError("non-finite action")
        a = float(np.clip(a, self.descriptor.q_min, self.descriptor.q_max))
        cond = self.condition.resolve(self._t)
        x, v = self._state
        f = self.forces(v, a, cond)
        v_next = v + self.dt * f / self.mass
        x_next = x + self.dt * v
        self._state = np.array([x_next, v_next])
        self._t += self.dt
        done = abs(v_next) > self.v_limit
        reward = float(self.reward_fn(self._state, a)) if self.reward_fn else 0.0
        return self._state.copy(), reward, done

    @property
    def time(self) -> float:
        return self._t

    def params_dict(self) -> dict:
        return {
            "kind": "friction_cart", "dt": self.dt, "mass": self.mass, "gain": self.gain,
            "viscous": self.viscous, "coulomb": self.coulomb, "tanh_width": self.tanh_width,
            "v_limit": self.v_limit, "q_min": self.descriptor.q_min,
            "q_max": self.descriptor.q_max, "init_noise": self.init_noise,
        }


class LinearParamEnv:
    """Exactly solvable system s' = A s + p * B a + f; p is the condition scalar.

    The "friction" condition's mu doubles as p so the same condition
    plumbing drives both envs; the default condition keeps the configured
    p. Exists to give model-training tests a closed-form ground truth.
    """

    DEFAULT_A = ((0.9, 0.05), (0.0, 0.8))
    DEFAULT_B = ((0.0,), (1.0,))
    DEFAULT_F = (0.01, -0.02)

    def __init__(
        self,
        condition: ConditionSpec | None = None,
        *,
        a_matrix=None, b_matrix=None, f_vector=None,
        dt: float = 0.02, q_min: float = -1.0, q_max: float = 1.0,
        p_default: float = 1.0, init_noise: float = 0.0, reward_fn=None,
    ):
        self.A = np.asarray(a_matrix if a_matrix is not None else self.DEFAULT_A, dtype=float)
        self.B = np.asarray(b_matrix if b_matrix is not None else self.DEFAULT_B, dtype=float)
        self.f = np.asarray(f_vector if f_vector is not None else self.DEFAULT_F, dtype=float)
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.f.shape != (n,):
            raise ConfigError("inconsistent A/B/f shapes")
        if np.max(np.abs(np.linalg.eigvals(self.A))) >= 1.0:
            raise ConfigError("A must have spectral radius < 1")
        self.p_default = float(p_default)
        self.init_noise = float(init_noise)
        self.reward_fn = reward_fn
        self.condition = condition or ConditionSpec()
        self.descriptor = EnvDescriptor(
            state_dim=n, action_dim=m, dt=float(dt),
            state_labels=tuple(f"s{i}" for i in range(n)),
            action_semantic="actuation", q_min=float(q_min), q_max=float(q_max),
        )
        self._state: np.ndarray | None = None
        self._t = 0.0

    def _p(self, cond: ResolvedCondition) -> float:
        # "default" keeps the configured p; a friction condition supplies it
        if self.condition.kind == "default":
            return self.p_default
        return cond.mu

    def reset(self, condition: ConditionSpec | None = None, seed=None) -> np.ndarray:
        if condition is not None:
            self.condition = condition
        self._t = 0.0
        s = np.zeros(self.descriptor.state_dim)
        if self.init_noise > 0:
            s += np.random.default_rng(seed).normal(0.0, self.init_noise, size=s.shape)
        self._state = s
        return s.copy()

    def condition_at(self, t: float) -> ResolvedCondition:
        return self.condition.resolve(t)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise ConfigError("step before reset")
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape[0] != self.descriptor.action_dim:
            raise ConfigError(f"action dim {a.shape[0]} != {self.descriptor.action_dim}")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        a = np.clip(a, self.descriptor.q_min, self.descriptor.q_max)
        cond = self.condition.resolve(self._t)
        s = self.A @ self._state + self._p(cond) * (self.B @ a) + self.f
        self._state = s
        self._t += self.descriptor.dt
        done = bool(np.linalg.norm(s) > 100.0)
        reward = float(self.reward_fn(s, a)) if self.reward_fn else 0.0
        return s.copy(), reward, done

    @property
    def time(self) -> float:
        return self._t

    def params_dict(self) -> dict:
        return {
            "kind": "linear", "dt": self.descriptor.dt, "a_matrix": self.A.tolist(),
            "b_matrix": self.B.tolist(), "f_vector": self.f.tolist(),
            "p_default": self.p_default, "q_min": self.descriptor.q_min,
            "q_max": self.descriptor.q_max, "init_noise": self.init_noise,
        }


def make_env(kind: str, condition: ConditionSpec | None = None, **params):
    """Factory used by run configs."""
    if kind == "friction_cart":
        return FrictionCartEnv(condition, **params)
    if kind == "linear":
        return LinearParamEnv(condition, **params)
    raise ConfigError(f"unknown env kind {kind!r}")
