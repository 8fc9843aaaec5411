"""Constraint-aware sampling of candidate action sequences.

Candidate actions are desired positions sampled per control step. Each new
value must stay inside the hard position box and inside velocity,
acceleration and jerk bands derived from the last three values by backward
finite differences at the control period dt:

    V = (a_t - a_{t-1}) / dt
    A = (a_t - 2 a_{t-1} + a_{t-2}) / dt^2
    J = (a_t - 3 a_{t-1} + 3 a_{t-2} - a_{t-3}) / dt^3

The per-step feasible set is the intersection of the four bands. Position
is the hard constraint: if the intersection is empty (possible after
clamping near the position box), the A/J bands are dropped, the velocity
band is kept, and the result is clamped to [q_min, q_max]. The
intersection is provably non-empty for histories that satisfy the limits
whenever the limits obey the consistency margins

    V_max <= A_max * dt      and      V_max + A_max * dt <= J_max * dt^2

so limits chosen with those margins give sequences with zero violations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ConstraintLimits:
    """Per-action-dimension position box and V/A/J magnitude limits."""

    q_min: np.ndarray
    q_max: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray
    j_max: np.ndarray
    dt: float

    def __post_init__(self):
        arrs = {}
        dim = np.broadcast(
            np.asarray(self.q_min), np.asarray(self.q_max), np.asarray(self.v_max),
            np.asarray(self.a_max), np.asarray(self.j_max),
        ).shape
        for name in ("q_min", "q_max", "v_max", "a_max", "j_max"):
            arrs[name] = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), dim).copy()
            object.__setattr__(self, name, arrs[name])
        if self.dt <= 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if np.any(arrs["q_min"] >= arrs["q_max"]):
            raise ConfigError("q_min must be < q_max")
        for name in ("v_max", "a_max", "j_max"):
            if np.any(arrs[name] < 0):
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def uniform(cls, dim: int, q_min: float, q_max: float, v_max: float,
                a_max: float, j_max: float, dt: float) -> "ConstraintLimits":
        ones = np.ones(dim)
        return cls(q_min * ones, q_max * ones, v_max * ones, a_max * ones, j_max * ones, dt)

    @property
    def dim(self) -> int:
        return self.q_min.shape[0]

    def to_dict(self) -> dict:
        return {
            "q_min": self.q_min.tolist(), "q_max": self.q_max.tolist(),
            "v_max": self.v_max.tolist(), "a_max": self.a_max.tolist(),
            "j_max": self.j_max.tolist(), "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintLimits":
        return cls(
            np.asarray(d["q_min"], dtype=float), np.asarray(d["q_max"], dtype=float),
            np.asarray(d["v_max"], dtype=float), np.asarray(d["a_max"], dtype=float),
            np.asarray(d["j_max"], dtype=float), float(d["dt"]),
        )


@dataclass(frozen=True)
class ActionHistory:
    """The last three executed actions, oldest first: rows [a_{t-3}, a_{t-2}, a_{t-1}]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] != 3:
            raise ConfigError(f"history needs exactly 3 actions, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, a0: np.ndarray) -> "ActionHistory":
        a0 = np.atleast_1d(np.asarray(a0, dtype=float))
        return cls(np.tile(a0, (3, 1)))

    def shifted(self, a: np.ndarray) -> "ActionHistory":
        """History after executing a: drop the oldest entry."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return ActionHistory(np.vstack([self.values[1:], a[None, :]]))

    @property
    def last(self) -> np.ndarray:
        return self.values[2]


def _band_bounds(p1, p2, p3, lim: ConstraintLimits):
    """Vectorized per-step feasible interval from the rolling history.

    p1/p2/p3 are the one/two/three-steps-back values, any matching shape
    with trailing action dimension. Returns (lo, hi), never empty.
    """
    dt = lim.dt
    v_half = lim.v_max * dt
    a_half = lim.a_max * dt * dt
    j_half = lim.j_max * dt * dt * dt
    a_center = 2.0 * p1 - p2
    j_center = 3.0 * p1 - 3.0 * p2 + p3

    lo = np.maximum.reduce([lim.q_min + 0 * p1, p1 - v_half, a_center - a_half, j_center - j_half])
    hi = np.minimum.reduce([lim.q_max + 0 * p1, p1 + v_half, a_center + a_half, j_center + j_half])

    empty = lo > hi
    if np.any(empty):
        # position stays hard; keep the velocity band, drop A/J
        lo_fb = np.clip(p1 - v_half, lim.q_min, lim.q_max)
        hi_fb = np.clip(p1 + v_half, lim.q_min, lim.q_max)
        lo = np.where(empty, lo_fb, lo)
        hi = np.where(empty, hi_fb, hi)
        still = lo > hi  # only reachable if p1 itself sits outside the box
        if np.any(still):
            pin = np.clip(p1, lim.q_min, lim.q_max)
            lo = np.where(still, pin, lo)
            hi = np.where(still, pin, hi)
    return lo, hi


def feasible_interval(hist: ActionHistory, lim: ConstraintLimits, dim: int) -> tuple[float, float]:
    """Feasible range for the next action in one dimension."""
    p3, p2, p1 = hist.values[0, dim], hist.values[1, dim], hist.values[2, dim]
    one = ConstraintLimits(
        lim.q_min[dim], lim.q_max[dim], lim.v_max[dim], lim.a_max[dim], lim.j_max[dim], lim.dt
    )
    lo, hi = _band_bounds(np.asarray(p1), np.asarray(p2), np.asarray(p3), one)
    return float(lo), float(hi)


def sample_sequences(
    hist: ActionHistory, lim: ConstraintLimits, horizon: int, n_seq: int, seed
) -> np.ndarray:
    """Sample n_seq action sequences of the given horizon, constraint-respecting.

    Each step is drawn uniformly inside its feasible interval, with the
    three-value history rolling forward through the sampled sequence.
    Deterministic per seed. Returns (n_seq, horizon, dim).
    """
    if horizon < 1 or n_seq < 1:
        raise ConfigError("horizon and n_seq must be >= 1")
    rng = np.random.default_rng(seed)
    dim = lim.dim
    p3 = np.tile(hist.values[0], (n_seq, 1))
    p2 = np.tile(hist.values[1], (n_seq, 1))
    p1 = np.tile(hist.values[2], (n_seq, 1))
    out = np.empty((n_seq, horizon, dim))
    for t in range(horizon):
        lo, hi = _band_bounds(p1, p2, p3, lim)
        a = lo + rng.random((n_seq, dim)) * (hi - lo)
        out[:, t, :] = a
        p3, p2, p1 = p2, p1, a
    return out


def sample_sequences_unconstrained(
    lim: ConstraintLimits, horizon: int, n_seq: int, seed
) -> np.ndarray:
    """Naive alternative: every step i.i.d. uniform over the position box."""
    if horizon < 1 or n_seq < 1:
        raise ConfigError("horizon and n_seq must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((n_seq, horizon, lim.dim))
    return lim.q_min + u * (lim.q_max - lim.q_min)


class Violation(NamedTuple):
    kind: str  # "position" | "velocity" | "acceleration" | "jerk"
    step: int  # index into the checked sequence
    dim: int
    value: float
    bound: float


# float slack so exact-boundary samples are not flagged
_CHECK_RTOL = 1e-9


def check_sequence(seq: np.ndarray, hist: ActionHistory, lim: ConstraintLimits) -> list[Violation]:
    """Independent feasibility check: recompute V/A/J by finite differences.

    Returns every limit violation in the sequence (prefixed by the
    history); empty list iff feasible.
    """
    seq = np.atleast_2d(np.asarray(seq, dtype=float))
    ext = np.vstack([hist.values, seq])  # (H+3, dim)
    dt = lim.dt
    h = seq.shape[0]
    vel = np.diff(ext, 1, axis=0)[2:] / dt  # velocity at each sampled step
    acc = np.diff(ext, 2, axis=0)[1:] / dt**2
    jerk = np.diff(ext, 3, axis=0) / dt**3
    assert vel.shape[0] == acc.shape[0] == jerk.shape[0] == h

    out: list[Violation] = []
    checks = [
        ("position", seq, lim.q_min, lim.q_max),
        ("velocity", vel, -lim.v_max, lim.v_max),
        ("acceleration", acc, -lim.a_max, lim.a_max),
        ("jerk", jerk, -lim.j_max, lim.j_max),
    ]
    for kind, values, lo, hi in checks:
        slack = _CHECK_RTOL * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        bad = (values < lo - slack) | (values > hi + slack)
        for step, dim in zip(*np.nonzero(bad)):
            bound = lo[dim] if values[step, dim] < lo[dim] else hi[dim]
            out.append(Violation(kind, int(step), int(dim), float(values[step, dim]), float(bound)))
    return out
