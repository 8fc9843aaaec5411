"""Delta-state forward dynamics model and its data pipeline.

The network maps the concatenation of state and action (plus an optional
per-condition context vector) to the predicted state difference, so the
next-state prediction is s + delta. Inputs and delta targets are z-score
normalized from training data: raw position and velocity scales differ by
orders of magnitude, and the normalization stats are stored with the model
so saved models remain self-describing. Context dimensions pass through
the normalizer unchanged (mean 0, std 1).

Dataset file format: CSV with header
``episode,step,s_0..s_{n-1},a_0..a_{m-1},sn_0..sn_{n-1}`` plus a JSON
sidecar holding the env descriptor, condition tag and collection seed.
Model file format: the nn weight file plus normalizer stats and
context size in the JSON sidecar.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ConfigError, RolloutError, TrainingError
from .sampling import ActionHistory, ConstraintLimits, sample_sequences

DATASET_FORMAT_VERSION = 1


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray


@dataclass
class Dataset:
    """Ordered transitions stored as parallel arrays, plus provenance."""

    state_dim: int
    action_dim: int
    states: np.ndarray = None  # type: ignore[assignment]
    actions: np.ndarray = None  # type: ignore[assignment]
    next_states: np.ndarray = None  # type: ignore[assignment]
    episode_ids: np.ndarray = None  # type: ignore[assignment]
    step_ids: np.ndarray = None  # type: ignore[assignment]
    condition_tag: str = "default"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states is None:
            self.states = np.empty((0, self.state_dim))
            self.actions = np.empty((0, self.action_dim))
            self.next_states = np.empty((0, self.state_dim))
            self.episode_ids = np.empty(0, dtype=int)
            self.step_ids = np.empty(0, dtype=int)

    def __len__(self) -> int:
        return self.states.shape[0]

    def append_episode(self, states, actions, next_states, episode_id: int) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        n = states.shape[0]
        if not (actions.shape[0] == next_states.shape[0] == n):
            raise ConfigError("episode arrays disagree on length")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(actions)) \
                or not np.all(np.isfinite(next_states)):
            raise ValueError("non-finite transition data")
        self.states = np.vstack([self.states, states])
        self.actions = np.vstack([self.actions, actions])
        self.next_states = np.vstack([self.next_states, next_states])
        self.episode_ids = np.concatenate([self.episode_ids, np.full(n, episode_id, dtype=int)])
        self.step_ids = np.concatenate([self.step_ids, np.arange(n, dtype=int)])

    def transitions(self) -> list[Transition]:
        return [Transition(self.states[i], self.actions[i], self.next_states[i])
                for i in range(len(self))]

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(inputs s||a, delta targets s' - s), un-normalized."""
        x = np.hstack([self.states, self.actions])
        y = self.next_states - self.states
        return x, y

    def save(self, path_prefix: str) -> None:
        with open(path_prefix + ".csv", "w", newline="") as f:
            writer = csv.writer(f)
            header = (
                ["episode", "step"]
                + [f"s_{i}" for i in range(self.state_dim)]
                + [f"a_{i}" for i in range(self.action_dim)]
                + [f"sn_{i}" for i in range(self.state_dim)]
            )
            writer.writerow(header)
            for i in range(len(self)):
                writer.writerow(
                    [int(self.episode_ids[i]), int(self.step_ids[i])]
                    + [repr(float(v)) for v in self.states[i]]
                    + [repr(float(v)) for v in self.actions[i]]
                    + [repr(float(v)) for v in self.next_states[i]]
                )
        sidecar = {
            "format_version": DATASET_FORMAT_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "condition_tag": self.condition_tag,
            "n_transitions": len(self),
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **self.meta,
        }
        with open(path_prefix + ".json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path_prefix: str) -> "Dataset":
        with open(path_prefix + ".json") as f:
            meta = json.load(f)
        sd, ad = meta["state_dim"], meta["action_dim"]
        rows = list(csv.reader(open(path_prefix + ".csv")))
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
        ds = cls(sd, ad, condition_tag=meta.get("condition_tag", "default"),
                 meta={k: v for k, v in meta.items()
                       if k not in ("format_version", "state_dim", "action_dim",
                                    "condition_tag", "n_transitions", "created_at")})
        if data.size:
            ds.episode_ids = data[:, 0].astype(int)
            ds.step_ids = data[:, 1].astype(int)
            ds.states = data[:, 2 : 2 + sd]
            ds.actions = data[:, 2 + sd : 2 + sd + ad]
            ds.next_states = data[:, 2 + sd + ad :]
        return ds


STD_FLOOR = 1e-8


@dataclass
class Normalizer:
    """Per-dimension z-score stats for model inputs and delta targets."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, in_dim: int, out_dim: int) -> "Normalizer":
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim))

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray, context_dim: int = 0) -> "Normalizer":
        """Stats from training data only; context dims get identity stats."""
        if inputs.shape[0] == 0:
            raise ConfigError("cannot fit normalizer on empty data")
        in_mean = np.concatenate([inputs.mean(axis=0), np.zeros(context_dim)])
        in_std = np.concatenate([
            np.maximum(inputs.std(axis=0), STD_FLOOR), np.ones(context_dim)])
        out_mean = targets.mean(axis=0)
        out_std = np.maximum(targets.std(axis=0), STD_FLOOR)
        return cls(in_mean, in_std, out_mean, out_std)

    def normalize_in(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def normalize_out(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_mean) / self.out_std

    def denormalize_out(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=float)
                      for k in ("in_mean", "in_std", "out_mean", "out_std")})


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


class DynamicsModel:
    """Delta-state predictor: network + normalizer + optional context input."""

    def __init__(self, state_dim: int, action_dim: int, hidden_dims=(256, 256),
                 context_dim: int = 0, seed: int = 0,
                 weights: nn.ModelWeights | None = None,
                 normalizer: Normalizer | None = None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.context_dim = int(context_dim)
        in_dim = self.state_dim + self.action_dim + self.context_dim
        self.spec = nn.MlpSpec(in_dim, tuple(hidden_dims), self.state_dim)
        if weights is not None and weights.spec != self.spec:
            raise ConfigError("weights do not match the model spec")
        self.weights = weights if weights is not None else nn.init_weights(self.spec, seed)
        self.normalizer = normalizer or Normalizer.identity(in_dim, self.state_dim)

    def _inputs(self, states: np.ndarray, actions: np.ndarray,
                context: np.ndarray | None) -> np.ndarray:
        n = states.shape[0]
        if self.context_dim == 0:
            if context is not None:
                raise ConfigError("model takes no context vector")
            x = np.hstack([states, actions])
        else:
            if context is None:
                raise ConfigError("model requires a context vector")
            c = np.asarray(context, dtype=float).reshape(-1)
            if c.shape[0] != self.context_dim:
                raise ConfigError(f"context dim {c.shape[0]} != {self.context_dim}")
            x = np.hstack([states, actions, np.tile(c, (n, 1))])
        return self.normalizer.normalize_in(x)

    def predict_next_batch(self, states: np.ndarray, actions: np.ndarray,
                           context: np.ndarray | None = None) -> np.ndarray:
        """Vectorized next-state prediction for (n, state_dim) x (n, action_dim)."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ConfigError("state/action width mismatch")
        out = nn.forward(self.weights, self._inputs(states, actions, context))
        return states + self.normalizer.denormalize_out(out)

    def predict_next(self, s: np.ndarray, a: np.ndarray,
                     context: np.ndarray | None = None) -> np.ndarray:
        return self.predict_next_batch(
            np.asarray(s, dtype=float)[None, :], np.asarray(a, dtype=float)[None, :], context
        )[0]

    def rollout(self, s0: np.ndarray, actions: np.ndarray,
                context: np.ndarray | None = None) -> np.ndarray:
        """Iterate predict_next over an (H, action_dim) sequence; returns (H, state_dim)."""
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        h = actions.shape[0]
        if h < 1:
            raise ConfigError("rollout needs at least one action")
        out = np.empty((h, self.state_dim))
        s = np.asarray(s0, dtype=float)
        for t in range(h):
            s = self.predict_next(s, actions[t], context)
            if not np.all(np.isfinite(s)):
                raise RolloutError("non-finite state in rollout", step=t)
            out[t] = s
        return out

    def train(self, dataset: Dataset, *, epochs: int, batch_size: int,
              lr: float, seed: int, refit_normalizer: bool = True,
              lr_tail_fraction: float = 0.3, lr_tail_floor: float = 0.01) -> TrainReport:
        """Minibatch Adam on the normalized-delta MSE.

        Refits the normalizer from the dataset (skipped when epochs == 0 so
        a zero-epoch call is a true no-op), shuffles deterministically per
        epoch and reports the mean loss of each epoch. Over the final
        ``lr_tail_fraction`` of epochs the learning rate decays
        geometrically to ``lr_tail_floor * lr``, which settles the
        stochastic bouncing near convergence; a fraction of 0 keeps the
        rate constant.
        """
        if self.context_dim != 0:
            raise ConfigError("direct training is for context-free models")
        report = TrainReport()
        if epochs == 0:
            return report
        if len(dataset) == 0:
            raise ConfigError("empty dataset")
        if len(dataset) < batch_size:
            raise ConfigError(f"dataset smaller than batch_size ({len(dataset)} < {batch_size})")
        x_raw, y_raw = dataset.training_arrays()
        if refit_normalizer:
            self.normalizer = Normalizer.fit(x_raw, y_raw, context_dim=0)
        x = self.normalizer.normalize_in(x_raw)
        y = self.normalizer.normalize_out(y_raw)
        rng = np.random.default_rng(seed)
        st = nn.AdamState.for_weights(self.weights, alpha=lr)
        n = x.shape[0]
        tail_start = int(np.ceil(epochs * (1.0 - lr_tail_fraction)))
        for epoch in range(epochs):
            if epoch >= tail_start and epochs > tail_start:
                st.alpha = lr * lr_tail_floor ** ((epoch - tail_start + 1) / (epochs - tail_start))
            order = rng.permutation(n)
            total, seen = 0.0, 0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                loss, grads = nn.mse_loss_and_grad(self.weights, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} (batch start {start})")
                nn.adam_step(self.weights, st, grads)
                total += loss * idx.size
                seen += idx.size
            report.epoch_losses.append(total / seen)
        return report

    def save(self, path_prefix: str, extra_meta: dict | None = None) -> None:
        meta = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "context_dim": self.context_dim,
            "normalizer": self.normalizer.to_dict(),
        }
        if extra_meta:
            meta.update(extra_meta)
        nn.save_weights(path_prefix, self.weights, extra_meta=meta)

    @classmethod
    def load(cls, path_prefix: str) -> "DynamicsModel":
        weights, meta = nn.load_weights(path_prefix)
        return cls(
            state_dim=meta["state_dim"], action_dim=meta["action_dim"],
            hidden_dims=tuple(meta["hidden_dims"]), context_dim=meta.get("context_dim", 0),
            weights=weights, normalizer=Normalizer.from_dict(meta["normalizer"]),
        )


def collect_random_episodes(env, lim: ConstraintLimits, n_episodes: int,
                            episode_len: int, seed: int,
                            condition=None) -> Dataset:
    """Roll constraint-respecting random action sequences, no reward in the loop."""
    if n_episodes < 1 or episode_len < 1:
        raise ConfigError("n_episodes and episode_len must be >= 1")
    d = env.descriptor
    tag = (condition or getattr(env, "condition", None))
    ds = Dataset(d.state_dim, d.action_dim,
                 condition_tag=tag.tag if tag is not None else "default",
                 meta={"env": env.params_dict(), "seed": seed,
                       "source": "random_controller"})
    for ep in range(n_episodes):
        s = env.reset(condition, seed=[seed, ep])
        hist = ActionHistory.constant(np.asarray(d.neutral_action))
        seq = sample_sequences(hist, lim, episode_len, 1, seed=[seed, ep, 1])[0]
        states, actions, next_states = [], [], []
        for t in range(episode_len):
            s_next, _, done = env.step(seq[t])
            states.append(s)
            actions.append(seq[t])
            next_states.append(s_next)
            s = s_next
            if done:
                break
        ds.append_episode(np.array(states), np.array(actions), np.array(next_states), ep)
    return ds
