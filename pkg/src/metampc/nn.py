"""Minimal dense-network engine: forward pass, exact backprop, Adam.

Sized for small fully connected regressors (ReLU hidden layers, linear
output). Everything is float64 numpy with explicit seeding; at these model
sizes determinism and testability outrank speed.

Loss convention: MSE is averaged over the batch AND over output dimensions.
This rescales gradients (and hence the effective learning rate) relative to
a sum-over-dims convention, so it is fixed here once and documented.

Weight file format: a flat little-endian float64 binary of every parameter
array in layer order (W0, b0, W1, b1, ...), with a JSON sidecar recording
the layer sizes, activation, seed and format version.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError

WEIGHT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network (hidden ReLU, linear out)."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


@dataclass
class ModelWeights:
    """Per-layer weights and biases, stored as [W0, b0, W1, b1, ...].

    W matrices are (fan_out, fan_in); biases are (fan_out,).
    """

    spec: MlpSpec
    arrays: list[np.ndarray]
    seed: int | None = None

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, [a.copy() for a in self.arrays], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for a in self.arrays:
            a[...] = vec[offset : offset + a.size].reshape(a.shape)
            offset += a.size
        if offset != vec.size:
            raise ConfigError(f"flat vector has {vec.size} entries, expected {offset}")

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)


def init_weights(spec: MlpSpec, seed: int) -> ModelWeights:
    """He-normal init for ReLU hidden layers, Xavier for the linear output.

    Deterministic per seed: the rng draws W then b for each layer in order.
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    arrays: list[np.ndarray] = []
    for layer in range(spec.n_layers):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        if layer < spec.n_layers - 1:
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        arrays.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        arrays.append(np.zeros(fan_out))
    return ModelWeights(spec, arrays, seed=seed)


def zero_weights(spec: MlpSpec) -> ModelWeights:
    """All-zero weights and biases (useful as a stub and in tests)."""
    dims = spec.layer_dims
    arrays = []
    for layer in range(spec.n_layers):
        arrays.append(np.zeros((dims[layer + 1], dims[layer])))
        arrays.append(np.zeros(dims[layer + 1]))
    return ModelWeights(spec, arrays)


def _as_batch(x: np.ndarray, width: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ConfigError(f"{name} must have width {width}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite entries in {name}")
    return x, squeeze


def _forward_cached(w: ModelWeights, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass keeping post-activation values of every layer.

    Returns [a_0=x, a_1, ..., a_L] where a_L is the linear output.
    """
    acts = [x]
    h = x
    n = w.spec.n_layers
    # callers decide how to treat non-finite outputs (planners score them
    # as -inf), so IEEE overflow warnings are noise here
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in range(n):
            W, b = w.arrays[2 * layer], w.arrays[2 * layer + 1]
            z = h @ W.T + b
            h = z if layer == n - 1 else np.maximum(z, 0.0)
            acts.append(h)
    return acts


def forward(w: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Evaluate the network. Accepts a single input vector or an (n, d) batch."""
    xb, squeeze = _as_batch(x, w.spec.input_dim, "input")
    out = _forward_cached(w, xb)[-1]
    return out[0] if squeeze else out


def mse_loss(w: ModelWeights, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error (over batch and output dims), forward only."""
    xb, _ = _as_batch(inputs, w.spec.input_dim, "inputs")
    tb, _ = _as_batch(targets, w.spec.output_dim, "targets")
    if xb.shape[0] != tb.shape[0]:
        raise ConfigError("inputs and targets disagree on batch size")
    err = _forward_cached(w, xb)[-1] - tb
    return float(np.mean(err * err))


def mse_loss_and_grad(
    w: ModelWeights,
    inputs: np.ndarray,
    targets: np.ndarray,
    *,
    input_grad: bool = False,
):
    """Loss plus the exact analytic gradient of the batch MSE.

    Args:
        inputs: (n, input_dim) batch, or a single vector.
        targets: (n, output_dim) regression targets.
        input_grad: also return dloss/dinputs, needed when part of the
            input (a learned context vector) is itself being optimized.

    Returns:
        (loss, grads) where grads aligns with ``w.arrays``; with
        input_grad=True returns (loss, grads, dinputs).
    """
    xb, _ = _as_batch(inputs, w.spec.input_dim, "inputs")
    tb, _ = _as_batch(targets, w.spec.output_dim, "targets")
    n, dout = tb.shape
    if xb.shape[0] != n:
        raise ConfigError("inputs and targets disagree on batch size")
    if n == 0:
        raise ConfigError("empty batch")

    acts = _forward_cached(w, xb)
    err = acts[-1] - tb
    loss = float(np.mean(err * err))

    grads: list[np.ndarray] = [None] * len(w.arrays)  # type: ignore[list-item]
    delta = (2.0 / (n * dout)) * err
    for layer in range(w.spec.n_layers - 1, -1, -1):
        W = w.arrays[2 * layer]
        a_prev = acts[layer]
        grads[2 * layer] = delta.T @ a_prev
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0 or input_grad:
            delta = delta @ W
            if layer > 0:
                # ReLU mask; post-activation > 0 iff pre-activation > 0
                delta = delta * (acts[layer] > 0.0)
    if input_grad:
        return loss, grads, delta
    return loss, grads


@dataclass
class AdamState:
    """Adam accumulators plus hyperparameters, one slot per weight array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray], alpha: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            alpha=alpha,
            **kw,
        )

    @classmethod
    def for_weights(cls, w: ModelWeights, alpha: float = 1e-3, **kw) -> "AdamState":
        return cls.for_arrays(w.arrays, alpha=alpha, **kw)


def adam_update(arrays: list[np.ndarray], st: AdamState, grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam step, applied to ``arrays`` in place.

    Single-writer contract: the caller must hold exclusive access to
    (arrays, st) for the duration of the call.
    """
    if len(arrays) != len(grads) or len(arrays) != len(st.m):
        raise ConfigError("gradient/state structure does not match arrays")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} != weight shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    st.t += 1
    b1c = 1.0 - st.beta1**st.t
    b2c = 1.0 - st.beta2**st.t
    for a, g, m, v in zip(arrays, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        a -= st.alpha * (m / b1c) / (np.sqrt(v / b2c) + st.eps)


def adam_step(w: ModelWeights, st: AdamState, grads: list[np.ndarray]) -> None:
    """Adam update on model weights (in place; increments st.t)."""
    adam_update(w.arrays, st, grads)


def save_weights(path_prefix: str, w: ModelWeights, extra_meta: dict | None = None) -> None:
    """Write <prefix>.bin (flat little-endian float64) and <prefix>.json."""
    flat = w.flat().astype("<f8")
    with open(path_prefix + ".bin", "wb") as f:
        f.write(flat.tobytes())
    meta = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "input_dim": w.spec.input_dim,
        "hidden_dims": list(w.spec.hidden_dims),
        "output_dim": w.spec.output_dim,
        "activation": w.spec.activation,
        "seed": w.seed,
        "n_params": int(flat.size),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(path_prefix + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_weights(path_prefix: str) -> tuple[ModelWeights, dict]:
    """Inverse of save_weights; returns (weights, sidecar metadata)."""
    with open(path_prefix + ".json") as f:
        meta = json.load(f)
    if meta.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise ConfigError(f"unsupported weight format {meta.get('format_version')}")
    spec = MlpSpec(meta["input_dim"], tuple(meta["hidden_dims"]), meta["output_dim"], meta["activation"])
    flat = np.frombuffer(open(path_prefix + ".bin", "rb").read(), dtype="<f8").astype(float)
    w = zero_weights(spec)
    w.seed = meta.get("seed")
    if flat.size != w.n_params:
        raise ConfigError(f"weight file has {flat.size} params, spec needs {w.n_params}")
    w.set_flat(flat)
    return w, meta
