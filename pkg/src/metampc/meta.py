"""First-order meta-training over per-condition datasets, plus online adaptation.

Meta-training (Reptile-style): shared weights are repeatedly fine-tuned on
one condition's dataset together with that condition's learned latent
vector, then the shared weights move a decaying fraction toward the
fine-tuned weights:

    i = n mod N
    theta = theta_star
    repeat n_inner times:
        L = mean squared error of the model on D_i with latent c_i
        Adam-update theta and c_i on dL/dtheta, dL/dc_i
    theta_star += (1 - n / n_outer) * beta * (theta - theta_star)

Online adaptation, called every control step: score each condition's
latent by its window MSE under the shared weights (lower loss = more
likely), pick the argmin, then fine-tune a fresh copy of the shared
weights together with the selected latent on the window. The shared
weights reset each call; latent updates persist across calls. Adam state
is rebuilt per call since the weights restart from theta_star.

Model file: the nn weight format, with all latent vectors, condition tags
and the training config carried in the JSON sidecar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dynamics import Dataset, DynamicsModel, Normalizer, Transition
from .errors import ConfigError, TrainingError
from .mpc import MpcConfig, RewardSpec, run_episode
from .sampling import ConstraintLimits


@dataclass
class ConditionLatent:
    """Learned embedding of one training condition, fed as model context."""

    index: int
    vec: np.ndarray

    def copy(self) -> "ConditionLatent":
        return ConditionLatent(self.index, self.vec.copy())


@dataclass(frozen=True)
class MetaTrainConfig:
    n_outer: int = 3000
    n_inner: int = 10
    inner_lr: float = 1e-3
    outer_step: float = 0.5  # beta, scaled by the linear decay
    latent_dim: int = 8
    hidden_dims: tuple[int, ...] = (256, 256)
    seed: int = 0
    max_batch: int | None = None  # subsample cap per inner loop; None = full dataset

    def __post_init__(self):
        if not 0.0 < self.outer_step <= 1.0:
            raise ConfigError("outer_step must lie in (0, 1]")
        if self.latent_dim < 1 or self.n_inner < 0 or self.n_outer < 1:
            raise ConfigError("bad meta-training sizes")

    def to_dict(self) -> dict:
        return {
            "n_outer": self.n_outer, "n_inner": self.n_inner, "inner_lr": self.inner_lr,
            "outer_step": self.outer_step, "latent_dim": self.latent_dim,
            "hidden_dims": list(self.hidden_dims), "seed": self.seed,
            "max_batch": self.max_batch,
        }


@dataclass(frozen=True)
class AdaptConfig:
    window: int = 5  # transitions kept for condition selection and fine-tuning
    n_inner: int = 5
    lr: float = 1e-3

    def __post_init__(self):
        if self.window < 1 or self.n_inner < 0:
            raise ConfigError("window must be >= 1 and n_inner >= 0")

    def to_dict(self) -> dict:
        return {"window": self.window, "n_inner": self.n_inner, "lr": self.lr}


@dataclass
class MetaTrainReport:
    outer_losses: list[float] = field(default_factory=list)  # final inner loss per outer iter

    @property
    def final_loss(self) -> float:
        return self.outer_losses[-1] if self.outer_losses else float("nan")


class MetaModel:
    """Shared meta-trained weights plus one latent vector per condition."""

    def __init__(self, state_dim: int, action_dim: int, hidden_dims,
                 weights: nn.ModelWeights, latents: list[ConditionLatent],
                 normalizer: Normalizer, condition_tags: list[str],
                 train_config: dict | None = None):
        if len(latents) < 2:
            raise ConfigError("a meta-model needs at least 2 conditions")
        dims = {latent.vec.shape for latent in latents}
        if len(dims) != 1:
            raise ConfigError("latent vectors disagree on dimension")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden_dims = tuple(hidden_dims)
        self.weights = weights
        self.latents = latents
        self.normalizer = normalizer
        self.condition_tags = list(condition_tags)
        self.train_config = dict(train_config or {})

    @property
    def n_conditions(self) -> int:
        return len(self.latents)

    @property
    def latent_dim(self) -> int:
        return self.latents[0].vec.shape[0]

    def model_with(self, weights: nn.ModelWeights) -> DynamicsModel:
        """A dynamics-model view over the given weights (shared normalizer)."""
        return DynamicsModel(
            self.state_dim, self.action_dim, hidden_dims=self.hidden_dims,
            context_dim=self.latent_dim, weights=weights, normalizer=self.normalizer,
        )

    def base_model(self) -> DynamicsModel:
        return self.model_with(self.weights)

    def save(self, path_prefix: str) -> None:
        meta = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "context_dim": self.latent_dim,
            "normalizer": self.normalizer.to_dict(),
            "latents": [latent.vec.tolist() for latent in self.latents],
            "condition_tags": self.condition_tags,
            "train_config": self.train_config,
        }
        nn.save_weights(path_prefix, self.weights, extra_meta=meta)

    @classmethod
    def load(cls, path_prefix: str) -> "MetaModel":
        weights, meta = nn.load_weights(path_prefix)
        latents = [ConditionLatent(i, np.asarray(v, dtype=float))
                   for i, v in enumerate(meta["latents"])]
        return cls(
            meta["state_dim"], meta["action_dim"], tuple(meta["hidden_dims"]),
            weights, latents, Normalizer.from_dict(meta["normalizer"]),
            meta.get("condition_tags", [str(i) for i in range(len(latents))]),
            meta.get("train_config"),
        )


def _normalized_arrays(datasets: list[Dataset], normalizer: Normalizer,
                       sa_dim: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for ds in datasets:
        x_raw, y_raw = ds.training_arrays()
        x = (x_raw - normalizer.in_mean[:sa_dim]) / normalizer.in_std[:sa_dim]
        out.append((x, normalizer.normalize_out(y_raw)))
    return out


def _context_inputs(x_sa: np.ndarray, latent: np.ndarray) -> np.ndarray:
    return np.hstack([x_sa, np.tile(latent, (x_sa.shape[0], 1))])


def meta_train(datasets: list[Dataset], cfg: MetaTrainConfig) -> tuple[MetaModel, MetaTrainReport]:
    """Train shared weights and per-condition latents over N condition datasets.

    Conditions are visited round-robin; the outer interpolation step decays
    linearly to zero over the run. Raises TrainingError (with the condition
    index) if an inner loop diverges.
    """
    if len(datasets) < 2:
        raise ConfigError("meta-training needs at least 2 condition datasets")
    sd, ad = datasets[0].state_dim, datasets[0].action_dim
    for k, ds in enumerate(datasets):
        if len(ds) == 0:
            raise ConfigError(f"dataset {k} is empty")
        if (ds.state_dim, ds.action_dim) != (sd, ad):
            raise ConfigError("datasets disagree on state/action dims")

    n_cond = len(datasets)
    sa_dim = sd + ad
    spec = nn.MlpSpec(sa_dim + cfg.latent_dim, cfg.hidden_dims, sd)
    shared = nn.init_weights(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    latents = [ConditionLatent(i, rng.normal(0.0, 0.1, size=cfg.latent_dim))
               for i in range(n_cond)]

    x_all = np.vstack([np.hstack([ds.states, ds.actions]) for ds in datasets])
    y_all = np.vstack([ds.next_states - ds.states for ds in datasets])
    normalizer = Normalizer.fit(x_all, y_all, context_dim=cfg.latent_dim)
    arrays = _normalized_arrays(datasets, normalizer, sa_dim)

    report = MetaTrainReport()
    for n_outer in range(cfg.n_outer):
        i = n_outer % n_cond
        x_sa, y = arrays[i]
        if cfg.max_batch is not None and x_sa.shape[0] > cfg.max_batch:
            idx = rng.choice(x_sa.shape[0], size=cfg.max_batch, replace=False)
            x_sa, y = x_sa[idx], y[idx]
        theta = shared.copy()
        st_theta = nn.AdamState.for_weights(theta, alpha=cfg.inner_lr)
        st_latent = nn.AdamState.for_arrays([latents[i].vec], alpha=cfg.inner_lr)
        loss = float("nan")
        for _ in range(cfg.n_inner):
            x = _context_inputs(x_sa, latents[i].vec)
            loss, grads, dx = nn.mse_loss_and_grad(theta, x, y, input_grad=True)
            if not np.isfinite(loss):
                raise TrainingError(f"inner loss diverged on condition {i}")
            g_latent = dx[:, sa_dim:].sum(axis=0)
            nn.adam_step(theta, st_theta, grads)
            nn.adam_update([latents[i].vec], st_latent, [g_latent])
        decay = (1.0 - n_outer / cfg.n_outer) * cfg.outer_step
        for w_shared, w_adapted in zip(shared.arrays, theta.arrays):
            w_shared += decay * (w_adapted - w_shared)
        report.outer_losses.append(loss)

    mm = MetaModel(sd, ad, cfg.hidden_dims, shared, latents, normalizer,
                   [ds.condition_tag for ds in datasets], cfg.to_dict())
    return mm, report


def _window_arrays(mm: MetaModel, window: list[Transition]) -> tuple[np.ndarray, np.ndarray]:
    if not window:
        raise ConfigError("empty transition window")
    sa_dim = mm.state_dim + mm.action_dim
    x_raw = np.array([np.concatenate([tr.s, tr.a]) for tr in window], dtype=float)
    y_raw = np.array([tr.s_next - tr.s for tr in window], dtype=float)
    x = (x_raw - mm.normalizer.in_mean[:sa_dim]) / mm.normalizer.in_std[:sa_dim]
    return x, mm.normalizer.normalize_out(y_raw)


def condition_likelihood(mm: MetaModel, window: list[Transition]) -> np.ndarray:
    """Window MSE of the shared weights under each condition latent.

    Lower loss marks the more likely condition. Uses the shared weights,
    not any previously adapted copy.
    """
    x_sa, y = _window_arrays(mm, window)
    return np.array([
        nn.mse_loss(mm.weights, _context_inputs(x_sa, latent.vec), y)
        for latent in mm.latents
    ])


def meta_adapt_step(
    mm: MetaModel, window: list[Transition], cfg: AdaptConfig
) -> tuple[nn.ModelWeights, int, np.ndarray]:
    """Select the likeliest condition and fine-tune a copy of the shared weights.

    Starts from the shared weights every call (not from the previous
    step's adapted copy). The selected latent is updated in place and so
    persists across calls; other latents and the shared weights are never
    mutated. Returns (adapted weights, selected index, per-condition losses).
    """
    losses = condition_likelihood(mm, window)
    i_star = int(np.argmin(losses))
    theta = mm.weights.copy()
    if cfg.n_inner == 0:
        return theta, i_star, losses
    x_sa, y = _window_arrays(mm, window)
    sa_dim = mm.state_dim + mm.action_dim
    latent = mm.latents[i_star]
    st_theta = nn.AdamState.for_weights(theta, alpha=cfg.lr)
    st_latent = nn.AdamState.for_arrays([latent.vec], alpha=cfg.lr)
    for _ in range(cfg.n_inner):
        x = _context_inputs(x_sa, latent.vec)
        loss, grads, dx = nn.mse_loss_and_grad(theta, x, y, input_grad=True)
        if not np.isfinite(loss):
            raise TrainingError(f"adaptation loss diverged on condition {i_star}")
        nn.adam_step(theta, st_theta, grads)
        nn.adam_update([latent.vec], st_latent, [dx[:, sa_dim:].sum(axis=0)])
    return theta, i_star, losses


class MetaAdapter:
    """Per-step adaptation hook for the closed loop.

    Before any transition has been observed it plans with the shared
    weights and the most recently selected latent (condition 0 at start),
    logging condition index -1.
    """

    def __init__(self, mm: MetaModel, cfg: AdaptConfig):
        self.mm = mm
        self.cfg = cfg
        self.window_len = cfg.window
        self.last_index = 0

    def __call__(self, window: list[Transition]):
        if not window:
            return (self.mm.base_model(), self.mm.latents[self.last_index].vec,
                    {"condition_idx": -1,
                     "condition_losses": [float("nan")] * self.mm.n_conditions})
        theta, i_star, losses = meta_adapt_step(self.mm, window, self.cfg)
        self.last_index = i_star
        return (self.mm.model_with(theta), self.mm.latents[i_star].vec,
                {"condition_idx": i_star, "condition_losses": losses.tolist()})


def run_adaptive_episode(
    env,
    mm: MetaModel,
    mpc_cfg: MpcConfig,
    lim: ConstraintLimits,
    reward: RewardSpec,
    adapt_cfg: AdaptConfig,
    *,
    T: int,
    seed: int,
    v_des_schedule=None,
    header: dict | None = None,
):
    """Closed loop with per-step condition selection and fine-tuning."""
    adapter = MetaAdapter(mm, adapt_cfg)
    head = dict(header or {})
    head.setdefault("adapt_config", adapt_cfg.to_dict())
    head.setdefault("n_conditions", mm.n_conditions)
    return run_episode(
        env, mm.base_model(), mpc_cfg, lim, reward,
        T=T, seed=seed, adaptation=adapter,
        v_des_schedule=v_des_schedule, header=head,
    )
