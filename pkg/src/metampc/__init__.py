"""Learned dynamics models, constraint-aware random-shooting MPC, and
first-order meta-training with online condition adaptation."""

from .errors import ConfigError, PlanningError, RolloutError, TrainingError
from .nn import AdamState, MlpSpec, ModelWeights, adam_step, forward, init_weights, mse_loss_and_grad
from .sampling import ActionHistory, ConstraintLimits, check_sequence, feasible_interval, sample_sequences
from .dynamics import Dataset, DynamicsModel, Normalizer, Transition, collect_random_episodes
from .envs import ConditionSpec, EnvDescriptor, FrictionCartEnv, LinearParamEnv, make_env
from .mpc import EpisodeLog, MpcConfig, RewardSpec, discounted_return, plan, reward_velocity_tracking, run_episode
from .meta import AdaptConfig, ConditionLatent, MetaModel, MetaTrainConfig, condition_likelihood, meta_adapt_step, meta_train, run_adaptive_episode

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ActionHistory", "AdaptConfig", "ConditionLatent", "ConditionSpec",
    "ConfigError", "ConstraintLimits", "Dataset", "DynamicsModel", "EnvDescriptor",
    "EpisodeLog", "FrictionCartEnv", "LinearParamEnv", "MetaModel", "MetaTrainConfig",
    "MlpSpec", "ModelWeights", "MpcConfig", "Normalizer", "PlanningError",
    "RewardSpec", "RolloutError", "TrainingError", "Transition", "adam_step",
    "check_sequence", "collect_random_episodes", "condition_likelihood",
    "discounted_return", "feasible_interval", "forward", "init_weights", "make_env",
    "meta_adapt_step", "meta_train", "mse_loss_and_grad", "plan",
    "reward_velocity_tracking", "run_adaptive_episode", "run_episode", "sample_sequences",
]
