"""Diversity-regularized hierarchical RL: smoothed transport-distance
estimation in a random-feature dual, behavioral embeddings with common
random numbers, a two-level clipped-surrogate agent, and a desk-scale
experiment harness."""

__version__ = "0.1.0"

from .errors import (
    CollectionError,
    ConfigError,
    DomainError,
    EstimationError,
    FittingError,
    OracleScopeError,
    ShapeError,
    StaleCacheError,
    TrainingAborted,
)
from .ot import (
    DiscreteMeasure,
    DualPotentials,
    OtParams,
    RandomFeatureMap,
    embed,
    estimate_wd,
    exact_wd_1d,
    exact_wd_discrete,
    fit_potentials,
    js_divergence_categorical,
    make_feature_map,
    median_heuristic_bandwidth,
    paired_sampler,
    product_sampler,
)
from .embedding import (
    CrnStream,
    PushforwardBatch,
    StateSet,
    collect_rollout_states,
    pushforward,
    sample_action_pairs,
)
from .nets import Adam, PolicyNet, ValueNet
from .hierarchy import (
    HierAgent,
    PpoParams,
    RolloutBuffer,
    diversity_gradient,
    gae,
    ppo_update_master,
    ppo_update_subpolicy,
    wd_min,
)
from .envs import EnvStep, MovementBandits, PointReach, make_env
from .config import TrainConfig, config_from_dict, load_config
from .harness import (
    RunArtifacts,
    selfcheck,
    sweep,
    train,
    transfer_eval,
    wd_js_table,
)

__all__ = [
    "__version__",
    "Adam", "CollectionError", "ConfigError", "CrnStream", "DiscreteMeasure",
    "DomainError", "DualPotentials", "EnvStep", "EstimationError",
    "FittingError", "HierAgent", "MovementBandits", "OracleScopeError",
    "OtParams", "PointReach", "PolicyNet", "PpoParams", "PushforwardBatch",
    "RandomFeatureMap", "RolloutBuffer", "RunArtifacts", "ShapeError",
    "StaleCacheError", "StateSet", "TrainConfig", "TrainingAborted",
    "ValueNet", "collect_rollout_states", "config_from_dict",
    "diversity_gradient", "embed", "estimate_wd", "exact_wd_1d",
    "exact_wd_discrete", "fit_potentials", "gae", "js_divergence_categorical",
    "load_config", "make_env", "make_feature_map",
    "median_heuristic_bandwidth", "paired_sampler", "ppo_update_master",
    "ppo_update_subpolicy", "product_sampler", "pushforward",
    "sample_action_pairs", "selfcheck", "sweep", "train", "transfer_eval",
    "wd_js_table", "wd_min",
]
