"""Run configuration: a single flat dataclass, file loading (YAML or JSON),
override application, and a content hash embedded in every artifact."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .ot import OtParams


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; fully serializable, hashable by content."""

    # environment selection and geometry
    env: str = "movement_bandits"
    env_geometry: dict = field(default_factory=dict)

    # hierarchy
    K: int = 2
    alpha: float = 0.5
    subpolicy_duration: int = 10
    regularizer: str = "wd"  # "wd" | "js" | "none"

    # behavioral embedding
    rollout_states: int = 32
    batch_per_state: int = 8
    feature_count: int = 128
    bandwidth: float = 1.0
    relax_temperature: float = 0.5
    state_pool_window: int = 512

    # transport estimation
    ot: OtParams = field(default_factory=OtParams)

    # networks and optimizers
    hidden: tuple = (64, 64)
    master_hidden: tuple = (64, 64)
    lr: float = 3e-3
    value_lr: float = 1e-2
    master_lr: float = 1e-2
    init_log_std: float = -0.5

    # surrogate objective
    clip_ratio: float = 0.2
    epochs: int = 4
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    master_entropy_coef: float = 0.01

    # training loop
    total_timesteps: int = 200_000
    steps_per_update: int = 500
    seed: int = 0
    task_period_episodes: int = 40
    master_reset_on_task: bool = False
    checkpoint_every: int = 50

    # transfer protocol
    freeze_subpolicies: bool = True
    fine_tune_master: bool = True
    transfer_updates: int = 80
    transfer_steps_per_update: int = 400

    def __post_init__(self):
        if self.env not in ("movement_bandits", "point_reach"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.regularizer not in ("wd", "js", "none"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.subpolicy_duration < 1:
            raise ConfigError("subpolicy_duration must be >= 1")
        for name in ("rollout_states", "batch_per_state", "feature_count",
                     "state_pool_window", "steps_per_update", "epochs",
                     "transfer_updates", "transfer_steps_per_update"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.bandwidth <= 0 or self.relax_temperature <= 0:
            raise ConfigError("bandwidth and relax_temperature must be positive")
        if not 0 < self.clip_ratio < 1:
            raise ConfigError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if not 0 <= self.discount <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ConfigError("discount and gae_lambda must lie in [0, 1]")
        if self.entropy_coef < 0 or self.master_entropy_coef < 0:
            raise ConfigError("entropy coefficients must be >= 0")
        if self.total_timesteps < 0:
            raise ConfigError("total_timesteps must be >= 0")
        if self.task_period_episodes < 0 or self.checkpoint_every < 0:
            raise ConfigError("task_period_episodes and checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["master_hidden"] = list(self.master_hidden)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def config_from_dict(raw: dict) -> TrainConfig:
    """Build a TrainConfig from a plain mapping, rejecting unknown keys."""
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "ot" in raw and isinstance(raw["ot"], dict):
        ot_known = {f.name for f in dataclasses.fields(OtParams)}
        ot_unknown = set(raw["ot"]) - ot_known
        if ot_unknown:
            raise ConfigError(f"unknown ot config keys: {sorted(ot_unknown)}")
        raw["ot"] = OtParams(**raw["ot"])
    for key in ("hidden", "master_hidden"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return TrainConfig(**raw)


def load_config(path: str, overrides: dict = None) -> TrainConfig:
    """Read a YAML or JSON config file and apply flat CLI overrides."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        raw = json.loads(text)
    else:
        import yaml
        raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)


def save_config(cfg: TrainConfig, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
