"""Desk-scale environments behind one small interface.

``MovementBandits``: planar navigation with candidate targets, one of which
is secretly correct.  The observation is the agent position plus every
target position; the correct index never appears in it.  Reward is 1 on
each step the agent sits within the reward radius of the correct target,
else 0.  A task (for the meta protocol) pins the correct index across
episodes until ``new_task`` resamples it; target layout is redrawn on every
reset either way.

``PointReach``: continuous analogue with a 2-D velocity action and reward
equal to negative distance to the goal.

Geometry (arena, step size, radius, horizon, target count) is declared
configuration, not ground truth; the harness records it in run manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .rngs import substream


@dataclass
class EnvStep:
    """One transition: observation after the move, reward, done flag and
    diagnostic info (never part of the observation)."""

    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class MovementBanditsState:
    agent_pos: np.ndarray
    targets: np.ndarray
    correct_index: int
    steps: int


# action index -> displacement direction, arena-axis units
ACTION_NAMES = ("up", "down", "left", "right", "stay")
_DELTAS = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])


class MovementBandits:
    """Discrete navigation among candidate targets with a hidden correct one."""

    def __init__(self, seed=0, arena=100.0, step_size=5.0, radius=10.0,
                 horizon=50, n_targets=2, normalize_obs=True):
        if arena <= 0 or step_size <= 0 or radius <= 0:
            raise ConfigError("arena, step_size and radius must be positive")
        if horizon < 1 or n_targets < 1:
            raise ConfigError("horizon and n_targets must be >= 1")
        self.seed = seed
        self.arena = float(arena)
        self.step_size = float(step_size)
        self.radius = float(radius)
        self.horizon = int(horizon)
        self.n_targets = int(n_targets)
        self.normalize_obs = bool(normalize_obs)
        self.obs_dim = 2 + 2 * self.n_targets
        self.n_actions = len(_DELTAS)
        self.action_space = ("discrete", self.n_actions)
        self.state: MovementBanditsState | None = None
        self._episodes = 0
        self._tasks = 0
        self._task_index: int | None = None

    def new_task(self) -> int:
        """Pin the correct index for all subsequent resets until called again."""
        rng = substream("mb_task", self.seed, self._tasks)
        self._tasks += 1
        self._task_index = int(rng.integers(0, self.n_targets))
        return self._task_index

    def clear_task(self):
        self._task_index = None

    def reset(self, seed=None) -> np.ndarray:
        if seed is None:
            rng = substream("mb_reset", self.seed, self._episodes)
        else:
            rng = substream("mb_reset", seed)
        self._episodes += 1
        targets = rng.uniform(0.0, self.arena, size=(self.n_targets, 2))
        if self._task_index is not None:
            correct = self._task_index
        else:
            correct = int(rng.integers(0, self.n_targets))
        self.state = MovementBanditsState(
            agent_pos=np.full(2, self.arena / 2.0),
            targets=targets, correct_index=correct, steps=0)
        return self._obs()

    def _obs(self) -> np.ndarray:
        s = self.state
        flat = np.concatenate([s.agent_pos, s.targets.reshape(-1)])
        return flat / self.arena if self.normalize_obs else flat.copy()

    def step(self, action) -> EnvStep:
        if self.state is None:
            raise DomainError("step before reset")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise DomainError(f"action index {a} out of range 0-{self.n_actions - 1}")
        s = self.state
        s.agent_pos = np.clip(s.agent_pos + self.step_size * _DELTAS[a],
                              0.0, self.arena)
        s.steps += 1
        dist = float(np.linalg.norm(s.agent_pos - s.targets[s.correct_index]))
        reward = 1.0 if dist <= self.radius else 0.0
        done = s.steps >= self.horizon
        return EnvStep(self._obs(), reward, done, {"distance": dist})


class PointReach:
    """Continuous point mass: 2-D velocity action, reward = -distance to goal."""

    def __init__(self, seed=0, arena=100.0, step_size=5.0, horizon=50,
                 normalize_obs=True):
        if arena <= 0 or step_size <= 0:
            raise ConfigError("arena and step_size must be positive")
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        self.seed = seed
        self.arena = float(arena)
        self.step_size = float(step_size)
        self.horizon = int(horizon)
        self.normalize_obs = bool(normalize_obs)
        self.obs_dim = 4
        self.action_dim = 2
        self.action_space = ("box", self.action_dim)
        self.pos: np.ndarray | None = None
        self.goal: np.ndarray | None = None
        self.steps = 0
        self._episodes = 0

    def reset(self, seed=None) -> np.ndarray:
        if seed is None:
            rng = substream("pr_reset", self.seed, self._episodes)
        else:
            rng = substream("pr_reset", seed)
        self._episodes += 1
        self.pos = np.full(2, self.arena / 2.0)
        self.goal = rng.uniform(0.0, self.arena, size=2)
        self.steps = 0
        return self._obs()

    def _obs(self) -> np.ndarray:
        flat = np.concatenate([self.pos, self.goal])
        return flat / self.arena if self.normalize_obs else flat.copy()

    def step(self, action) -> EnvStep:
        if self.pos is None:
            raise DomainError("step before reset")
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (2,):
            raise DomainError(f"action must have 2 components, got shape {a.shape}")
        clipped = np.clip(a, -1.0, 1.0)
        was_clipped = bool(np.any(clipped != a))
        self.pos = np.clip(self.pos + self.step_size * clipped, 0.0, self.arena)
        self.steps += 1
        dist = float(np.linalg.norm(self.pos - self.goal))
        done = self.steps >= self.horizon
        return EnvStep(self._obs(), -dist, done,
                       {"distance": dist, "clipped": was_clipped})

    def greedy_action(self) -> np.ndarray:
        """Per-axis proportional controller; optimal for this kinematics."""
        return np.clip((self.goal - self.pos) / self.step_size, -1.0, 1.0)

    def optimal_return(self, start: np.ndarray, goal: np.ndarray) -> float:
        """Best achievable return from ``start``: each axis closes at most
        step_size per step, so the distance after t steps is the norm of the
        per-axis residuals."""
        delta = np.abs(np.asarray(goal, dtype=float) - np.asarray(start, dtype=float))
        total = 0.0
        for t in range(1, self.horizon + 1):
            resid = np.maximum(delta - t * self.step_size, 0.0)
            total -= float(np.linalg.norm(resid))
        return total


def make_env(name: str, seed=0, **geometry):
    """Factory used by the harness config ('movement_bandits' | 'point_reach')."""
    if name == "movement_bandits":
        return MovementBandits(seed=seed, **geometry)
    if name == "point_reach":
        return PointReach(seed=seed, **geometry)
    raise ConfigError(f"unknown environment {name!r}")
