"""Behavioral comparison inputs: rollout-state pools, paired action draws
under common random numbers, and pushforward feature batches.

Two policies are compared through the actions they take at a shared pool of
states.  Both policies consume the *same* underlying random draws (common
random numbers): Gaussian heads share the standard-normal noise of the
reparameterized sample, categorical heads share per-category uniforms mapped
through -log(-log u) so the hard action is the argmax of identically
perturbed log-probabilities.  Identical policies therefore produce identical
action batches, and estimator variance across seeds drops relative to
independent draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CollectionError, ConfigError, ShapeError
from .nets import PolicyNet, log_softmax
from .ot import RandomFeatureMap, embed
from .rngs import stable_hash, substream


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateSet:
    """Pool of comparison states with a provenance tag and content id."""

    states: np.ndarray
    source: str
    set_id: str

    @property
    def n(self) -> int:
        return self.states.shape[0]


class CrnStream:
    """Counted stream of shared random draws.

    Two streams constructed with equal seeds yield identical sequences;
    ``draws`` counts scalars handed out.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = substream("crn", self.seed)
        self.draws = 0

    def normal(self, shape) -> np.ndarray:
        out = self._rng.standard_normal(shape)
        self.draws += out.size
        return out

    def uniform(self, shape) -> np.ndarray:
        out = self._rng.random(shape)
        self.draws += out.size
        return out


@dataclass(frozen=True, eq=False)
class PushforwardBatch:
    """Embedded action batch (h, m) tagged with its policy and state pool."""

    features: np.ndarray
    policy_id: int
    state_set_id: str

    @property
    def h(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class ActionPairCache:
    """Everything needed to re-evaluate one policy's sampled actions at new
    parameters with the *same* draws: the state pool, the raw per-sample
    noise (eps for Gaussian heads, -log(-log u) perturbations for
    categorical heads), and the relaxation temperature."""

    kind: str
    state_set: StateSet
    draws: np.ndarray            # (T, B, action_dim)
    batch_per_state: int
    temperature: float


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def collect_rollout_states(sources, n_states: int, seed: int,
                           labels=None) -> StateSet:
    """Sample a balanced pool of states from the policies' recent trajectories.

    ``sources`` is a sequence of (N_i, obs_dim) arrays, one per subpolicy.
    Quotas are split evenly; short sources contribute everything they have
    and the shortfall backfills from the others.  Sampling is without
    replacement within each source.  Raises CollectionError naming the
    available count when the union is too small.
    """
    arrays = [np.asarray(s, dtype=float) for s in sources if len(s) > 0]
    if n_states < 1:
        raise ConfigError(f"need at least one state, got {n_states}")
    if not arrays:
        raise CollectionError(f"requested {n_states} states, 0 available")
    obs_dim = arrays[0].shape[1]
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != obs_dim:
            raise ShapeError("all sources must be (N, obs_dim) with a shared obs_dim")
    total = sum(len(a) for a in arrays)
    if total < n_states:
        raise CollectionError(
            f"requested {n_states} states, only {total} available")

    rng = substream("rollout_states", seed)
    quota = [n_states // len(arrays)] * len(arrays)
    for i in range(n_states - sum(quota)):
        quota[i] += 1
    # Short sources yield their full content; spill the shortfall round-robin.
    picks = []
    spill = 0
    for a, q in zip(arrays, quota):
        take = min(q, len(a))
        spill += q - take
        picks.append(rng.choice(len(a), size=take, replace=False))
    i = 0
    while spill > 0:
        a, chosen = arrays[i % len(arrays)], picks[i % len(arrays)]
        if len(chosen) < len(a):
            rest = np.setdiff1d(np.arange(len(a)), chosen)
            extra = rng.choice(rest, size=min(spill, len(rest)), replace=False)
            picks[i % len(arrays)] = np.concatenate([chosen, extra])
            spill -= len(extra)
        i += 1
    states = np.concatenate([a[idx] for a, idx in zip(arrays, picks)], axis=0)
    states = states[rng.permutation(len(states))]
    tag = "subpolicies " + ",".join(str(l) for l in labels) if labels else \
        f"{len(arrays)} trajectory sources"
    return StateSet(states=states, source=tag,
                    set_id=stable_hash(states.tobytes()))


def sample_action_pairs(pi_k: PolicyNet, pi_l: PolicyNet, state_set: StateSet,
                        batch_per_state: int, crn: CrnStream,
                        crn_other: CrnStream = None, temperature: float = 0.5):
    """Draw B actions per state from both policies under shared randomness.

    Returns (actions_k, actions_l, cache) where the action arrays have
    h = B * T rows (state-major order), one-hot rows for categorical heads
    and raw action vectors for Gaussian heads.  ``cache`` carries the k-side
    draws for the reparameterized/relaxed gradient pathway.  Pass
    ``crn_other`` to give the second policy independent draws (used when
    quantifying the variance reduction of shared draws).
    """
    if pi_k.head != pi_l.head or pi_k.action_dim != pi_l.action_dim:
        raise ShapeError("policies must share head type and action dimension")
    if batch_per_state < 1:
        raise ConfigError(f"batch_per_state must be >= 1, got {batch_per_state}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")

    T = state_set.n
    B = batch_per_state
    d = pi_k.action_dim
    out_k, _ = pi_k.forward(state_set.states)
    out_l, _ = pi_l.forward(state_set.states)

    if pi_k.head == "gaussian":
        eps_k = crn.normal((T, B, d))
        eps_l = crn_other.normal((T, B, d)) if crn_other is not None else eps_k
        a_k = out_k.mean[:, None, :] + np.exp(out_k.log_std) * eps_k
        a_l = out_l.mean[:, None, :] + np.exp(out_l.log_std) * eps_l
        cache = ActionPairCache(kind="gaussian", state_set=state_set,
                                draws=eps_k, batch_per_state=B,
                                temperature=temperature)
        return a_k.reshape(T * B, d), a_l.reshape(T * B, d), cache

    g_k = gumbel_from_uniform(crn.uniform((T, B, d)))
    g_l = gumbel_from_uniform(crn_other.uniform((T, B, d))) if crn_other is not None else g_k
    a_k = hard_onehot(log_softmax(out_k.logits), g_k)
    a_l = hard_onehot(log_softmax(out_l.logits), g_l)
    cache = ActionPairCache(kind="categorical", state_set=state_set,
                            draws=g_k, batch_per_state=B,
                            temperature=temperature)
    return a_k.reshape(T * B, d), a_l.reshape(T * B, d), cache


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Per-category inverse CDF of the Gumbel law; argmax of log p + g
    samples the categorical exactly."""
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def hard_onehot(logp: np.ndarray, g: np.ndarray) -> np.ndarray:
    """One-hot rows of argmax(log p + g) with logp (T, A) and g (T, B, A)."""
    scores = logp[:, None, :] + g
    idx = scores.argmax(axis=2)
    out = np.zeros_like(scores)
    T, B = idx.shape
    out[np.arange(T)[:, None], np.arange(B)[None, :], idx] = 1.0
    return out


def relaxed_onehot(logp: np.ndarray, g: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-relaxed one-hot of the same perturbed log-probabilities;
    the differentiable surrogate of ``hard_onehot``."""
    scores = (logp[:, None, :] + g) / temperature
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=2, keepdims=True)


def pushforward(fmap: RandomFeatureMap, actions: np.ndarray, policy_id: int = -1,
                state_set_id: str = "") -> PushforwardBatch:
    """Embed an action batch (h, d) into feature space as a tagged batch."""
    feats = embed(fmap, actions)
    return PushforwardBatch(features=feats, policy_id=policy_id,
                            state_set_id=state_set_id)
