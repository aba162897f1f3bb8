"""Two-level agent: a master policy over K subpolicies, clipped-surrogate
updates, and a minimum-pairwise-distance diversity regularizer.

The regularizer estimates, for subpolicy k, the smallest smoothed transport
distance between its pushforward action law and any other subpolicy's, then
subtracts alpha times that distance from the subpolicy loss.  Potentials are
refit once per update step before the epoch loop; within epochs the gradient
is re-evaluated at the current parameters through the reparameterized (or
temperature-relaxed) samples with the potentials, the comparison states, the
draws, and the other policy all held fixed.  The master policy is always
updated without the regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import (
    ActionPairCache,
    CrnStream,
    StateSet,
    hard_onehot,
    relaxed_onehot,
    sample_action_pairs,
)
from .errors import ConfigError, ShapeError, StaleCacheError
from .nets import Adam, PolicyNet, ValueNet, log_softmax
from .ot import (
    DualPotentials,
    OtParams,
    RandomFeatureMap,
    embed,
    estimate_wd,
    fit_potentials,
    pair_costs,
    paired_sampler,
)
from .rngs import stream_key, substream


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

class HierAgent:
    """Master over K subpolicies with separate value nets and optimizers."""

    def __init__(self, obs_dim, action_space, K=2, alpha=0.5,
                 subpolicy_duration=10, hidden=(64, 64), master_hidden=(64, 64),
                 seed=0, lr=3e-3, value_lr=1e-2, master_lr=1e-2,
                 init_log_std=-0.5):
        if K < 1:
            raise ConfigError(f"K must be >= 1, got {K}")
        if alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {alpha}")
        if subpolicy_duration < 1:
            raise ConfigError(
                f"subpolicy_duration must be >= 1, got {subpolicy_duration}")
        kind = action_space[0]
        if kind == "discrete":
            head, action_dim = "categorical", int(action_space[1])
        elif kind == "box":
            head, action_dim = "gaussian", int(action_space[1])
        else:
            raise ConfigError(f"unknown action space {action_space!r}")

        self.obs_dim = int(obs_dim)
        self.action_space = action_space
        self.head = head
        self.action_dim = action_dim
        self.K = int(K)
        self.alpha = float(alpha)
        self.subpolicy_duration = int(subpolicy_duration)
        self.seed = seed
        self.update_counter = 0

        self.master = PolicyNet(obs_dim, K, hidden=master_hidden,
                                head="categorical", seed=stream_key(seed, "master"))
        self.master_value = ValueNet(obs_dim, hidden=master_hidden,
                                     seed=stream_key(seed, "master_value"))
        self.subs = [PolicyNet(obs_dim, action_dim, hidden=hidden, head=head,
                               seed=stream_key(seed, "sub", k),
                               init_log_std=init_log_std)
                     for k in range(K)]
        self.sub_values = [ValueNet(obs_dim, hidden=hidden,
                                    seed=stream_key(seed, "sub_value", k))
                           for k in range(K)]
        self._lrs = (lr, value_lr, master_lr)
        self.master_opt = Adam(self.master.n_params, lr=master_lr)
        self.master_value_opt = Adam(self.master_value.n_params, lr=value_lr)
        self.sub_opts = [Adam(s.n_params, lr=lr) for s in self.subs]
        self.sub_value_opts = [Adam(v.n_params, lr=value_lr) for v in self.sub_values]

    def reinit_master(self, seed_key):
        """Fresh master policy/value and optimizer state (warmup, transfer)."""
        lr, value_lr, master_lr = self._lrs
        self.master = PolicyNet(self.obs_dim, self.K,
                                hidden=self.master.hidden, head="categorical",
                                seed=stream_key(seed_key, "master"))
        self.master_value = ValueNet(self.obs_dim, hidden=self.master_value.hidden,
                                     seed=stream_key(seed_key, "master_value"))
        self.master_opt = Adam(self.master.n_params, lr=master_lr)
        self.master_value_opt = Adam(self.master_value.n_params, lr=value_lr)


# ---------------------------------------------------------------------------
# Advantage estimation
# ---------------------------------------------------------------------------

def gae(rewards, values, bootstrap_value, discount, lam):
    """Generalized advantage estimation over one contiguous segment.

    ``discount`` may be a scalar or a per-step array (the master operates at
    the decision timescale with per-decision discounts).  Returns
    (advantages, returns) with returns = advantages + values.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape or r.ndim != 1:
        raise ShapeError(f"rewards/values must be equal-length 1-D, got {r.shape} and {v.shape}")
    disc = np.full(len(r), float(discount)) if np.isscalar(discount) \
        else np.asarray(discount, dtype=float)
    if disc.shape != r.shape:
        raise ShapeError("per-step discounts must match the segment length")
    if np.any(disc < 0) or np.any(disc > 1):
        raise ConfigError("discounts must lie in [0, 1]")
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    adv = np.zeros(len(r))
    next_v = float(bootstrap_value)
    run = 0.0
    for t in reversed(range(len(r))):
        delta = r[t] + disc[t] * next_v - v[t]
        run = delta + disc[t] * lam * run
        adv[t] = run
        next_v = v[t]
    return adv, adv + v


# ---------------------------------------------------------------------------
# Rollout storage
# ---------------------------------------------------------------------------

@dataclass
class DecisionRecord:
    """One master decision: the state it saw, the subpolicy it chose, and
    the discounted reward accumulated over the tenure."""

    obs: np.ndarray
    k: int
    logp: float
    value: float
    length: int = 0
    reward: float = 0.0


@dataclass
class EpisodeRecord:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    next_obs: list = field(default_factory=list)
    subs: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(sum(self.rewards))


class RolloutBuffer:
    """Whole-episode experience for one update step."""

    def __init__(self):
        self.episodes: list[EpisodeRecord] = []

    @property
    def total_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)

    @property
    def mean_return(self) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([ep.ret for ep in self.episodes]))

    def states_for_sub(self, k: int) -> np.ndarray:
        rows = [o for ep in self.episodes
                for o, s in zip(ep.obs, ep.subs) if s == k]
        if not rows:
            return np.zeros((0, 0))
        return np.asarray(rows, dtype=float)

    def sub_batch(self, k: int, agent: HierAgent, discount: float, lam: float) -> dict:
        """Surrogate batch for subpolicy k: contiguous tenure runs get GAE
        with a value bootstrap when the run ends by master switch rather
        than episode end."""
        obs, actions, logps, advs, rets = [], [], [], [], []
        for ep in self.episodes:
            t = 0
            n = ep.length
            while t < n:
                if ep.subs[t] != k:
                    t += 1
                    continue
                start = t
                while t < n and ep.subs[t] == k:
                    t += 1
                r = np.asarray(ep.rewards[start:t], dtype=float)
                v = np.asarray(ep.values[start:t], dtype=float)
                if t == n:
                    bootstrap = 0.0  # episode boundary is terminal
                else:
                    nxt = np.asarray(ep.next_obs[t - 1], dtype=float)[None, :]
                    bootstrap = float(agent.sub_values[k].forward(nxt)[0][0])
                a, ret = gae(r, v, bootstrap, discount, lam)
                obs.extend(ep.obs[start:t])
                actions.extend(ep.actions[start:t])
                logps.extend(ep.logps[start:t])
                advs.extend(a)
                rets.extend(ret)
        if not obs:
            return {"n": 0}
        return {"n": len(obs),
                "obs": np.asarray(obs, dtype=float),
                "actions": np.asarray(actions),
                "old_logp": np.asarray(logps, dtype=float),
                "advantages": np.asarray(advs, dtype=float),
                "returns": np.asarray(rets, dtype=float)}

    def master_batch(self, discount: float, lam: float) -> dict:
        """Decision-level batch: per-decision discount is discount**length."""
        obs, actions, logps, advs, rets = [], [], [], [], []
        for ep in self.episodes:
            if not ep.decisions:
                continue
            r = np.array([d.reward for d in ep.decisions])
            v = np.array([d.value for d in ep.decisions])
            disc = np.array([discount ** d.length for d in ep.decisions])
            a, ret = gae(r, v, 0.0, disc, lam)
            obs.extend(d.obs for d in ep.decisions)
            actions.extend(d.k for d in ep.decisions)
            logps.extend(d.logp for d in ep.decisions)
            advs.extend(a)
            rets.extend(ret)
        if not obs:
            return {"n": 0}
        return {"n": len(obs),
                "obs": np.asarray(obs, dtype=float),
                "actions": np.asarray(actions, dtype=np.int64),
                "old_logp": np.asarray(logps, dtype=float),
                "advantages": np.asarray(advs, dtype=float),
                "returns": np.asarray(rets, dtype=float)}


# ---------------------------------------------------------------------------
# Minimum pairwise distance and its gradient
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WdMinCache:
    """Frozen ingredients for re-evaluating the regularizer gradient of one
    subpolicy within an update step: fitted potentials, the state pool and
    k-side draws, the other policy's embedded actions (constant), and the
    evaluation-pair indices.  Stamped against the agent's update counter."""

    k: int
    j: int
    potentials: DualPotentials
    fmap: RandomFeatureMap
    pair_cache: ActionPairCache
    y_feats_sel: np.ndarray
    eval_idx: np.ndarray
    params: OtParams
    value: float
    stamp: int


def wd_min(agent: HierAgent, k: int, state_set: StateSet,
           fmap: RandomFeatureMap, ot_params: OtParams, batch_per_state: int,
           seed: int, temperature: float = 0.5):
    """Smallest estimated transport distance from subpolicy k to any other.

    Distances to each j != k are evaluated in ascending j with per-pair
    substreams; ties break toward the lowest index.  Returns
    (value, argmin_j, cache) with the cache built for the argmin pair.
    """
    if agent.K < 2:
        raise ConfigError("need at least two subpolicies to compare")
    if not 0 <= k < agent.K:
        raise ConfigError(f"subpolicy index {k} out of range for K={agent.K}")
    vals, builds = [], []
    for j in range(agent.K):
        if j == k:
            continue
        crn = CrnStream(stream_key(seed, "crn", k, j))
        a_k, a_j, pcache = sample_action_pairs(
            agent.subs[k], agent.subs[j], state_set, batch_per_state, crn,
            temperature=temperature)
        pot = fit_potentials(paired_sampler(a_k, a_j), fmap, fmap, ot_params,
                             seed=stream_key(seed, "fit", k, j))
        idx = substream(seed, "eval", k, j).integers(
            0, len(a_k), ot_params.eval_samples)
        phi_x = embed(fmap, a_k[idx])
        phi_y = embed(fmap, a_j[idx])
        vals.append(estimate_wd(pot, (phi_x, phi_y), ot_params))
        builds.append((j, pot, pcache, idx, phi_y))
    pos = int(np.argmin(np.asarray(vals)))  # first minimum: lowest j wins ties
    j, pot, pcache, idx, phi_y = builds[pos]
    cache = WdMinCache(k=k, j=j, potentials=pot, fmap=fmap, pair_cache=pcache,
                       y_feats_sel=phi_y, eval_idx=idx, params=ot_params,
                       value=float(vals[pos]), stamp=agent.update_counter)
    return float(vals[pos]), j, cache


def _wd_value_and_grad(policy: PolicyNet, cache: WdMinCache,
                       hard_forward: bool = True):
    """Estimate and exact gradient of the cached dual objective w.r.t. the
    policy's parameters, holding potentials, draws, states and the other
    side fixed.

    Gaussian heads differentiate the reparameterized samples exactly.
    Categorical heads evaluate on hard one-hot actions and route the
    gradient through the temperature-relaxed one-hot of the same perturbed
    log-probabilities (straight-through); ``hard_forward=False`` evaluates
    the relaxed actions directly, making the analytic gradient exact for
    finite-difference validation.
    """
    pc = cache.pair_cache
    params = cache.params
    fmap = cache.fmap
    states = pc.state_set.states
    T, B = states.shape[0], pc.batch_per_state
    out, net_cache = policy.forward(states)

    if pc.kind == "gaussian":
        std = np.exp(out.log_std)
        x = out.mean[:, None, :] + std * pc.draws
        soft = None
    else:
        logp = log_softmax(out.logits)
        hard = hard_onehot(logp, pc.draws)
        soft = relaxed_onehot(logp, pc.draws, pc.temperature)
        x = hard if hard_forward else soft
    X = x.reshape(T * B, -1)

    idx = cache.eval_idx
    phi_x = embed(fmap, X[idx])
    phi_y = cache.y_feats_sel
    p_mu, p_nu = cache.potentials.p_mu, cache.potentials.p_nu
    C = len(idx)

    s = phi_x @ p_mu - phi_y @ p_nu
    z = s - pair_costs(phi_x, phi_y)
    arg = z / params.smoothing
    inside = np.abs(arg) <= params.exp_clamp
    F = np.exp(np.clip(arg, -params.exp_clamp, params.exp_clamp))
    if params.penalty_form == "scaled":
        value = float((s - params.smoothing * F).mean())
        dpen_dz = F
    else:
        value = float((s - F / params.smoothing).mean())
        dpen_dz = F / params.smoothing ** 2
    dpen_dz = dpen_dz * inside  # clipped exponent is flat

    # d value / d phi_x, then through the cosine features to raw actions
    g_phi = ((1.0 - dpen_dz)[:, None] * p_mu[None, :]
             + 2.0 * dpen_dz[:, None] * (phi_x - phi_y)) / C
    U = (X[idx] / fmap.bandwidth) @ fmap.G + fmap.b
    dX_sel = -((np.sin(U) * g_phi) @ fmap.G.T) / (fmap.bandwidth * np.sqrt(fmap.m))
    dX = np.zeros((T * B, X.shape[1]))
    np.add.at(dX, idx, dX_sel)
    dX = dX.reshape(T, B, -1)

    if pc.kind == "gaussian":
        d_mean = dX.sum(axis=1)
        d_log_std = (dX * (std * pc.draws)).sum(axis=(0, 1))
        grad = policy.backward(net_cache, d_mean, d_log_std)
    else:
        ru = soft * dX
        w = (ru - soft * ru.sum(axis=2, keepdims=True)) / pc.temperature
        w = w.sum(axis=1)
        p = np.exp(logp)
        d_logits = w - p * w.sum(axis=1, keepdims=True)
        grad = policy.backward(net_cache, d_logits)
    return value, grad


def diversity_gradient(agent: HierAgent, cache: WdMinCache) -> np.ndarray:
    """Parameter gradient of the loss term -alpha * (cached pair distance)
    w.r.t. subpolicy k, evaluated at the current parameters.

    The potentials, comparison states, draws and the other policy are the
    cache's frozen copies; only pi_k's sampled actions carry gradient.
    Raises StaleCacheError when the agent has moved to a new update step
    since the cache was built.  alpha = 0 yields an exact zero vector.
    """
    if cache.stamp != agent.update_counter:
        raise StaleCacheError(
            f"cache built at update {cache.stamp}, agent is at "
            f"{agent.update_counter}; refit before reuse")
    policy = agent.subs[cache.k]
    if agent.alpha == 0.0:
        return np.zeros(policy.n_params)
    _, grad = _wd_value_and_grad(policy, cache)
    return -agent.alpha * grad


# ---------------------------------------------------------------------------
# Jensen-Shannon diversity baseline (categorical heads)
# ---------------------------------------------------------------------------

def js_min(agent: HierAgent, k: int, state_set: StateSet):
    """Smallest mean JS divergence from subpolicy k's action law to any
    other's over the state pool, with its loss gradient (-alpha * term).

    Categorical heads only; the analytic gradient flows through pi_k's
    probabilities while the other policy is constant.
    """
    if agent.head != "categorical":
        raise ConfigError("JS diversity baseline needs categorical heads")
    if agent.K < 2:
        raise ConfigError("need at least two subpolicies to compare")
    states = state_set.states
    out_k, cache_k = agent.subs[k].forward(states)
    p = np.exp(log_softmax(out_k.logits))
    best_val, best_grad_logits = None, None
    for j in range(agent.K):
        if j == k:
            continue
        out_j, _ = agent.subs[j].forward(states)
        q = np.exp(log_softmax(out_j.logits))
        mix = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            term_p = np.where(p > 0, p * np.log(p / mix), 0.0)
            term_q = np.where(q > 0, q * np.log(q / mix), 0.0)
        js_per_state = 0.5 * term_p.sum(axis=1) + 0.5 * term_q.sum(axis=1)
        val = float(js_per_state.mean())
        if best_val is None or val < best_val:
            # dJS/dp_a = 0.5*log(p_a/m_a); chain through the softmax rows
            w = np.where(p > 0, 0.5 * np.log(np.maximum(p, 1e-300) / mix), 0.0)
            w /= states.shape[0]
            d_logits = p * (w - (p * w).sum(axis=1, keepdims=True))
            best_val, best_grad_logits = val, d_logits
    grad = agent.subs[k].backward(cache_k, best_grad_logits)
    return best_val, -agent.alpha * grad


# ---------------------------------------------------------------------------
# Clipped-surrogate updates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PpoParams:
    """Clipped-surrogate settings shared by master and subpolicy updates."""

    clip_ratio: float = 0.2
    epochs: int = 4
    entropy_coef: float = 0.01
    adv_norm: bool = True

    def __post_init__(self):
        if not 0 < self.clip_ratio < 1:
            raise ConfigError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.entropy_coef < 0:
            raise ConfigError(f"entropy_coef must be >= 0, got {self.entropy_coef}")


def _policy_epochs(policy: PolicyNet, opt: Adam, batch: dict,
                   params: PpoParams, extra_grad_fn=None) -> dict:
    """Run the clipped-surrogate epoch loop; ``extra_grad_fn()`` may add a
    regularizer gradient (returning (term_value, grad)) each epoch."""
    n = batch["n"]
    diag = {"policy_loss": float("nan"), "entropy": float("nan"),
            "approx_kl": float("nan"), "reg_value": float("nan"),
            "applied": 0}
    adv = None
    if n > 0:
        adv = batch["advantages"]
        if params.adv_norm and n > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    for _ in range(params.epochs):
        grad = np.zeros(policy.n_params)
        if n > 0:
            out, cache = policy.forward(batch["obs"])
            logp = policy.log_prob(out, batch["actions"])
            ratio = np.exp(logp - batch["old_logp"])
            l_raw = ratio * adv
            l_clip = np.clip(ratio, 1 - params.clip_ratio, 1 + params.clip_ratio) * adv
            use_raw = l_raw <= l_clip
            w = np.where(use_raw, ratio * adv, 0.0) * (-1.0 / n)
            d_net, d_ls = policy.log_prob_head_grads(out, batch["actions"], w)
            e_net, e_ls = policy.entropy_head_grads(
                out, np.full(n, -params.entropy_coef / n))
            d_net = d_net + e_net
            if d_ls is not None:
                d_ls = d_ls + e_ls
            grad = policy.backward(cache, d_net, d_ls)
            diag["policy_loss"] = float(-np.minimum(l_raw, l_clip).mean())
            diag["entropy"] = float(policy.entropy(out).mean())
            diag["approx_kl"] = float((batch["old_logp"] - logp).mean())
        if extra_grad_fn is not None:
            reg_value, reg_grad = extra_grad_fn()
            grad = grad + reg_grad
            diag["reg_value"] = reg_value
        diag["applied"] += int(opt.step(policy.stack.flat, grad))
    return diag


def _value_epochs(valnet: ValueNet, opt: Adam, batch: dict, epochs: int) -> float:
    if batch["n"] == 0:
        return float("nan")
    loss = float("nan")
    for _ in range(epochs):
        v, cache = valnet.forward(batch["obs"])
        err = v - batch["returns"]
        opt.step(valnet.stack.flat, valnet.backward(cache, err / batch["n"]))
        loss = float(0.5 * (err ** 2).mean())
    return loss


def ppo_update_subpolicy(agent: HierAgent, k: int, batch: dict,
                         params: PpoParams, wd_cache: WdMinCache = None,
                         js_states: StateSet = None) -> dict:
    """Update subpolicy k and its value net on its own steps.

    With a diversity cache (and alpha > 0) the regularizer gradient is
    re-evaluated and added every epoch; an empty batch with a cache applies
    the regularizer term alone (the surrogate is skipped, not faked).
    """
    extra = None
    if agent.alpha > 0 and wd_cache is not None:
        if wd_cache.k != k:
            raise ConfigError(f"cache is for subpolicy {wd_cache.k}, not {k}")

        def extra():
            value, grad = _wd_value_and_grad(agent.subs[k], wd_cache)
            return value, -agent.alpha * grad
    elif agent.alpha > 0 and js_states is not None:
        def extra():
            value, grad = js_min(agent, k, js_states)
            return value, grad

    diag = _policy_epochs(agent.subs[k], agent.sub_opts[k], batch, params,
                          extra_grad_fn=extra)
    diag["value_loss"] = _value_epochs(agent.sub_values[k],
                                       agent.sub_value_opts[k], batch,
                                       params.epochs)
    diag["steps"] = batch["n"]
    return diag


def ppo_update_master(agent: HierAgent, batch: dict, params: PpoParams) -> dict:
    """Update the master on decision-level experience; never regularized."""
    diag = _policy_epochs(agent.master, agent.master_opt, batch, params)
    diag["value_loss"] = _value_epochs(agent.master_value,
                                       agent.master_value_opt, batch,
                                       params.epochs)
    diag["steps"] = batch["n"]
    return diag
