"""Training orchestration: rollout collection with a fixed master decision
cadence, per-update subpolicy/master updates, diversity telemetry, metrics
persistence, checkpoint/resume, the transfer protocol, the WD-vs-JS table,
the estimator selfcheck battery, the alpha sweep driver, and plotting.

Determinism contract: every random draw comes from a substream keyed by
(seed, purpose, indices), never from a shared sequential generator, so a
given (config, seed) reproduces metrics bitwise and a resumed run continues
exactly where the checkpoint left off.  Diversity telemetry draws on its own
keys, which keeps alpha = 0 runs bitwise identical to runs with the
regularizer path disabled outright.
"""

from __future__ import annotations

import csv
import json
import os
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import TrainConfig
from .embedding import CrnStream, collect_rollout_states, sample_action_pairs
from .envs import make_env
from .errors import ConfigError, DomainError, TrainingAborted
from .hierarchy import (
    DecisionRecord,
    EpisodeRecord,
    HierAgent,
    PpoParams,
    RolloutBuffer,
    ppo_update_master,
    ppo_update_subpolicy,
    wd_min,
)
from .nets import load_arrays, save_arrays
from .ot import (
    DiscreteMeasure,
    OtParams,
    embed,
    estimate_wd,
    exact_wd_1d,
    exact_wd_discrete,
    fit_potentials,
    js_divergence_categorical,
    make_feature_map,
    paired_sampler,
)
from .rngs import stream_key, substream


@dataclass
class RunArtifacts:
    """Where a run put its outputs, plus end-of-run summary numbers."""

    run_id: str
    out_dir: str
    metrics_path: str
    manifest_path: str
    checkpoint_dir: str
    last_checkpoint: str
    updates: int
    timesteps: int
    final_return: float


# ---------------------------------------------------------------------------
# Metrics persistence
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    """Append-only CSV with a fixed column order and strictly increasing
    timesteps; floats are written with full round-trip precision."""

    def __init__(self, path: str, columns: list, resume: bool = False):
        self.path = path
        self.columns = list(columns)
        self._last_timestep = -1
        if resume and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                rows = fh.read().splitlines()
            if rows and rows[0] != ",".join(self.columns):
                raise ConfigError(f"{path} has a different column schema")
            if len(rows) > 1:
                self._last_timestep = int(rows[-1].split(",")[self.columns.index("timestep")])
            self._fh = open(path, "a", encoding="utf-8")
        else:
            self._fh = open(path, "w", encoding="utf-8")
            self._fh.write(",".join(self.columns) + "\n")
            self._fh.flush()

    def write(self, row: dict):
        ts = int(row["timestep"])
        if ts <= self._last_timestep:
            raise DomainError(
                f"timestep {ts} does not advance past {self._last_timestep}")
        self._last_timestep = ts
        self._fh.write(",".join(_fmt(row[c]) for c in self.columns) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def metric_columns(K: int) -> list:
    cols = ["run_id", "update", "timestep", "episodes", "mean_return"]
    cols += [f"wd_{k}_{j}" for k in range(K) for j in range(k + 1, K)]
    cols += [f"wd_min_{k}" for k in range(K)]
    cols += ["master_loss", "master_value_loss", "master_entropy"]
    for k in range(K):
        cols += [f"sub{k}_loss", f"sub{k}_value_loss", f"sub{k}_entropy",
                 f"sub{k}_reg", f"sub{k}_steps"]
    cols += ["clamp_events", "pool_size"]
    return cols


def read_metrics(path: str) -> dict:
    """CSV -> column dict; numeric columns become float arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    out = {}
    if not rows:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        return {c: np.array([]) for c in header}
    for col in rows[0].keys():
        vals = [r[col] for r in rows]
        if col == "run_id":
            out[col] = np.array(vals)
        else:
            out[col] = np.array([float(v) for v in vals])
    return out


def metrics_payload(path: str) -> bytes:
    """File bytes with the run_id column removed, for cross-run comparison
    of runs whose configs differ only in fields that cannot affect the
    training path (the run_id hash would otherwise differ)."""
    lines = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        drop = header.index("run_id")
        keep = [i for i in range(len(header)) if i != drop]
        lines.append(",".join(header[i] for i in keep))
        for line in fh.read().splitlines():
            parts = line.split(",")
            lines.append(",".join(parts[i] for i in keep))
    return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------------------
# Agent construction and checkpointing
# ---------------------------------------------------------------------------

def build_agent(cfg: TrainConfig, env) -> HierAgent:
    return HierAgent(obs_dim=env.obs_dim, action_space=env.action_space,
                     K=cfg.K, alpha=cfg.alpha,
                     subpolicy_duration=cfg.subpolicy_duration,
                     hidden=cfg.hidden, master_hidden=cfg.master_hidden,
                     seed=cfg.seed, lr=cfg.lr, value_lr=cfg.value_lr,
                     master_lr=cfg.master_lr, init_log_std=cfg.init_log_std)


def _agent_parts(agent: HierAgent) -> dict:
    parts = {"master": (agent.master, agent.master_opt),
             "master_value": (agent.master_value, agent.master_value_opt)}
    for k in range(agent.K):
        parts[f"sub{k}"] = (agent.subs[k], agent.sub_opts[k])
        parts[f"sub{k}_value"] = (agent.sub_values[k], agent.sub_value_opts[k])
    return parts


def _resume_hash(cfg: TrainConfig) -> str:
    """Config hash over the fields that shape the training path; budget-only
    fields are excluded so a run may be resumed with an extended budget."""
    import hashlib
    d = cfg.to_dict()
    for key in ("total_timesteps", "checkpoint_every"):
        d.pop(key, None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def save_checkpoint(path: str, agent: HierAgent, cfg: TrainConfig,
                    counters: dict, env, reservoirs=None) -> str:
    """Full training state: parameters, optimizer moments, loop and env
    counters, and the state reservoirs feeding the diversity pool (stored so
    a resumed run rebuilds the exact pools an uninterrupted run would see)."""
    header = {
        "kind": "hier_ckpt",
        "version": __version__,
        "config_hash": cfg.hash(),
        "resume_hash": _resume_hash(cfg),
        "K": agent.K,
        "head": agent.head,
        "obs_dim": agent.obs_dim,
        "action_dim": agent.action_dim,
        "counters": {k: int(v) for k, v in counters.items()},
        "update_counter": agent.update_counter,
        "env_tasks": int(getattr(env, "_tasks", 0)),
        "env_task_index": getattr(env, "_task_index", None),
        "adam_t": {},
    }
    arrays = {}
    for name, (net, opt) in _agent_parts(agent).items():
        arrays[name] = net.stack.flat
        st = opt.state_arrays()
        arrays[f"{name}_adam_m"] = st["adam_m"]
        arrays[f"{name}_adam_v"] = st["adam_v"]
        header["adam_t"][name] = opt.t
    if reservoirs is not None:
        for k, res in enumerate(reservoirs):
            rows = np.asarray(res, dtype=float) if len(res) else \
                np.zeros((0, agent.obs_dim))
            arrays[f"reservoir{k}"] = rows
    save_arrays(path, header, arrays)
    return path


def load_checkpoint(path: str, cfg: TrainConfig, env, reservoirs=None):
    """Rebuild (agent, counters) from a checkpoint; the env's episode/task
    counters are restored so its keyed streams continue exactly.  Passing
    reservoir deques refills them from the stored pools."""
    header, arrays = load_arrays(path)
    if header.get("kind") != "hier_ckpt":
        raise ConfigError(f"{path} is not an agent checkpoint")
    if header["K"] != cfg.K:
        raise ConfigError(
            f"checkpoint has K={header['K']}, config wants K={cfg.K}")
    agent = build_agent(cfg, env)
    if header["obs_dim"] != agent.obs_dim or header["action_dim"] != agent.action_dim:
        raise ConfigError("checkpoint dimensions do not match the configured env")
    for name, (net, opt) in _agent_parts(agent).items():
        net.set_flat(arrays[name])
        opt.load_state_arrays({"adam_m": arrays[f"{name}_adam_m"],
                               "adam_v": arrays[f"{name}_adam_v"],
                               "adam_t": np.array([float(header["adam_t"][name])])})
    counters = dict(header["counters"])
    agent.update_counter = int(header["update_counter"])
    if hasattr(env, "_episodes"):
        env._episodes = counters.get("episodes", 0)
    if hasattr(env, "_tasks"):
        env._tasks = int(header.get("env_tasks", 0))
        env._task_index = header.get("env_task_index", None)
    if reservoirs is not None:
        for k in range(agent.K):
            reservoirs[k].clear()
            for row in arrays.get(f"reservoir{k}", np.zeros((0, agent.obs_dim))):
                reservoirs[k].append(row.copy())
    return agent, counters, header


# ---------------------------------------------------------------------------
# Experience collection
# ---------------------------------------------------------------------------

def collect_experience(env, agent: HierAgent, cfg: TrainConfig,
                       counters: dict, target_steps: int,
                       task_period: int) -> RolloutBuffer:
    """Whole episodes until at least target_steps are gathered.  The master
    picks a subpolicy on episode start and every subpolicy_duration steps;
    its decision reward is the within-segment discounted sum."""
    buf = RolloutBuffer()
    discrete = agent.head == "categorical"
    while buf.total_steps < target_steps:
        ep_idx = counters["episodes"]
        if (task_period > 0 and hasattr(env, "new_task")
                and ep_idx % task_period == 0):
            env.new_task()
            if cfg.master_reset_on_task:
                agent.reinit_master(stream_key(cfg.seed, "master_reset", ep_idx))
        obs = env.reset()
        counters["episodes"] += 1
        ep = EpisodeRecord()
        decision = None
        k = 0
        t = 0
        done = False
        while not done:
            if t % agent.subpolicy_duration == 0:
                m_out, _ = agent.master.forward(obs[None])
                rng_m = substream(cfg.seed, "act_master", ep_idx, t)
                k = int(agent.master.sample(m_out, rng_m)[0])
                m_logp = float(agent.master.log_prob(m_out, np.array([k]))[0])
                m_val = float(agent.master_value.forward(obs[None])[0][0])
                decision = DecisionRecord(obs=obs.copy(), k=k, logp=m_logp,
                                          value=m_val)
                ep.decisions.append(decision)
            pol = agent.subs[k]
            out, _ = pol.forward(obs[None])
            rng_a = substream(cfg.seed, "act_sub", ep_idx, t)
            action = pol.sample(out, rng_a)[0]
            if discrete:
                action = int(action)
                logp = float(pol.log_prob(out, np.array([action]))[0])
            else:
                logp = float(pol.log_prob(out, action[None])[0])
            val = float(agent.sub_values[k].forward(obs[None])[0][0])
            step = env.step(action)
            ep.obs.append(obs.copy())
            ep.actions.append(action)
            ep.logps.append(logp)
            ep.values.append(val)
            ep.rewards.append(step.reward)
            ep.next_obs.append(step.observation.copy())
            ep.subs.append(k)
            decision.reward += (cfg.discount ** decision.length) * step.reward
            decision.length += 1
            obs = step.observation
            t += 1
            done = step.done
        buf.episodes.append(ep)
        counters["timesteps"] += ep.length
    return buf


# ---------------------------------------------------------------------------
# Diversity telemetry
# ---------------------------------------------------------------------------

def pairwise_wd(agent: HierAgent, pool, fmap, cfg: TrainConfig,
                update_idx: int, tag: str = "telemetry") -> dict:
    """Estimated transport distance for every subpolicy pair at the shared
    state pool.  Runs on its own substreams so it is pure observation."""
    out = {}
    if pool is None:
        return out
    for k in range(agent.K):
        for j in range(k + 1, agent.K):
            crn = CrnStream(stream_key(cfg.seed, tag, "crn", update_idx, k, j))
            a_k, a_j, _ = sample_action_pairs(
                agent.subs[k], agent.subs[j], pool, cfg.batch_per_state, crn,
                temperature=cfg.relax_temperature)
            pot = fit_potentials(
                paired_sampler(a_k, a_j), fmap, fmap, cfg.ot,
                seed=stream_key(cfg.seed, tag, "fit", update_idx, k, j))
            idx = substream(cfg.seed, tag, "eval", update_idx, k, j).integers(
                0, len(a_k), cfg.ot.eval_samples)
            est = estimate_wd(pot, (embed(fmap, a_k[idx]), embed(fmap, a_j[idx])),
                              cfg.ot)
            out[(k, j)] = (est, pot.clamp_events)
    return out


# ---------------------------------------------------------------------------
# One optimization step shared by train and transfer
# ---------------------------------------------------------------------------

def _build_pool(reservoirs, cfg: TrainConfig, update_idx: int):
    sources, labels = [], []
    for k, res in enumerate(reservoirs):
        if len(res) > 0:
            sources.append(np.asarray(res, dtype=float))
            labels.append(f"sub{k}")
    if not sources or sum(len(s) for s in sources) < cfg.rollout_states:
        return None
    return collect_rollout_states(sources, cfg.rollout_states,
                                  seed=stream_key(cfg.seed, "pool", update_idx),
                                  labels=labels)


def _update_once(agent: HierAgent, buf: RolloutBuffer, cfg: TrainConfig,
                 fmap, reservoirs, counters: dict,
                 update_subs: bool = True) -> dict:
    """Advance the agent one update step and return a metrics row (without
    run_id).  Order: refresh state reservoirs, telemetry, master update,
    then each subpolicy in ascending index with its freshly fit regularizer."""
    for ep in buf.episodes:
        for o, s in zip(ep.obs, ep.subs):
            reservoirs[s].append(np.asarray(o, dtype=float))

    counters["update"] += 1
    update_idx = counters["update"]
    agent.update_counter = update_idx

    pool = _build_pool(reservoirs, cfg, update_idx)
    telemetry = pairwise_wd(agent, pool, fmap, cfg, update_idx)
    clamp_events = sum(c for _, c in telemetry.values())

    row = {"update": update_idx, "timestep": counters["timesteps"],
           "episodes": counters["episodes"], "mean_return": buf.mean_return,
           "pool_size": 0 if pool is None else pool.n}
    for (k, j), (est, _) in telemetry.items():
        row[f"wd_{k}_{j}"] = est
    for k in range(agent.K):
        mins = [est for (a, b), (est, _) in telemetry.items() if k in (a, b)]
        row[f"wd_min_{k}"] = min(mins) if mins else float("nan")

    master_params = PpoParams(clip_ratio=cfg.clip_ratio, epochs=cfg.epochs,
                              entropy_coef=cfg.master_entropy_coef)
    mdiag = ppo_update_master(agent, buf.master_batch(cfg.discount, cfg.gae_lambda),
                              master_params)
    row["master_loss"] = mdiag["policy_loss"]
    row["master_value_loss"] = mdiag["value_loss"]
    row["master_entropy"] = mdiag["entropy"]

    sub_params = PpoParams(clip_ratio=cfg.clip_ratio, epochs=cfg.epochs,
                           entropy_coef=cfg.entropy_coef)
    for k in range(agent.K):
        if not update_subs:
            for name in ("loss", "value_loss", "entropy", "reg"):
                row[f"sub{k}_{name}"] = float("nan")
            row[f"sub{k}_steps"] = 0
            continue
        batch = buf.sub_batch(k, agent, cfg.discount, cfg.gae_lambda)
        cache = None
        js_states = None
        if cfg.alpha > 0 and pool is not None and agent.K >= 2:
            if cfg.regularizer == "wd":
                _, _, cache = wd_min(agent, k, pool, fmap, cfg.ot,
                                     cfg.batch_per_state,
                                     seed=stream_key(cfg.seed, "reg", update_idx),
                                     temperature=cfg.relax_temperature)
                clamp_events += cache.potentials.clamp_events
            elif cfg.regularizer == "js":
                js_states = pool
        diag = ppo_update_subpolicy(agent, k, batch, sub_params,
                                    wd_cache=cache, js_states=js_states)
        row[f"sub{k}_loss"] = diag["policy_loss"]
        row[f"sub{k}_value_loss"] = diag["value_loss"]
        row[f"sub{k}_entropy"] = diag["entropy"]
        row[f"sub{k}_reg"] = diag["reg_value"]
        row[f"sub{k}_steps"] = diag["steps"]

    row["clamp_events"] = int(clamp_events)
    return row


def _check_finite(agent: HierAgent, update_idx: int, ckpt_dir: str,
                  cfg: TrainConfig, counters: dict, env, reservoirs):
    for name, (net, _) in _agent_parts(agent).items():
        if not np.all(np.isfinite(net.stack.flat)):
            path = os.path.join(ckpt_dir, f"abort_update{update_idx}.ckpt")
            save_checkpoint(path, agent, cfg, counters, env, reservoirs)
            raise TrainingAborted(
                f"non-finite parameters in {name} at update {update_idx}; "
                f"state saved to {path}", checkpoint=path)


# ---------------------------------------------------------------------------
# train / transfer_eval
# ---------------------------------------------------------------------------

def _write_manifest(path: str, cfg: TrainConfig, extra: dict = None):
    manifest = {"run_id": cfg.hash(), "resume_hash": _resume_hash(cfg),
                "seed": cfg.seed, "version": __version__,
                "numpy": np.__version__,
                "config": cfg.to_dict()}
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def train(cfg: TrainConfig, out_dir: str, resume_from: str = None) -> RunArtifacts:
    """Run the two-level training loop to the configured timestep budget.

    Artifacts: metrics.csv (one row per update), manifest.json, and
    checkpoints every checkpoint_every updates plus initial and final.
    Resuming from a checkpoint continues the exact keyed-stream schedule, so
    the subsequent rows match an uninterrupted run bitwise.
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    env = make_env(cfg.env, seed=cfg.seed, **cfg.env_geometry)
    run_id = cfg.hash()

    reservoirs = [deque(maxlen=cfg.state_pool_window) for _ in range(cfg.K)]
    if resume_from is not None:
        agent, counters, header = load_checkpoint(resume_from, cfg, env, reservoirs)
        if header["resume_hash"] != _resume_hash(cfg):
            raise ConfigError(
                "checkpoint was produced under a different training "
                "configuration; only budget fields may change on resume")
    else:
        agent = build_agent(cfg, env)
        counters = {"update": 0, "timesteps": 0, "episodes": 0}

    fmap = make_feature_map(agent.action_dim, cfg.feature_count, cfg.bandwidth,
                            seed=stream_key(cfg.seed, "bem"))

    metrics_path = os.path.join(out_dir, "metrics.csv")
    manifest_path = os.path.join(out_dir, "manifest.json")
    _write_manifest(manifest_path, cfg, {"mode": "train"})
    writer = MetricsWriter(metrics_path, metric_columns(agent.K),
                           resume=resume_from is not None)
    last_ckpt = os.path.join(ckpt_dir, f"update{counters['update']}.ckpt")
    save_checkpoint(last_ckpt, agent, cfg, counters, env, reservoirs)

    final_return = float("nan")
    try:
        while counters["timesteps"] < cfg.total_timesteps:
            remaining = cfg.total_timesteps - counters["timesteps"]
            target = min(cfg.steps_per_update, remaining)
            buf = collect_experience(env, agent, cfg, counters, target,
                                     cfg.task_period_episodes)
            row = _update_once(agent, buf, cfg, fmap, reservoirs, counters)
            row["run_id"] = run_id
            writer.write(row)
            final_return = row["mean_return"]
            _check_finite(agent, counters["update"], ckpt_dir, cfg, counters,
                          env, reservoirs)
            if cfg.checkpoint_every > 0 and counters["update"] % cfg.checkpoint_every == 0:
                last_ckpt = os.path.join(ckpt_dir, f"update{counters['update']}.ckpt")
                save_checkpoint(last_ckpt, agent, cfg, counters, env, reservoirs)
        last_ckpt = os.path.join(ckpt_dir, f"update{counters['update']}.ckpt")
        save_checkpoint(last_ckpt, agent, cfg, counters, env, reservoirs)
    finally:
        writer.close()
    return RunArtifacts(run_id=run_id, out_dir=out_dir,
                        metrics_path=metrics_path, manifest_path=manifest_path,
                        checkpoint_dir=ckpt_dir, last_checkpoint=last_ckpt,
                        updates=counters["update"],
                        timesteps=counters["timesteps"],
                        final_return=final_return)


def transfer_eval(checkpoint: str, cfg: TrainConfig, out_dir: str,
                  resample_task: bool = True) -> RunArtifacts:
    """Freeze the checkpointed subpolicies, reinitialize the master, and
    adapt on a (by default) freshly sampled task, recording the adaptation
    curve.  Set freeze_subpolicies=False in the config to fine-tune
    everything instead."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    env = make_env(cfg.env, seed=stream_key(cfg.seed, "transfer_env"),
                   **cfg.env_geometry)
    agent, _, _ = load_checkpoint(checkpoint, cfg, env)
    # adaptation runs on a fresh episode/task schedule of its own
    env._episodes = 0
    if hasattr(env, "_tasks"):
        env._tasks = 0
        env._task_index = None
    if resample_task and hasattr(env, "new_task"):
        env.new_task()
    if cfg.fine_tune_master:
        agent.reinit_master(stream_key(cfg.seed, "transfer_master"))
    frozen = [s.get_flat() for s in agent.subs] if cfg.freeze_subpolicies else None

    run_id = cfg.hash()
    fmap = make_feature_map(agent.action_dim, cfg.feature_count, cfg.bandwidth,
                            seed=stream_key(cfg.seed, "bem"))
    reservoirs = [deque(maxlen=cfg.state_pool_window) for _ in range(agent.K)]
    counters = {"update": 0, "timesteps": 0, "episodes": 0}
    agent.update_counter = 0
    metrics_path = os.path.join(out_dir, "metrics.csv")
    manifest_path = os.path.join(out_dir, "manifest.json")
    _write_manifest(manifest_path, cfg,
                    {"mode": "transfer", "source_checkpoint": checkpoint,
                     "resample_task": resample_task})
    writer = MetricsWriter(metrics_path, metric_columns(agent.K))
    final_return = float("nan")
    try:
        for _ in range(cfg.transfer_updates):
            buf = collect_experience(env, agent, cfg, counters,
                                     cfg.transfer_steps_per_update,
                                     task_period=0)
            row = _update_once(agent, buf, cfg, fmap, reservoirs, counters,
                               update_subs=not cfg.freeze_subpolicies)
            row["run_id"] = run_id
            writer.write(row)
            final_return = row["mean_return"]
            _check_finite(agent, counters["update"], ckpt_dir, cfg, counters,
                          env, reservoirs)
    finally:
        writer.close()
    if frozen is not None:
        for k, before in enumerate(frozen):
            if not np.array_equal(before, agent.subs[k].get_flat()):
                raise TrainingAborted(f"frozen subpolicy {k} drifted during transfer")
    last_ckpt = os.path.join(ckpt_dir, "adapted.ckpt")
    save_checkpoint(last_ckpt, agent, cfg, counters, env, reservoirs)
    return RunArtifacts(run_id=run_id, out_dir=out_dir,
                        metrics_path=metrics_path, manifest_path=manifest_path,
                        checkpoint_dir=ckpt_dir, last_checkpoint=last_ckpt,
                        updates=counters["update"],
                        timesteps=counters["timesteps"],
                        final_return=final_return)


# ---------------------------------------------------------------------------
# Distance-vs-divergence table
# ---------------------------------------------------------------------------

def wd_js_table(offsets, out_csv: str = None) -> list:
    """For point masses P at 0 and Q at each offset: the exact transport
    distance (absolute-difference cost) grows linearly while the JS
    divergence jumps to ln 2 the moment the supports separate.

    Both columns come from oracles (1-D sorted coupling; categorical JS),
    not from closed-form shortcuts.
    """
    rows = []
    for offset in offsets:
        off = float(offset)
        if off < 0:
            raise DomainError(f"offsets must be >= 0, got {off}")
        wd = exact_wd_1d(np.array([0.0]), np.array([off]), power=1)
        if off == 0.0:
            js = js_divergence_categorical([1.0], [1.0])
        else:
            js = js_divergence_categorical([1.0, 0.0], [0.0, 1.0])
        rows.append({"offset": off, "wd": wd, "js": js})
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("offset,wd,js\n")
            for r in rows:
                fh.write(f"{_fmt(r['offset'])},{_fmt(r['wd'])},{_fmt(r['js'])}\n")
    return rows


# ---------------------------------------------------------------------------
# Estimator selfcheck battery
# ---------------------------------------------------------------------------

def _separated_pair(rng, n_points, min_sep=2.0):
    """Two jittered clusters with well-separated centers.  Separation keeps
    the exact distance far above the smoothing bias band (the estimate sits
    within [-smoothing, +smoothing*log n] of the entropic optimum, so
    near-overlapping measures are outside the tolerance regime by design)."""
    c1 = rng.uniform(0.0, 3.0, size=2)
    c2 = rng.uniform(0.0, 3.0, size=2)
    while np.linalg.norm(c2 - c1) < min_sep:
        c2 = rng.uniform(0.0, 3.0, size=2)
    p = DiscreteMeasure.uniform(c1 + rng.uniform(-0.4, 0.4, size=(n_points, 2)))
    q = DiscreteMeasure.uniform(c2 + rng.uniform(-0.4, 0.4, size=(n_points, 2)))
    return p, q


def _fit_and_estimate(xs, ys, fmap, params, seed):
    pot = fit_potentials(paired_sampler(xs, ys), fmap, fmap, params,
                         seed=stream_key(seed, "fit"))
    idx = substream(seed, "eval").integers(0, len(xs), params.eval_samples)
    return estimate_wd(pot, (embed(fmap, xs[idx]), embed(fmap, ys[idx])), params)


def _tiled_pairs(p_points, q_points, rng, n_rows):
    """Row-matched arrays sampling the product of two uniform supports."""
    xi = rng.integers(0, len(p_points), n_rows)
    yi = rng.integers(0, len(q_points), n_rows)
    return p_points[xi], q_points[yi]


def selfcheck(seed: int = 0) -> dict:
    """Estimator-versus-oracle battery; failures are report content, not
    exceptions.  Suites: identical measures within smoothing bias, small
    random pairs vs the LP oracle (plus LP/enumeration agreement), 1-D
    sorted-coupling agreement, a sampled Gaussian-cloud comparison, and a
    bias sweep that must shrink with the smoothing parameter."""
    suites = []
    tight = OtParams(smoothing=0.05, step_size=0.01, rounds=2000, eval_samples=1024)

    # identical measures: estimate must sit within the smoothing bias band
    rng = substream(seed, "sc_ident")
    pts = rng.uniform(0.0, 2.0, size=(6, 2))
    fmap = make_feature_map(2, 128, 1.0, seed=stream_key(seed, "sc_ident_map"))
    params = OtParams()
    est = _fit_and_estimate(pts, pts, fmap, params, stream_key(seed, "sc_ident_fit"))
    bound = params.smoothing * (1.0 + np.log(len(pts)))
    suites.append({"name": "identical_measures", "estimate": est,
                   "bias_bound": bound, "passed": bool(abs(est) <= bound)})

    # random small pairs vs LP oracle (in the shared embedded geometry the
    # estimator works in); enumeration cross-checks the LP
    rng = substream(seed, "sc_lp")
    worst_rel, worst_gap, ok = 0.0, 0.0, True
    for i in range(10):
        n = int(rng.integers(1, 6))  # equal sizes keep the enumeration route in scope
        p, q = _separated_pair(rng, n)
        fmap = make_feature_map(2, 128, 1.0, seed=stream_key(seed, "sc_lp_map", i))
        emb_p = DiscreteMeasure.uniform(embed(fmap, p.points))
        emb_q = DiscreteMeasure.uniform(embed(fmap, q.points))
        exact_lp = exact_wd_discrete(emb_p, emb_q, method="lp")
        exact_enum = exact_wd_discrete(emb_p, emb_q, method="enumeration")
        worst_gap = max(worst_gap, abs(exact_lp - exact_enum))
        xs, ys = _tiled_pairs(p.points, q.points, substream(seed, "sc_lp_rows", i), 512)
        est = _fit_and_estimate(xs, ys, fmap, tight, stream_key(seed, "sc_lp_fit", i))
        tol = max(0.10 * exact_lp, 0.02)
        err = abs(est - exact_lp)
        worst_rel = max(worst_rel, err / max(exact_lp, 1e-12))
        ok = ok and err <= tol and worst_gap <= 1e-9
    suites.append({"name": "lp_oracle", "worst_relative_error": worst_rel,
                   "lp_vs_enumeration_gap": worst_gap, "passed": bool(ok)})

    # 1-D sorted coupling equals the LP on the line
    rng = substream(seed, "sc_1d")
    xs = np.sort(rng.uniform(0.0, 1.0, size=12))
    ys = np.sort(rng.uniform(0.5, 1.5, size=12))
    quant = exact_wd_1d(xs, ys, power=2)
    lp = exact_wd_discrete(DiscreteMeasure.uniform(xs[:, None]),
                           DiscreteMeasure.uniform(ys[:, None]), method="lp")
    suites.append({"name": "quantile_1d", "quantile": quant, "lp": lp,
                   "passed": bool(abs(quant - lp) <= 1e-9)})

    # sampled Gaussian clouds vs the assignment oracle at a larger scale;
    # the wide support needs a gentler step to keep the dual SGD stable
    rng = substream(seed, "sc_gauss")
    a = rng.normal([0.0, 0.0], 0.5, size=(200, 2))
    b = rng.normal([2.5, 0.5], 0.5, size=(200, 2))
    fmap = make_feature_map(2, 128, 1.0, seed=stream_key(seed, "sc_gauss_map"))
    exact = exact_wd_discrete(DiscreteMeasure.uniform(embed(fmap, a)),
                              DiscreteMeasure.uniform(embed(fmap, b)),
                              max_couplings=200 * 200)
    perm = substream(seed, "sc_gauss_rows").permutation(200)
    cloud = OtParams(smoothing=0.05, step_size=0.005, rounds=4000,
                     eval_samples=1024)
    est = _fit_and_estimate(a, b[perm], fmap, cloud, stream_key(seed, "sc_gauss_fit"))
    rel = abs(est - exact) / exact
    suites.append({"name": "gaussian_cloud", "exact": exact, "estimate": est,
                   "relative_error": rel, "passed": bool(rel <= 0.15)})

    # median bias strictly shrinks with the smoothing parameter; one fixed
    # feature map so every run targets the same embedded exact value
    rng = substream(seed, "sc_bias")
    p, q = _separated_pair(rng, 5)
    fmap = make_feature_map(2, 128, 1.0, seed=stream_key(seed, "sc_bias_map"))
    exact = exact_wd_discrete(DiscreteMeasure.uniform(embed(fmap, p.points)),
                              DiscreteMeasure.uniform(embed(fmap, q.points)),
                              method="lp")
    medians = []
    for smoothing in (0.4, 0.2, 0.1, 0.05):
        params = OtParams(smoothing=smoothing, step_size=0.01, rounds=2000,
                          eval_samples=1024)
        errs = []
        for s in range(10):
            xs, ys = _tiled_pairs(p.points, q.points,
                                  substream(seed, "sc_bias_rows", s), 512)
            est = _fit_and_estimate(xs, ys, fmap, params,
                                    stream_key(seed, "sc_bias_fit", smoothing, s))
            errs.append(abs(est - exact))
        medians.append(float(np.median(errs)))
    decreasing = all(medians[i + 1] < medians[i] for i in range(len(medians) - 1))
    suites.append({"name": "bias_sweep", "smoothings": [0.4, 0.2, 0.1, 0.05],
                   "median_errors": medians, "passed": bool(decreasing)})

    return {"seed": seed, "suites": suites,
            "all_passed": bool(all(s["passed"] for s in suites))}


# ---------------------------------------------------------------------------
# Sweep driver and plotting
# ---------------------------------------------------------------------------

def sweep(base_cfg: TrainConfig, out_root: str,
          alphas=(0.2, 0.3, 0.4, 0.5, 0.6), seeds=(0,)) -> list:
    """Train one run per (alpha, seed) cell and write a summary CSV."""
    os.makedirs(out_root, exist_ok=True)
    results = []
    for alpha in alphas:
        for seed in seeds:
            cfg = base_cfg.replace(alpha=float(alpha), seed=int(seed))
            out_dir = os.path.join(out_root, f"alpha{alpha}_seed{seed}")
            art = train(cfg, out_dir)
            results.append({"alpha": float(alpha), "seed": int(seed),
                            "out_dir": out_dir, "run_id": art.run_id,
                            "final_return": art.final_return})
    summary = os.path.join(out_root, "sweep_summary.csv")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("alpha,seed,run_id,final_return,out_dir\n")
        for r in results:
            fh.write(f"{_fmt(r['alpha'])},{r['seed']},{r['run_id']},"
                     f"{_fmt(r['final_return'])},{r['out_dir']}\n")
    return results


def sliding_mean(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(x) == 0:
        return np.asarray(x, dtype=float)
    out = np.empty(len(x))
    for i in range(len(x)):
        lo = max(0, i - window + 1)
        out[i] = np.mean(x[lo:i + 1])
    return out


def plot_run(metrics_csv: str, out_png: str, window: int = 20):
    """Render return and pairwise-distance curves from a metrics file.
    Raw data stays on disk; smoothing happens only here."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = read_metrics(metrics_csv)
    steps = cols["timestep"]
    wd_cols = sorted(c for c in cols if c.startswith("wd_") and not c.startswith("wd_min"))
    fig, axes = plt.subplots(2, 1, figsize=(8, 7), sharex=True)
    axes[0].plot(steps, cols["mean_return"], alpha=0.3, label="raw")
    axes[0].plot(steps, sliding_mean(cols["mean_return"], window),
                 label=f"window {window}")
    axes[0].set_ylabel("mean episode return")
    axes[0].legend()
    for c in wd_cols:
        axes[1].plot(steps, sliding_mean(cols[c], window), label=c)
    axes[1].set_ylabel("estimated pairwise distance")
    axes[1].set_xlabel("environment steps")
    if wd_cols:
        axes[1].legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
