"""Experiment command line: training runs, transfer evaluation, imitation
pipeline, sparse-reward diagnostics, and rendering.

Subcommands:
  train           PPO training (solo/social, aux variants, mixing schedule)
  train-expert    curriculum training at the expert learning rate
  eval-transfer   zero-shot evaluation of a frozen checkpoint on a new task
  collect-demos   roll out an expert checkpoint into a demo trace
  train-bc        behavior-clone a network from a demo trace
  diagnose-sparse sparse-reward diagnostics (zero policy gradient, tabular Q)
  render          dump PNG renders of a generated layout

Every run directory contains manifest.json (config + seed + code version),
metrics.csv (one row per update; schema below), losses.csv (one row per
mini-batch), and checkpoints. All randomness derives from the manifest's
master seed through named substreams, so a run is reproducible batch-by-batch
and a resumed checkpoint continues bit-exactly.

metrics.csv columns:
  update_idx, episodes, wall_clock_s, mean_return_window, window_episodes,
  policy_loss, value_loss, entropy, aux_loss, total_loss, approx_kl,
  minibatches_applied, aborted, penalty, solo_episodes_in_batch,
  eval_return_greedy, eval_return_stochastic
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import gridworld as gw
from . import tasks as tk
from .nets import AgentNetwork, AuxMode, build_network
from .rollout import EpisodePlan, collect_batch, load_trace, save_trace
from .seeding import substream
from .train import PPOConfig, bc_train, ppo_update
from .tasks import (CurriculumSchedule, EpisodeMode, GoalCycleConfig,
                    MixSchedule, apply_curriculum, sample_episode_mode)

__all__ = [
    "ExperimentConfig", "preset", "run_training", "evaluate_policy",
    "cmd_eval_transfer", "collect_demos", "diagnose_sparse",
    "checkpoint_save", "checkpoint_load", "main",
]


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    task: str = "goal_cycle"          # goal_cycle | four_rooms | maze
    grid_size: int = 13
    n_goals: int = 3
    n_obstacles: int = 8
    episode_limit: int = 250
    penalty: float = -1.5
    alpha_c: float = 0.99
    maze_braid: float = 0.1
    aux_mode: str = "pred"
    total_episodes: int = 100_000
    batch_episodes: int = 128
    expert_checkpoints: list = field(default_factory=list)
    n_distractors: int = 0
    curriculum: list = None            # [[episode_threshold, penalty], ...]
    mix_switch_episode: int = None     # None: no mixing schedule
    mix_solo_fraction: float = 0.75
    eval_every_episodes: int = 0       # 0 disables periodic eval
    eval_episodes: int = 16
    checkpoint_every_updates: int = 100
    return_window: int = 1000
    master_seed: int = 0
    out_dir: str = "runs/run"
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def to_json(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        ppo = d.pop("ppo", {})
        cfg = cls(**d)
        cfg.ppo = PPOConfig(**ppo) if isinstance(ppo, dict) else ppo
        return cfg


def preset(name):
    """Frozen experiment presets. desk_smoke is the CI-scale learnability run."""
    if name == "paper_goal_cycle":
        return ExperimentConfig(total_episodes=1_500_000)
    if name == "desk_smoke":
        return ExperimentConfig(
            task="goal_cycle", grid_size=9, n_goals=2, n_obstacles=2,
            penalty=0.0, episode_limit=96, total_episodes=30_000,
            batch_episodes=32, return_window=500, checkpoint_every_updates=200,
            ppo=PPOConfig(n_windows=64, window_len=16,
                          minibatches_per_batch=10, learning_rate=1e-3))
    raise ValueError(f"unknown preset: {name}")


def make_env_factory(config, penalty_for_episode=None):
    """Factory(rng, roles, episode_idx) -> (state, rules) for the config's task."""
    if config.task == "goal_cycle":
        def factory(rng, roles, episode_idx):
            penalty = (penalty_for_episode(episode_idx)
                       if penalty_for_episode else config.penalty)
            cfg = GoalCycleConfig(
                grid_size=config.grid_size, n_goals=config.n_goals,
                penalty=penalty, n_obstacles=config.n_obstacles,
                episode_limit=config.episode_limit, alpha_c=config.alpha_c)
            return tk.generate_goal_cycle(rng, cfg, roles)
        return factory
    if config.task == "four_rooms":
        return lambda rng, roles, ep: tk.generate_four_rooms(
            rng, roles, episode_limit=config.episode_limit, alpha_c=config.alpha_c)
    if config.task == "maze":
        return lambda rng, roles, ep: tk.generate_maze(
            rng, roles, braid=config.maze_braid,
            episode_limit=config.episode_limit, alpha_c=config.alpha_c)
    raise ValueError(f"unknown task: {config.task}")


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SGCK"
_CKPT_VERSION = 1


def checkpoint_save(network, optimizer, counters, path, extra=None):
    """Versioned, checksummed container: descriptor, params in declaration
    order, optimizer state, run counters, and the master seed that regenerates
    every RNG substream."""
    arrays = {}
    for name, p in network.parameters():
        arrays[f"param/{name}"] = p.data
    if optimizer is not None:
        for i, m in enumerate(optimizer.m):
            arrays[f"adam_m/{i}"] = m
        for i, v in enumerate(optimizer.v):
            arrays[f"adam_v/{i}"] = v
    header = {
        "version": _CKPT_VERSION,
        "descriptor": network.descriptor(),
        "counters": dict(counters),
        "adam": None if optimizer is None else
                {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                 "beta2": optimizer.beta2, "eps": optimizer.eps},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = zlib.compress(buf.getvalue(), level=6)
    hjson = json.dumps(header).encode()
    body = (_CKPT_MAGIC + _CKPT_VERSION.to_bytes(4, "little")
            + len(hjson).to_bytes(8, "little") + hjson
            + len(payload).to_bytes(8, "little") + payload)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    return path


def checkpoint_load(path, expect_mode=None):
    """Load a checkpoint; returns (network, optimizer-or-None, counters, extra).

    Verifies the checksum, container version, and architecture descriptor;
    expect_mode guards against loading a checkpoint into a run with a
    different auxiliary-head variant.
    """
    raw = open(path, "rb").read()
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("checkpoint checksum mismatch (file corrupted)")
    if body[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if int.from_bytes(body[4:8], "little") != _CKPT_VERSION:
        raise ValueError("unsupported checkpoint version")
    hlen = int.from_bytes(body[8:16], "little")
    header = json.loads(body[16:16 + hlen].decode())
    at = 16 + hlen
    plen = int.from_bytes(body[at:at + 8], "little")
    npz = np.load(io.BytesIO(zlib.decompress(body[at + 8:at + 8 + plen])))

    desc = header["descriptor"]
    mode = AuxMode(desc["mode"])
    if expect_mode is not None and mode != AuxMode(expect_mode):
        raise ValueError(
            f"architecture descriptor mismatch: checkpoint is aux={mode.value}, "
            f"run expects aux={AuxMode(expect_mode).value}")
    network = AgentNetwork(mode, np.random.default_rng(0))
    if network.descriptor() != desc:
        raise ValueError("architecture descriptor mismatch")
    for name, p in network.parameters():
        p.data[...] = npz[f"param/{name}"]

    optimizer = None
    if header["adam"] is not None:
        a = header["adam"]
        optimizer = ad.Adam(network.param_list(), lr=a["lr"], beta1=a["beta1"],
                            beta2=a["beta2"], eps=a["eps"])
        optimizer.t = a["t"]
        optimizer.m = [npz[f"adam_m/{i}"] for i in range(len(optimizer.m))]
        optimizer.v = [npz[f"adam_v/{i}"] for i in range(len(optimizer.v))]
    return network, optimizer, header["counters"], header["extra"]


def select_checkpoint_by_return(run_dir, min_return=None, max_return=None):
    """Pick a checkpoint from a run by its tagged windowed mean return.

    Periodic and final checkpoints carry the sliding return window they were
    saved with; this selects the earliest checkpoint satisfying the bounds,
    which is how imperfect experts (early, weaker checkpoints) are chosen.
    """
    candidates = []
    for path in sorted(Path(run_dir).glob("*.ckpt")):
        _, _, counters, extra = checkpoint_load(path)
        window = extra.get("return_window", [])
        if not window:
            continue
        mean_ret = float(np.mean(window))
        if min_return is not None and mean_ret < min_return:
            continue
        if max_return is not None and mean_ret > max_return:
            continue
        candidates.append((counters.get("updates_done", 0), mean_ret, path))
    if not candidates:
        raise ValueError(f"no checkpoint in {run_dir} matches the return bounds")
    candidates.sort()
    updates, mean_ret, path = candidates[0]
    return path, mean_ret


def checkpoint_state_hash(network, optimizer=None):
    h = hashlib.sha256()
    h.update(network.get_flat().tobytes())
    if optimizer is not None:
        for m in optimizer.m:
            h.update(m.tobytes())
        for v in optimizer.v:
            h.update(v.tobytes())
        h.update(str(optimizer.t).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# evaluation

def evaluate_policy(network, config, experts=(), n_episodes=16, master_seed=0,
                    eval_tag=0, greedy=False, social=None, n_distractors=0):
    """Frozen-policy evaluation; returns per-episode learner returns."""
    if social is None:
        social = bool(experts)
    eval_seed = int(substream(master_seed, "evalseed", eval_tag).integers(2 ** 62))
    factory = make_env_factory(config)
    plans = [EpisodePlan(i, social=social) for i in range(n_episodes)]
    batch = collect_batch(factory, network, experts=list(experts),
                          n_distractors=n_distractors, plans=plans,
                          master_seed=eval_seed, greedy=greedy,
                          gamma=config.ppo.gamma, lam=config.ppo.lam)
    return np.array([ep.episode_return for ep in batch.episodes])


def bootstrap_ci(values, n_resamples=10_000, alpha=0.05, seed=0):
    """Nonparametric bootstrap CI for the mean."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def cmd_eval_transfer(novice_ckpt, config, expert_ckpts=(), n_episodes=100,
                      n_distractors=0, solo=False, greedy=False, master_seed=0):
    """Zero-shot transfer: run a frozen checkpoint on a new task; no updates."""
    network, _, _, _ = checkpoint_load(novice_ckpt)
    experts = [checkpoint_load(p)[0] for p in expert_ckpts]
    before = checkpoint_state_hash(network)
    returns = evaluate_policy(network, config, experts=() if solo else experts,
                              n_episodes=n_episodes, master_seed=master_seed,
                              eval_tag=0, greedy=greedy, social=not solo,
                              n_distractors=0 if solo else n_distractors)
    if checkpoint_state_hash(network) != before:
        raise RuntimeError("transfer evaluation modified network parameters")
    lo, hi = bootstrap_ci(returns, seed=master_seed)
    return {
        "task": config.task,
        "episodes": int(len(returns)),
        "mean_return": float(returns.mean()),
        "ci95": [lo, hi],
        "returns": returns.tolist(),
        "solo": solo,
        "n_experts": 0 if solo else len(experts),
        "n_distractors": 0 if solo else n_distractors,
        "greedy": greedy,
    }


# ---------------------------------------------------------------------------
# training loop

METRICS_COLUMNS = [
    "update_idx", "episodes", "wall_clock_s", "mean_return_window",
    "window_episodes", "policy_loss", "value_loss", "entropy", "aux_loss",
    "total_loss", "approx_kl", "minibatches_applied", "aborted", "penalty",
    "solo_episodes_in_batch", "eval_return_greedy", "eval_return_stochastic",
]

LOSSES_COLUMNS = [
    "update_idx", "minibatch_idx", "policy_loss", "value_loss", "entropy",
    "aux_loss", "total", "approx_kl", "applied",
]


def _mean_or_nan(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def run_training(config, expert_lr=None, resume=None, stop_condition=None,
                 quiet=False):
    """Drive collect -> update until the episode budget (or stop_condition).

    Writes manifest.json, metrics.csv, losses.csv and periodic checkpoints in
    config.out_dir. Returns the run directory as a Path.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_json(), "master_seed": config.master_seed,
                "code_version": __version__, "started_unix": time.time(),
                "resumed_from": str(resume) if resume else None}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    lr = expert_lr if expert_lr is not None else config.ppo.learning_rate
    window = []
    if resume:
        network, optimizer, counters, extra = checkpoint_load(
            resume, expect_mode=config.aux_mode)
        episodes_done = counters["episodes_done"]
        update_idx = counters["updates_done"]
        window = list(extra.get("return_window", []))
        if optimizer is None:
            optimizer = ad.Adam(network.param_list(), lr=lr)
    else:
        network = build_network(config.aux_mode,
                                substream(config.master_seed, "init"))
        optimizer = ad.Adam(network.param_list(), lr=lr)
        episodes_done = 0
        update_idx = 0

    experts = [checkpoint_load(p)[0] for p in config.expert_checkpoints]
    curriculum = (CurriculumSchedule([tuple(s) for s in config.curriculum])
                  if config.curriculum else None)
    mix = (MixSchedule(config.mix_switch_episode, config.mix_solo_fraction)
           if config.mix_switch_episode is not None else None)
    penalty_fn = ((lambda ep: apply_curriculum(curriculum, ep))
                  if curriculum else None)
    factory = make_env_factory(config, penalty_for_episode=penalty_fn)

    t_start = time.time()
    mfile = open(out / "metrics.csv", "a", newline="")
    lfile = open(out / "losses.csv", "a", newline="")
    mwriter = csv.writer(mfile)
    lwriter = csv.writer(lfile)
    if mfile.tell() == 0:
        mwriter.writerow(METRICS_COLUMNS)
    if lfile.tell() == 0:
        lwriter.writerow(LOSSES_COLUMNS)

    last_eval = (float("nan"), float("nan"))
    next_eval_at = config.eval_every_episodes or None

    try:
        while episodes_done < config.total_episodes:
            plans = []
            for i in range(config.batch_episodes):
                ep_idx = episodes_done + i
                if mix is not None:
                    mode = sample_episode_mode(
                        mix, ep_idx, substream(config.master_seed, "mix", ep_idx))
                    social = mode == EpisodeMode.SOCIAL and bool(experts)
                else:
                    social = bool(experts)
                plans.append(EpisodePlan(ep_idx, social=social))
            batch = collect_batch(
                factory, network, experts=experts,
                n_distractors=config.n_distractors, plans=plans,
                master_seed=config.master_seed,
                gamma=config.ppo.gamma, lam=config.ppo.lam)
            stats = ppo_update(batch, network, optimizer, config.ppo,
                               master_seed=config.master_seed,
                               update_idx=update_idx)
            episodes_done += config.batch_episodes
            update_idx += 1

            window.extend(ep.episode_return for ep in batch.episodes)
            window = window[-config.return_window:]
            if next_eval_at is not None and episodes_done >= next_eval_at:
                g = evaluate_policy(network, config, experts,
                                    n_episodes=config.eval_episodes,
                                    master_seed=config.master_seed,
                                    eval_tag=update_idx, greedy=True)
                s = evaluate_policy(network, config, experts,
                                    n_episodes=config.eval_episodes,
                                    master_seed=config.master_seed,
                                    eval_tag=update_idx, greedy=False)
                last_eval = (float(g.mean()), float(s.mean()))
                next_eval_at += config.eval_every_episodes
            else:
                last_eval = (float("nan"), float("nan"))

            applied_rows = [r for r in stats.rows if r.applied]
            penalty_now = (apply_curriculum(curriculum, episodes_done)
                           if curriculum else config.penalty)
            row = {
                "update_idx": update_idx,
                "episodes": episodes_done,
                "wall_clock_s": round(time.time() - t_start, 3),
                "mean_return_window": _mean_or_nan(window),
                "window_episodes": len(window),
                "policy_loss": _mean_or_nan([r.policy_loss for r in applied_rows]),
                "value_loss": _mean_or_nan([r.value_loss for r in applied_rows]),
                "entropy": _mean_or_nan([r.entropy for r in applied_rows]),
                "aux_loss": _mean_or_nan([r.aux_loss for r in applied_rows]),
                "total_loss": _mean_or_nan([r.total for r in applied_rows]),
                "approx_kl": _mean_or_nan([r.approx_kl for r in applied_rows]),
                "minibatches_applied": stats.minibatches_applied,
                "aborted": int(stats.aborted),
                "penalty": penalty_now,
                "solo_episodes_in_batch": sum(not p.social for p in plans),
                "eval_return_greedy": last_eval[0],
                "eval_return_stochastic": last_eval[1],
            }
            mwriter.writerow([row[c] for c in METRICS_COLUMNS])
            mfile.flush()
            for i, r in enumerate(stats.rows):
                lwriter.writerow([update_idx, i, r.policy_loss, r.value_loss,
                                  r.entropy, r.aux_loss, r.total, r.approx_kl,
                                  int(r.applied)])
            lfile.flush()
            if not quiet:
                print(f"update {update_idx}: episodes={episodes_done} "
                      f"return={row['mean_return_window']:.3f} "
                      f"kl={row['approx_kl']:.4f} mb={stats.minibatches_applied}"
                      + (" [aborted]" if stats.aborted else ""))

            counters = {"episodes_done": episodes_done, "updates_done": update_idx}
            if update_idx % config.checkpoint_every_updates == 0:
                checkpoint_save(network, optimizer, counters,
                                out / f"ckpt_{update_idx:06d}.ckpt",
                                extra={"return_window": list(window)})
            if stop_condition is not None and stop_condition(row):
                break
        counters = {"episodes_done": episodes_done, "updates_done": update_idx}
        checkpoint_save(network, optimizer, counters, out / "final.ckpt",
                        extra={"return_window": list(window),
                               "mean_return_window": _mean_or_nan(window)})
    finally:
        mfile.close()
        lfile.close()
    return out


# ---------------------------------------------------------------------------
# demos / BC

def collect_demos(expert_ckpt, config, n_episodes, out_path, master_seed=0,
                  greedy=False):
    """Roll out an expert checkpoint (solo) and save its own observations and
    actions as a demo trace."""
    network, _, _, _ = checkpoint_load(expert_ckpt)
    factory = make_env_factory(config)
    demo_seed = int(substream(master_seed, "demos").integers(2 ** 62))
    plans = [EpisodePlan(i, social=False) for i in range(n_episodes)]
    batch = collect_batch(factory, network, plans=plans, master_seed=demo_seed,
                          greedy=greedy)
    save_trace(batch.episodes, out_path)
    return out_path, np.array([ep.episode_return for ep in batch.episodes])


def train_bc(demo_path, aux_mode, epochs, lr, out_ckpt, master_seed=0):
    """Behavior-clone a fresh network from a demo trace; returns loss history."""
    episodes = load_trace(demo_path)
    network = build_network(aux_mode, substream(master_seed, "bcinit"))
    network, history = bc_train(episodes, network, epochs=epochs, lr=lr,
                                master_seed=master_seed)
    checkpoint_save(network, None, {"bc_epochs": epochs}, out_ckpt,
                    extra={"bc_loss_history": history})
    return network, history


# ---------------------------------------------------------------------------
# sparse-reward diagnostics

@dataclass
class SparseDiagnostics:
    policy_grad_max_abs: float
    trajectory_steps: int
    q_max_abs_per_sweep: list
    q_final_max_abs: float
    novel_state_q_target: float

    def summary(self):
        return (
            f"zero-reward policy gradient: max|grad| = {self.policy_grad_max_abs}\n"
            f"  ({self.trajectory_steps}-step trajectory, every R_t = 0)\n"
            f"tabular Q on zero-reward chain: max|Q| {self.q_max_abs_per_sweep[0]:.4f} "
            f"-> {self.q_final_max_abs:.2e} after {len(self.q_max_abs_per_sweep)} sweeps\n"
            f"novel-state Q target: {self.novel_state_q_target:.2e}"
        )


class _ZeroRewardRules:
    """Goal-free task: every reward is 0 by construction."""
    variant = "zero_reward"
    alpha_c = 0.99

    def resolve_step(self, state, visited):
        return np.zeros(len(state.agents)), False


def _zero_reward_env(rng, roles, episode_idx):
    n = 7
    tiles = np.zeros((n, n), dtype=np.int8)
    tiles[0, :] = tiles[-1, :] = tiles[:, 0] = tiles[:, -1] = gw.TileKind.OBSTACLE
    cells = [(x, y) for y in range(1, n - 1) for x in range(1, n - 1)]
    picks = rng.choice(len(cells), size=len(roles), replace=False)
    agents = [gw.AgentBody(i, cells[p], int(rng.integers(0, 4)), role=r)
              for i, (p, r) in enumerate(zip(picks, roles))]
    state = gw.GridState(width=n, height=n, tiles=tiles, goals=[], agents=agents,
                         episode_limit=24)
    return state, _ZeroRewardRules()


def diagnose_sparse(master_seed=0, gamma=0.9, q_lr=0.5, sweeps=200,
                    chain_states=5):
    """(a) REINFORCE gradient on an all-zero-reward trajectory is exactly the
    zero vector; (b) zero-reward tabular Q-learning drives max|Q| toward 0."""
    network = build_network(AuxMode.PRED, substream(master_seed, "diag"))
    batch = collect_batch(_zero_reward_env, network,
                          plans=[EpisodePlan(0, social=False)],
                          master_seed=master_seed)
    ep = batch.episodes[0]
    assert np.array_equal(ep.rewards, np.zeros(ep.length))
    # rewards-to-go R_t = sum_k gamma^k r_{t+k} (all exactly zero here)
    rtg = np.zeros(ep.length)
    acc = 0.0
    for t in range(ep.length - 1, -1, -1):
        acc = ep.rewards[t] + gamma * acc
        rtg[t] = acc
    params = network.param_list()
    ad.zero_grads(params)
    from .nets import HiddenState
    with ad.Tape() as tape:
        hidden = HiddenState()
        terms = None
        for t in range(ep.length):
            emb, hidden = network.trunk_forward(ep.obs[t], hidden)
            lp = ad.gather_last(ad.log_softmax(network.policy_logits(emb)),
                                np.array(ep.actions[t]))
            term = ad.mul(lp, rtg[t])
            terms = term if terms is None else ad.add(terms, term)
        loss = ad.neg(terms)
    grads = tape.gradients(loss, params)
    grad_max = max(float(np.abs(g).max()) for g in grads)
    ad.zero_grads(params)

    # tabular Q-learning on a zero-reward chain MDP (actions: left, right)
    rng = substream(master_seed, "diagq")
    Q = rng.normal(0.0, 0.1, size=(chain_states, 2))
    per_sweep = [float(np.abs(Q).max())]
    for _ in range(sweeps):
        for s in range(chain_states):
            for a in range(2):
                s2 = max(0, s - 1) if a == 0 else min(chain_states - 1, s + 1)
                target = 0.0 + gamma * Q[s2].max()
                Q[s, a] += q_lr * (target - Q[s, a])
        per_sweep.append(float(np.abs(Q).max()))
    novel_target = 0.0 + gamma * float(Q.max())

    return SparseDiagnostics(
        policy_grad_max_abs=grad_max,
        trajectory_steps=ep.length,
        q_max_abs_per_sweep=per_sweep,
        q_final_max_abs=per_sweep[-1],
        novel_state_q_target=novel_target,
    )


# ---------------------------------------------------------------------------
# rendering

def render_layout(config, master_seed, out_dir, n_agents=1):
    """Generate one layout and dump full-grid and per-agent observation PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    factory = make_env_factory(config)
    roles = [gw.Role.NOVICE] * n_agents
    state, rules = factory(substream(master_seed, "env", 0), roles, 0)
    gw.save_png(gw.render_full(state), out / "grid.png")
    for a in state.agents:
        gw.save_png(gw.render_observation(state, a.agent_id),
                    out / f"obs_agent{a.agent_id}.png")
    (out / "layout.json").write_text(json.dumps(tk.layout_to_json(state, rules),
                                                indent=2))
    return out


# ---------------------------------------------------------------------------
# CLI plumbing

def _load_config(args):
    if getattr(args, "preset", None):
        cfg = preset(args.preset)
    elif getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        cfg = ExperimentConfig()
    for kv in getattr(args, "set", None) or []:
        key, _, val = kv.partition("=")
        val = json.loads(val)
        if key.startswith("ppo."):
            setattr(cfg.ppo, key[4:], val)
        else:
            setattr(cfg, key, val)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    return cfg


def main(argv=None):
    ap = argparse.ArgumentParser(prog="socialgrid",
                                 description="gridworld social-learning lab")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add_cfg_args(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--preset", help="named preset (desk_smoke, paper_goal_cycle)")
        p.add_argument("--set", action="append", metavar="KEY=JSONVAL",
                       help="override a config field, e.g. ppo.learning_rate=1e-5")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")

    p = sub.add_parser("train", help="PPO training run")
    add_cfg_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("train-expert", help="curriculum training at expert lr")
    add_cfg_args(p)
    p.add_argument("--expert-lr", type=float, default=1e-5)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval-transfer", help="zero-shot transfer evaluation")
    add_cfg_args(p)
    p.add_argument("checkpoint")
    p.add_argument("--experts", nargs="*", default=[])
    p.add_argument("--experts-from", nargs="*", default=[], metavar="RUN_DIR",
                   help="pick expert checkpoints from run dirs by tagged return")
    p.add_argument("--expert-return-min", type=float)
    p.add_argument("--expert-return-max", type=float,
                   help="upper bound selects imperfect (early) experts")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--solo", action="store_true")
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("collect-demos", help="record expert demo trace")
    add_cfg_args(p)
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--trace", required=True, help="output trace path")

    p = sub.add_parser("train-bc", help="behavior cloning from a demo trace")
    p.add_argument("trace")
    p.add_argument("--aux-mode", default="rec")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-ckpt", required=True)

    p = sub.add_parser("diagnose-sparse", help="sparse-reward diagnostics")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="dump PNGs of a generated layout")
    add_cfg_args(p)
    p.add_argument("--agents", type=int, default=1)

    args = ap.parse_args(argv)

    if args.cmd == "train":
        cfg = _load_config(args)
        out = run_training(cfg, resume=args.resume)
        print(f"run complete: {out}")
    elif args.cmd == "train-expert":
        cfg = _load_config(args)
        out = run_training(cfg, expert_lr=args.expert_lr, resume=args.resume)
        print(f"expert run complete: {out}")
    elif args.cmd == "eval-transfer":
        cfg = _load_config(args)
        experts = list(args.experts)
        for run_dir in args.experts_from:
            path, mean_ret = select_checkpoint_by_return(
                run_dir, min_return=args.expert_return_min,
                max_return=args.expert_return_max)
            print(f"expert from {run_dir}: {path.name} (return {mean_ret:.3f})")
            experts.append(str(path))
        summary = cmd_eval_transfer(args.checkpoint, cfg,
                                    expert_ckpts=experts,
                                    n_episodes=args.episodes,
                                    n_distractors=args.distractors,
                                    solo=args.solo, greedy=args.greedy,
                                    master_seed=cfg.master_seed)
        brief = {k: v for k, v in summary.items() if k != "returns"}
        print(json.dumps(brief, indent=2))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            Path(args.out, "transfer.json").write_text(json.dumps(summary, indent=2))
    elif args.cmd == "collect-demos":
        cfg = _load_config(args)
        path, returns = collect_demos(args.checkpoint, cfg, args.episodes,
                                      args.trace, master_seed=cfg.master_seed,
                                      greedy=args.greedy)
        print(f"saved {args.episodes} demo episodes to {path} "
              f"(mean return {returns.mean():.3f})")
    elif args.cmd == "train-bc":
        _, history = train_bc(args.trace, args.aux_mode, args.epochs, args.lr,
                              args.out_ckpt, master_seed=args.seed)
        print(f"BC checkpoint saved to {args.out_ckpt}; "
              f"loss {history[0]:.4f} -> {history[-1]:.4f}")
    elif args.cmd == "diagnose-sparse":
        report = diagnose_sparse(master_seed=args.seed)
        print(report.summary())
    elif args.cmd == "render":
        cfg = _load_config(args)
        out = render_layout(cfg, cfg.master_seed, cfg.out_dir, n_agents=args.agents)
        print(f"renders written to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
