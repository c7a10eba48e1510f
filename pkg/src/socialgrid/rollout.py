"""Experience collection and replay.

Episodes are collected in lockstep across the whole batch so network forward
passes and rendering are vectorized over environments; each episode still
owns its named RNG substreams, so a batch is a pure function of
(master seed, plans, configs).

Per-step records keep the LSTM hidden state at step entry, the value
estimate, and the action log-prob under the collection-time policy.
``refresh_batch`` replays stored observations through the current network to
recompute hidden states, values, and GAE advantages, leaving actions,
rewards, and old log-probs untouched. ``sample_minibatch`` draws fixed-length
trajectory windows uniformly over all valid start offsets (with replacement),
never crossing episode boundaries; each window starts from its stored hidden
state.

Observations are stored channels-first (T+1, 3, 21, 21), including the final
post-step frame, so next-state prediction targets exist for every step.
"""

import hashlib
import io
import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import gridworld as gw
from .gridworld import Role
from .nets import HiddenState, obs_to_chw, sample_action, EMBED
from .seeding import substream
from .tasks import EpisodeMode, distractor_policy

__all__ = [
    "EpisodePlan", "EpisodeRecord", "RolloutBatch", "MiniBatch",
    "collect_batch", "compute_gae", "refresh_batch", "sample_minibatch",
    "save_trace", "load_trace",
]

GAMMA = 0.993
LAM = 0.97


@dataclass
class EpisodePlan:
    episode_idx: int
    social: bool = True


@dataclass
class EpisodeRecord:
    episode_idx: int
    mode: str
    obs: np.ndarray        # [T+1, 3, 21, 21], includes the final frame
    actions: np.ndarray    # [T]
    rewards: np.ndarray    # [T]
    dones: np.ndarray      # [T] bool; True at the final step
    values: np.ndarray     # [T]
    logps: np.ndarray      # [T] log-prob of the stored action at collection
    h0: np.ndarray         # [T, 192] LSTM h at step entry
    c0: np.ndarray         # [T, 192]
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def length(self):
        return len(self.actions)

    @property
    def episode_return(self):
        return float(self.rewards.sum())


@dataclass
class RolloutBatch:
    episodes: list
    gamma: float = GAMMA
    lam: float = LAM

    def mean_return(self):
        return float(np.mean([ep.episode_return for ep in self.episodes]))


@dataclass
class MiniBatch:
    obs: np.ndarray        # [N, L, 3, 21, 21]
    next_obs: np.ndarray   # [N, L, 3, 21, 21]
    actions: np.ndarray    # [N, L]
    logp_old: np.ndarray   # [N, L]
    advantages: np.ndarray # [N, L]
    returns: np.ndarray    # [N, L]
    h0: np.ndarray         # [N, 192]
    c0: np.ndarray         # [N, 192]


# ---------------------------------------------------------------------------
# GAE

def compute_gae(rewards, values, dones, gamma=GAMMA, lam=LAM):
    """GAE advantages and returns; episode ends bootstrap a value of 0.

    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    ret_t   = A_t + V_t
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values, dones must have equal length")
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_v = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


# ---------------------------------------------------------------------------
# collection

def _policy_step(net, obs_chw, h_arr, c_arr, rows):
    """Forward a subset of rows; returns (logits, values, h_new, c_new) data."""
    hs = HiddenState(h_arr[rows], c_arr[rows])
    emb, hs_new = net.trunk_forward(obs_chw, hs)
    logits = net.policy_logits(emb)
    values = net.value(emb)
    return logits.data, values.data, hs_new.h.data, hs_new.c.data


def collect_batch(env_factory, learner, experts=(), n_distractors=0, plans=None,
                  n_episodes=128, master_seed=0, base_episode=0, greedy=False,
                  gamma=GAMMA, lam=LAM):
    """Run a batch of episodes in lockstep and record the learner's transitions.

    env_factory(rng, roles, episode_idx) -> (GridState, TaskRules). The
    learner is agent slot 0; frozen expert networks fill the next slots in
    social episodes, then n_distractors random walkers. Per-episode RNG
    substreams are named: "env" for generation and "act" per agent slot.
    """
    if plans is None:
        plans = [EpisodePlan(base_episode + i, social=True) for i in range(n_episodes)]
    B = len(plans)
    experts = list(experts)

    states, rules_list, act_rngs = [], [], []
    for plan in plans:
        roles = [Role.NOVICE]
        if plan.social:
            roles += [Role.EXPERT] * len(experts) + [Role.DISTRACTOR] * n_distractors
        env_rng = substream(master_seed, "env", plan.episode_idx)
        state, rules = env_factory(env_rng, roles, plan.episode_idx)
        states.append(state)
        rules_list.append(rules)
        act_rngs.append([substream(master_seed, "act", plan.episode_idx, slot)
                         for slot in range(len(roles))])

    H, W = states[0].height, states[0].width
    padded = np.stack([gw.pad_tiles(s.tiles) for s in states])
    limits = np.array([s.episode_limit for s in states])
    max_T = int(limits.max())

    store = [dict(obs=np.empty((limits[b] + 1, 3, gw.OBS_SIZE, gw.OBS_SIZE)),
                  actions=np.empty(limits[b], dtype=np.int64),
                  rewards=np.empty(limits[b]),
                  dones=np.zeros(limits[b], dtype=bool),
                  values=np.empty(limits[b]),
                  logps=np.empty(limits[b]),
                  h0=np.empty((limits[b], EMBED)),
                  c0=np.empty((limits[b], EMBED)),
                  T=0) for b in range(B)]

    lh = np.zeros((B, EMBED))
    lc = np.zeros((B, EMBED))
    eh = [np.zeros((B, EMBED)) for _ in experts]
    ec = [np.zeros((B, EMBED)) for _ in experts]
    active = np.ones(B, dtype=bool)
    social_mask = np.array([p.social for p in plans])

    def observe(rows, slot):
        pos = np.array([states[b].agents[slot].position for b in rows])
        ori = np.array([int(states[b].agents[slot].orientation) for b in rows])
        rost = [gw.roster_tuples(states[b]) for b in rows]
        imgs = gw.render_views_batch(padded[rows], (H, W), pos, ori, rost)
        return obs_to_chw(imgs)

    for t in range(max_T):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        obs_chw = observe(rows, 0)
        logits, values, h_new, c_new = _policy_step(learner, obs_chw, lh, lc, rows)
        joint = {b: [] for b in rows}
        for j, b in enumerate(rows):
            st = store[b]
            k = st["T"]
            st["obs"][k] = obs_chw[j]
            st["h0"][k] = lh[b]
            st["c0"][k] = lc[b]
            a, lp = sample_action(logits[j], act_rngs[b][0], greedy=greedy)
            st["actions"][k] = a
            st["logps"][k] = lp
            st["values"][k] = values[j] if values.ndim else float(values)
            joint[b].append(a)
        lh[rows] = h_new
        lc[rows] = c_new

        for slot_off, enet in enumerate(experts):
            slot = 1 + slot_off
            erows = np.flatnonzero(active & social_mask)
            if erows.size == 0:
                continue
            eobs = observe(erows, slot)
            elogits, _, eh_new, ec_new = _policy_step(
                enet, eobs, eh[slot_off], ec[slot_off], erows)
            for j, b in enumerate(erows):
                a, _ = sample_action(elogits[j], act_rngs[b][slot])
                joint[b].append(a)
            eh[slot_off][erows] = eh_new
            ec[slot_off][erows] = ec_new

        finished = []
        for b in rows:
            slot0 = len(joint[b])
            for slot in range(slot0, len(states[b].agents)):
                joint[b].append(distractor_policy(act_rngs[b][slot]))
            states[b], ev = gw.step(states[b], joint[b], rules_list[b])
            st = store[b]
            k = st["T"]
            st["rewards"][k] = ev.rewards[0]
            st["dones"][k] = ev.episode_done
            st["T"] = k + 1
            if ev.episode_done:
                active[b] = False
                finished.append(b)
        for b in finished:
            st = store[b]
            st["obs"][st["T"]] = observe(np.array([b]), 0)[0]

    episodes = []
    for b, plan in enumerate(plans):
        st = store[b]
        T = st["T"]
        adv, ret = compute_gae(st["rewards"][:T], st["values"][:T],
                               st["dones"][:T], gamma, lam)
        episodes.append(EpisodeRecord(
            episode_idx=plan.episode_idx,
            mode=EpisodeMode.SOCIAL if plan.social else EpisodeMode.SOLO,
            obs=st["obs"][:T + 1], actions=st["actions"][:T],
            rewards=st["rewards"][:T], dones=st["dones"][:T],
            values=st["values"][:T], logps=st["logps"][:T],
            h0=st["h0"][:T], c0=st["c0"][:T], advantages=adv, returns=ret))
    return RolloutBatch(episodes, gamma=gamma, lam=lam)


# ---------------------------------------------------------------------------
# refresh and window sampling

def refresh_batch(batch, network):
    """Recompute hidden states, values, advantages and returns in place.

    Stored actions, rewards, and collection-time log-probs are untouched.
    """
    episodes = batch.episodes
    if not episodes:
        return batch
    B = len(episodes)
    max_T = max(ep.length for ep in episodes)
    h = np.zeros((B, EMBED))
    c = np.zeros((B, EMBED))
    for t in range(max_T):
        rows = np.flatnonzero(np.array([ep.length > t for ep in episodes]))
        obs_t = np.stack([episodes[b].obs[t] for b in rows])
        for j, b in enumerate(rows):
            episodes[b].h0[t] = h[b]
            episodes[b].c0[t] = c[b]
        emb, hs = network.trunk_forward(obs_t, HiddenState(h[rows], c[rows]))
        vals = network.value(emb).data
        for j, b in enumerate(rows):
            episodes[b].values[t] = vals[j]
        h[rows] = hs.h.data
        c[rows] = hs.c.data
    for ep in episodes:
        ep.advantages, ep.returns = compute_gae(ep.rewards, ep.values, ep.dones,
                                                batch.gamma, batch.lam)
    return batch


def sample_minibatch(batch, rng, n_windows=512, window_len=16):
    """Uniform (with replacement) fixed-length windows over all episodes."""
    episodes = batch.episodes
    if any(ep.advantages is None for ep in episodes):
        raise ValueError("batch has no advantages; refresh it first")
    starts_per_ep = np.array([max(0, ep.length - window_len + 1) for ep in episodes])
    total = int(starts_per_ep.sum())
    if total == 0:
        raise ValueError(f"no episode is long enough for windows of {window_len}")
    cum = np.cumsum(starts_per_ep)
    draws = rng.integers(0, total, size=n_windows)
    ep_idx = np.searchsorted(cum, draws, side="right")
    start = draws - np.concatenate(([0], cum[:-1]))[ep_idx]

    L = window_len
    obs = np.stack([episodes[e].obs[s:s + L] for e, s in zip(ep_idx, start)])
    next_obs = np.stack([episodes[e].obs[s + 1:s + L + 1] for e, s in zip(ep_idx, start)])
    gather = lambda name: np.stack([getattr(episodes[e], name)[s:s + L]
                                    for e, s in zip(ep_idx, start)])
    h0 = np.stack([episodes[e].h0[s] for e, s in zip(ep_idx, start)])
    c0 = np.stack([episodes[e].c0[s] for e, s in zip(ep_idx, start)])
    return MiniBatch(obs=obs, next_obs=next_obs, actions=gather("actions"),
                     logp_old=gather("logps"), advantages=gather("advantages"),
                     returns=gather("returns"), h0=h0, c0=c0)


# ---------------------------------------------------------------------------
# binary trace container

_TRACE_MAGIC = b"SGTR"
_TRACE_VERSION = 1

_FIELDS = ("obs", "actions", "rewards", "dones", "values", "logps", "h0", "c0",
           "advantages", "returns")


def save_trace(episodes, path):
    """Write episodes to a compact, checksummed binary container."""
    arrays = {}
    meta = []
    for i, ep in enumerate(episodes):
        meta.append({"episode_idx": ep.episode_idx, "mode": ep.mode})
        for f in _FIELDS:
            v = getattr(ep, f)
            if v is not None:
                arrays[f"ep{i}/{f}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = zlib.compress(buf.getvalue(), level=6)
    header = json.dumps({"version": _TRACE_VERSION, "episodes": meta}).encode()
    body = (_TRACE_MAGIC + _TRACE_VERSION.to_bytes(4, "little")
            + len(header).to_bytes(8, "little") + header
            + len(payload).to_bytes(8, "little") + payload)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_trace(path):
    """Read a trace written by save_trace, verifying its checksum."""
    raw = open(path, "rb").read()
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("trace checksum mismatch (file corrupted)")
    if body[:4] != _TRACE_MAGIC:
        raise ValueError("not a trace file")
    version = int.from_bytes(body[4:8], "little")
    if version != _TRACE_VERSION:
        raise ValueError(f"unsupported trace version {version}")
    hlen = int.from_bytes(body[8:16], "little")
    header = json.loads(body[16:16 + hlen].decode())
    plen_at = 16 + hlen
    plen = int.from_bytes(body[plen_at:plen_at + 8], "little")
    payload = zlib.decompress(body[plen_at + 8:plen_at + 8 + plen])
    npz = np.load(io.BytesIO(payload))
    episodes = []
    for i, meta in enumerate(header["episodes"]):
        kw = {f: npz[f"ep{i}/{f}"] for f in _FIELDS if f"ep{i}/{f}" in npz.files}
        episodes.append(EpisodeRecord(episode_idx=meta["episode_idx"],
                                      mode=meta["mode"], **kw))
    return episodes
