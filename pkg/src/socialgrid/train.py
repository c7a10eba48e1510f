"""Optimization: PPO-clip with value / entropy / auxiliary losses, a KL-guarded
mini-batch loop with bit-exact revert, and behavior cloning.

Update loop per rollout batch (defaults from the hyperparameter table): up to
20 mini-batches of 512 windows x 16 steps; stored hidden states and
advantages are recomputed every 2 mini-batches. Each mini-batch's sampled KL
estimate (vs the rollout policy) is computed before its gradient step: above
the hard limit (0.03) the whole update reverts bit-exactly, above the target
(0.01) iteration stops early without applying that mini-batch. Non-finite
losses or gradients also revert.

The total loss is L_pi + c_V * L_V + c_aux * L_aux - c_ent * L_ent with
c_V=0.1, c_aux=3, c_ent=1e-5.

Behavior cloning minimizes mean NLL of expert actions through the full
recurrent trunk; only trunk and policy-head parameters are updated.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .nets import AuxMode, HiddenState
from .rollout import refresh_batch, sample_minibatch
from .seeding import substream

__all__ = [
    "PPOConfig", "LossBreakdown", "UpdateStats",
    "ppo_clip_loss", "value_loss", "entropy_bonus", "aux_loss", "approx_kl",
    "ppo_update", "bc_loss", "bc_train",
]


@dataclass
class PPOConfig:
    clip_ratio: float = 0.2
    kl_target: float = 0.01
    kl_hard_limit: float = 0.03
    minibatches_per_batch: int = 20
    refresh_interval: int = 2
    gamma: float = 0.993
    lam: float = 0.97
    c_value: float = 0.1
    c_entropy: float = 1e-5
    c_aux: float = 3.0
    learning_rate: float = 1e-4
    n_windows: int = 512
    window_len: int = 16
    normalize_advantages: bool = False

    def __post_init__(self):
        if not 0 < self.kl_target < self.kl_hard_limit:
            raise ValueError("need 0 < kl_target < kl_hard_limit")
        for c in (self.c_value, self.c_entropy, self.c_aux):
            if c < 0:
                raise ValueError("loss coefficients must be >= 0")


@dataclass
class LossBreakdown:
    policy_loss: float
    value_loss: float
    entropy: float
    aux_loss: float
    approx_kl: float
    applied: bool
    c_value: float = 0.1
    c_aux: float = 3.0
    c_entropy: float = 1e-5
    total: float = field(init=False)

    def __post_init__(self):
        self.total = assemble_total(self.policy_loss, self.value_loss,
                                    self.entropy, self.aux_loss,
                                    self.c_value, self.c_aux, self.c_entropy)


def assemble_total(policy, value, entropy, aux,
                   c_value=0.1, c_aux=3.0, c_entropy=1e-5):
    """The logged-total assembly; tests recheck rows against this expression."""
    return policy + c_value * value + c_aux * aux - c_entropy * entropy


@dataclass
class UpdateStats:
    rows: list
    minibatches_applied: int
    early_stopped: bool
    aborted: bool


# ---------------------------------------------------------------------------
# loss pieces (Tensor in, Tensor out; constants lifted automatically)

def ppo_clip_loss(logp_new, logp_old, advantages, eps):
    """-mean(min(ratio * A, clip(ratio, 1-eps, 1+eps) * A))."""
    ratio = ad.exp(ad.sub(logp_new, logp_old))
    unclipped = ad.mul(ratio, advantages)
    clipped = ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), advantages)
    return ad.neg(ad.tmean(ad.minimum(unclipped, clipped)))


def value_loss(values, returns):
    err = ad.sub(values, returns)
    return ad.tmean(ad.mul(err, err))


def entropy_bonus(logits):
    """Mean categorical entropy over all leading dimensions."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.constant(logits)
    p = ad.softmax(logits)
    lp = ad.log_softmax(logits)
    per_row = ad.neg(ad.tsum(ad.mul(p, lp), axis=logits.data.ndim - 1))
    return ad.tmean(per_row)


def aux_loss(predictions, targets):
    """Mean absolute error over every step and pixel."""
    return ad.tmean(ad.absolute(ad.sub(predictions, targets)))


def approx_kl(logp_old, logp_new):
    """Sampled KL(rollout || current) estimator: mean(logp_old - logp_new)."""
    logp_new = logp_new.data if isinstance(logp_new, ad.Tensor) else logp_new
    return float(np.mean(np.asarray(logp_old) - np.asarray(logp_new)))


# ---------------------------------------------------------------------------
# the PPO update

def _window_forward(net, mb, need_aux):
    """Run the trunk over a minibatch of windows; returns stacked tensors."""
    N, L = mb.actions.shape
    h = ad.constant(mb.h0)
    c = ad.constant(mb.c0)
    hidden = HiddenState(h, c)
    lps, vals, logits_steps, preds = [], [], [], []
    for t in range(L):
        emb, hidden = net.trunk_forward(mb.obs[:, t], hidden)
        logits = net.policy_logits(emb)
        lp = ad.gather_last(ad.log_softmax(logits), mb.actions[:, t])
        lps.append(ad.reshape(lp, (N, 1)))
        vals.append(ad.reshape(net.value(emb), (N, 1)))
        logits_steps.append(ad.reshape(logits, (N, 1, logits.data.shape[-1])))
        if need_aux:
            pred = net.aux_forward(emb, mb.actions[:, t])
            preds.append(ad.reshape(pred, (N, 1) + pred.data.shape[1:]))
    logp_new = ad.concat(lps, axis=1)
    values = ad.concat(vals, axis=1)
    logits_all = ad.concat(logits_steps, axis=1)
    pred_all = ad.concat(preds, axis=1) if need_aux else None
    return logp_new, values, logits_all, pred_all


def _minibatch_losses(net, mb, config):
    need_aux = net.mode != AuxMode.NONE
    logp_new, values, logits_all, pred_all = _window_forward(net, mb, need_aux)
    advantages = mb.advantages
    if config.normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    l_pi = ppo_clip_loss(logp_new, mb.logp_old, advantages, config.clip_ratio)
    l_v = value_loss(values, mb.returns)
    l_ent = entropy_bonus(logits_all)
    if need_aux:
        target = mb.next_obs if net.mode == AuxMode.PRED else mb.obs
        l_aux = aux_loss(pred_all, ad.constant(target))
    else:
        l_aux = ad.constant(0.0)
    total = ad.add(ad.add(l_pi, ad.mul(l_v, config.c_value)),
                   ad.sub(ad.mul(l_aux, config.c_aux),
                          ad.mul(l_ent, config.c_entropy)))
    kl = approx_kl(mb.logp_old, logp_new)
    return total, kl, (float(l_pi.data), float(l_v.data),
                       float(l_ent.data), float(l_aux.data))


def ppo_update(batch, network, optimizer, config, master_seed=0, update_idx=0):
    """One KL-guarded PPO update over a collected batch.

    Snapshots parameters and optimizer state first; a KL estimate above the
    hard limit (or a non-finite loss/gradient) restores the snapshot
    bit-exactly and aborts. Crossing the KL target merely stops iteration,
    without applying the offending mini-batch.
    """
    params = network.param_list()
    param_snap = network.snapshot()
    opt_snap = optimizer.snapshot()
    rng = substream(master_seed, "mb", update_idx)
    rows = []
    applied = 0
    early = aborted = False

    for mb_i in range(config.minibatches_per_batch):
        if mb_i > 0 and mb_i % config.refresh_interval == 0:
            refresh_batch(batch, network)
        mb = sample_minibatch(batch, rng, config.n_windows, config.window_len)
        ad.zero_grads(params)
        try:
            with ad.Tape() as tape:
                total, kl, parts = _minibatch_losses(network, mb, config)
            if not np.isfinite(total.data) or kl > config.kl_hard_limit:
                rows.append(LossBreakdown(*parts, approx_kl=kl, applied=False,
                                          c_value=config.c_value, c_aux=config.c_aux,
                                          c_entropy=config.c_entropy))
                aborted = True
                break
            if kl > config.kl_target:
                rows.append(LossBreakdown(*parts, approx_kl=kl, applied=False,
                                          c_value=config.c_value, c_aux=config.c_aux,
                                          c_entropy=config.c_entropy))
                early = True
                break
            ad.reverse_pass(tape, total)
            optimizer.step()
        except FloatingPointError:
            aborted = True
            break
        finally:
            ad.zero_grads(params)
        applied += 1
        rows.append(LossBreakdown(*parts, approx_kl=kl, applied=True,
                                  c_value=config.c_value, c_aux=config.c_aux,
                                  c_entropy=config.c_entropy))

    if aborted:
        network.restore(param_snap)
        optimizer.restore(opt_snap)
    return UpdateStats(rows=rows, minibatches_applied=applied,
                       early_stopped=early, aborted=aborted)


# ---------------------------------------------------------------------------
# behavior cloning

def bc_loss(logits, expert_actions):
    """Mean negative log-likelihood of expert actions under the policy."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.constant(logits)
    lp = ad.gather_last(ad.log_softmax(logits), np.asarray(expert_actions))
    return ad.neg(ad.tmean(lp))


def _bc_episode_group_loss(net, group):
    """NLL through the recurrent trunk for equal-length demo episodes."""
    obs = np.stack([ep.obs[:ep.length] for ep in group])
    actions = np.stack([ep.actions for ep in group])
    N, L = actions.shape
    hidden = HiddenState(batch=N)
    logits_steps = []
    for t in range(L):
        emb, hidden = net.trunk_forward(obs[:, t], hidden)
        logits = net.policy_logits(emb)
        logits_steps.append(ad.reshape(logits, (N, 1, logits.data.shape[-1])))
    return bc_loss(ad.concat(logits_steps, axis=1), actions)


def bc_train(dataset, network, epochs, lr, master_seed=0, batch_episodes=8):
    """Adam on bc_loss over demo episodes; value and aux heads stay untouched.

    Returns (network, per-step mean losses).
    """
    if not dataset:
        raise ValueError("empty demonstration dataset")
    params = network.trainable_subset(include_heads=("policy",))
    opt = Adam(params, lr=lr)
    history = []
    for epoch in range(epochs):
        rng = substream(master_seed, "bc", epoch)
        order = rng.permutation(len(dataset))
        by_len = {}
        for i in order:
            by_len.setdefault(dataset[i].length, []).append(dataset[i])
        for eps in by_len.values():
            for k in range(0, len(eps), batch_episodes):
                group = eps[k:k + batch_episodes]
                ad.zero_grads(params)
                with ad.Tape() as tape:
                    loss = _bc_episode_group_loss(network, group)
                ad.reverse_pass(tape, loss)
                opt.step()
                ad.zero_grads(params)
                history.append(float(loss.data))
    return network, history
