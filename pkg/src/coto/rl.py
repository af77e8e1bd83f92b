"""PPO (clipped surrogate + GAE) and behavioral-cloning updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, adam_step, clip_by_global_norm
from .policy import UNIT_EPS, PolicyParams, evaluate

RL, TO = "RL", "TO"


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    rollout: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 < self.lambda_gae <= 1:
            raise ValueError("ppo.gamma and ppo.lambda_gae must be in (0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("ppo.clip_eps must be > 0")
        if self.epochs < 1 or self.minibatch < 1 or self.rollout < 1:
            raise ValueError("ppo.epochs, ppo.minibatch and ppo.rollout must be >= 1")


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 10
    minibatch: int = 64
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    accumulate: bool = False  # keep D_SL across update phases instead of clearing it

    def __post_init__(self):
        if self.epochs < 1 or self.minibatch < 1 or not self.lr > 0:
            raise ValueError("bc.epochs and bc.minibatch must be >= 1 and bc.lr > 0")


@dataclass
class Transition:
    obs: np.ndarray
    action_unit: np.ndarray
    log_prob_old: float
    reward: float
    value_old: float
    done_flag: bool
    segment_id: int
    source: str = RL


@dataclass
class SlPair:
    obs: np.ndarray
    expert_action_unit: np.ndarray

    def __post_init__(self):
        self.expert_action_unit = np.clip(self.expert_action_unit, UNIT_EPS, 1.0 - UNIT_EPS)


@dataclass
class Optimizers:
    actor: AdamState
    critic: AdamState

    @classmethod
    def for_policy(cls, params: PolicyParams, lr: float = 3e-4) -> "Optimizers":
        return cls(AdamState.for_params(params.actor.params, lr=lr), AdamState.for_params(params.critic.params, lr=lr))


class UpdateAborted(RuntimeError):
    pass


def compute_gae(rewards, values, segment_ids, bootstrap, gamma: float, lam: float):
    """GAE run independently on each contiguous segment.

    ``bootstrap`` maps segment id -> value of the state following the
    segment's last transition (0 for a true terminal).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    adv = np.zeros(n)
    if n == 0:
        return adv, adv.copy()
    last = 0.0
    for t in reversed(range(n)):
        seg = segment_ids[t]
        if t == n - 1 or segment_ids[t + 1] != seg:
            next_value, last = float(bootstrap[seg]), 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + values


def clipped_surrogate(ratio, adv, clip_eps):
    """Per-sample min(r A, clip(r) A) and its derivative w.r.t. r."""
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    s1 = ratio * adv
    s2 = clipped * adv
    use_unclipped = s1 <= s2
    return np.where(use_unclipped, s1, s2), np.where(use_unclipped, adv, 0.0)


def ppo_loss(params: PolicyParams, obs, actions, logp_old, adv, returns, cfg: PpoConfig, with_grads=True):
    """Loss = -L_clip + c_v * 0.5 * mean((V - R)^2) - c_e * mean(H), plus gradients."""
    n = len(adv)
    ev = evaluate(params, obs, actions)
    ratio = np.exp(ev.log_prob - logp_old)
    surr, d_surr_d_ratio = clipped_surrogate(ratio, adv, cfg.clip_eps)
    vf_err = ev.value - returns
    stats = {
        "surrogate": float(surr.mean()),
        "value_loss": float(0.5 * np.mean(vf_err**2)),
        "entropy": float(ev.entropy.mean()),
        "kl": float(np.mean(logp_old - ev.log_prob)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    loss = -stats["surrogate"] + cfg.value_coef * stats["value_loss"] - cfg.entropy_coef * stats["entropy"]
    if not with_grads:
        return loss, stats, None, None
    # d ratio / d logp = ratio
    d_logp = -(d_surr_d_ratio * ratio) / n
    d_ent = np.full(n, -cfg.entropy_coef / n) if cfg.entropy_coef else None
    g_actor = ev.actor_grads(params, d_log_prob=d_logp, d_entropy=d_ent)
    g_critic = ev.critic_grads(params, cfg.value_coef * vf_err / n)
    return loss, stats, g_actor, g_critic


def bc_loss(params: PolicyParams, obs, expert, with_grads=True):
    """Mean over samples of the squared error between expert action and policy mode (unit box)."""
    n = len(expert)
    ev = evaluate(params, obs)
    err = expert - ev.mode
    loss = float(np.mean(np.sum(err**2, axis=-1)))
    if not with_grads:
        return loss, None
    return loss, ev.actor_grads(params, d_mode=-2.0 * err / n)


def _snapshot(params: PolicyParams):
    return [p.copy() for p in params.actor.params], [p.copy() for p in params.critic.params]


def _restore(params: PolicyParams, snap):
    for p, s in zip(params.actor.params, snap[0]):
        p[...] = s
    for p, s in zip(params.critic.params, snap[1]):
        p[...] = s
    params.actor.bump()
    params.critic.bump()


def _minibatches(n, size, rng):
    idx = rng.permutation(n)
    for start in range(0, n, size):
        yield idx[start : start + size]


def ppo_update(params: PolicyParams, opt: Optimizers, batch: dict, cfg: PpoConfig, rng: np.random.Generator) -> dict:
    """K epochs of shuffled minibatch Adam steps on the clipped-surrogate loss.

    ``batch`` holds arrays obs, actions, logp_old, advantages, returns.
    Advantages are standardized over the whole batch when it has more than one
    sample. A non-finite loss restores the pre-update parameters and raises
    ``UpdateAborted``.
    """
    obs = np.asarray(batch["obs"], dtype=float)
    actions = np.asarray(batch["actions"], dtype=float)
    logp_old = np.asarray(batch["logp_old"], dtype=float)
    returns = np.asarray(batch["returns"], dtype=float)
    adv = np.asarray(batch["advantages"], dtype=float)
    n = len(adv)
    if n == 0:
        raise ValueError("ppo_update needs at least one transition")
    if cfg.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    snap = _snapshot(params)
    acc = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0, "clip_frac": 0.0, "grad_norm": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        for mb in _minibatches(n, cfg.minibatch, rng):
            loss, stats, ga, gc = ppo_loss(params, obs[mb], actions[mb], logp_old[mb], adv[mb], returns[mb], cfg)
            if not math.isfinite(loss):
                _restore(params, snap)
                raise UpdateAborted(f"non-finite PPO loss {loss}")
            grads, norm = clip_by_global_norm(ga + gc, cfg.max_grad_norm)
            adam_step(params.actor.params, grads[: len(ga)], opt.actor)
            adam_step(params.critic.params, grads[len(ga) :], opt.critic)
            params.actor.bump()
            params.critic.bump()
            for k in stats:
                acc[k] += stats[k]
            acc["grad_norm"] += norm
            count += 1
    return {k: v / count for k, v in acc.items()} | {"n": n}


def bc_update(params: PolicyParams, opt: Optimizers, pairs_obs, pairs_expert, cfg: BcConfig, rng) -> dict:
    """K epochs of minibatch Adam steps on the mode-regression loss; the critic is untouched."""
    obs = np.asarray(pairs_obs, dtype=float)
    expert = np.asarray(pairs_expert, dtype=float)
    n = len(expert)
    if n == 0:
        raise ValueError("bc_update needs at least one pair")
    snap = _snapshot(params)
    total, count = 0.0, 0
    for _ in range(cfg.epochs):
        for mb in _minibatches(n, cfg.minibatch, rng):
            loss, ga = bc_loss(params, obs[mb], expert[mb])
            if not math.isfinite(loss):
                _restore(params, snap)
                raise UpdateAborted(f"non-finite BC loss {loss}")
            ga, _ = clip_by_global_norm(ga, cfg.max_grad_norm)
            adam_step(params.actor.params, ga, opt.actor)
            params.actor.bump()
            total += loss
            count += 1
    return {"bc_loss": total / count, "n": n}


@dataclass
class Buffers:
    """D_PPO and D_SL for one update phase."""

    ppo: list = field(default_factory=list)
    sl: list = field(default_factory=list)
    # segment id -> observation following the segment's last RL step
    seg_next_obs: dict = field(default_factory=dict)
    seg_terminal: dict = field(default_factory=dict)

    def clear(self, keep_sl: bool = False):
        self.ppo.clear()
        self.seg_next_obs.clear()
        self.seg_terminal.clear()
        if not keep_sl:
            self.sl.clear()

    def ppo_batch(self, params: PolicyParams, cfg: PpoConfig) -> dict:
        tr = self.ppo
        seg_ids = [t.segment_id for t in tr]
        segs = sorted(set(seg_ids))
        boot = {}
        if segs:
            nxt = np.array([self.seg_next_obs[s] for s in segs])
            vals = params.critic(nxt)[:, 0]
            for s, v in zip(segs, vals):
                boot[s] = 0.0 if self.seg_terminal.get(s, False) else float(v)
        adv, ret = compute_gae([t.reward for t in tr], [t.value_old for t in tr], seg_ids, boot, cfg.gamma, cfg.lambda_gae)
        return {
            "obs": np.array([t.obs for t in tr]),
            "actions": np.array([t.action_unit for t in tr]),
            "logp_old": np.array([t.log_prob_old for t in tr]),
            "advantages": adv,
            "returns": ret,
        }
