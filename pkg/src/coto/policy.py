"""Beta-distribution actor and scalar critic over the CarFlagRun spaces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, digamma, polygamma

from .env import ACT_DIM, OBS_DIM
from .nn import Mlp, sigmoid, softplus
from .plant import PlantConfig

UNIT_EPS = 1e-6
HEAD_FLOOR = 1e-6
HIDDEN = (64, 64)


def action_bounds(cfg: PlantConfig) -> tuple[np.ndarray, np.ndarray]:
    return np.array([-cfg.v_limit, -cfg.steer_limit]), np.array([cfg.v_limit, cfg.steer_limit])


@dataclass
class PolicyParams:
    actor: Mlp
    critic: Mlp
    low: np.ndarray
    high: np.ndarray
    steps_trained: int = 0

    @classmethod
    def init(cls, rng: np.random.Generator, plant_cfg: PlantConfig | None = None, hidden=HIDDEN):
        low, high = action_bounds(plant_cfg or PlantConfig())
        sizes = (OBS_DIM, *hidden)
        acts = ("tanh",) * len(hidden)
        actor = Mlp((*sizes, 2 * ACT_DIM), (*acts, "identity"), rng, hidden_gain=1.0, out_gain=0.01)
        critic = Mlp((*sizes, 1), (*acts, "identity"), rng, hidden_gain=1.0, out_gain=1.0)
        return cls(actor, critic, low, high)

    @property
    def log_scale(self) -> float:
        return float(np.sum(np.log(self.high - self.low)))

    def to_env(self, unit):
        return self.low + np.asarray(unit) * (self.high - self.low)

    def to_unit(self, action_env):
        u = (np.asarray(action_env, dtype=float) - self.low) / (self.high - self.low)
        return np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.actor.copy(), self.critic.copy(), self.low.copy(), self.high.copy(), self.steps_trained)

    def to_dict(self) -> dict:
        return {
            "metadata": {
                "obs_dim": OBS_DIM,
                "act_dim": ACT_DIM,
                "action_low": self.low.tolist(),
                "action_high": self.high.tolist(),
                "steps_trained": self.steps_trained,
            },
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        meta = d["metadata"]
        if meta["obs_dim"] != OBS_DIM or meta["act_dim"] != ACT_DIM:
            raise ValueError("checkpoint has incompatible observation/action dimensions")
        return cls(
            Mlp.from_dict(d["actor"]),
            Mlp.from_dict(d["critic"]),
            np.array(meta["action_low"], dtype=float),
            np.array(meta["action_high"], dtype=float),
            int(meta.get("steps_trained", 0)),
        )

    def save(self, path, extra: dict | None = None):
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ActionSample:
    action_env: np.ndarray
    action_unit: np.ndarray
    log_prob: float
    value: float


def beta_log_pdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def beta_entropy(a, b):
    return betaln(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)


def beta_mode(a, b):
    return (a - 1.0) / (a + b - 2.0)


def beta_variance(a, b):
    return a * b / ((a + b) ** 2 * (a + b + 1.0))


@dataclass
class PolicyEval:
    """Batched evaluation keeping everything needed for the reverse pass.

    ``log_prob`` includes the affine change of variables to the physical box;
    ``entropy`` is the sum of unit-interval Beta entropies.
    """

    alpha: np.ndarray
    beta: np.ndarray
    value: np.ndarray
    mode: np.ndarray
    x: np.ndarray | None = None
    log_prob: np.ndarray | None = None
    entropy: np.ndarray | None = None
    raw: np.ndarray = field(default=None, repr=False)
    actor_tape: object = field(default=None, repr=False)
    critic_tape: object = field(default=None, repr=False)

    def actor_grads(self, params: PolicyParams, d_log_prob=None, d_entropy=None, d_mode=None):
        a, b = self.alpha, self.beta
        da = np.zeros_like(a)
        db = np.zeros_like(b)
        if d_log_prob is not None:
            psi_ab = digamma(a + b)
            dlp = np.asarray(d_log_prob, dtype=float)[..., None]
            da += dlp * (np.log(self.x) - digamma(a) + psi_ab)
            db += dlp * (np.log1p(-self.x) - digamma(b) + psi_ab)
        if d_entropy is not None:
            tri_ab = polygamma(1, a + b)
            de = np.asarray(d_entropy, dtype=float)[..., None]
            da += de * (-(a - 1.0) * polygamma(1, a) + (a + b - 2.0) * tri_ab)
            db += de * (-(b - 1.0) * polygamma(1, b) + (a + b - 2.0) * tri_ab)
        if d_mode is not None:
            dm = np.asarray(d_mode, dtype=float)
            denom = (a + b - 2.0) ** 2
            da += dm * (b - 1.0) / denom
            db += dm * -(a - 1.0) / denom
        # alpha = 1 + softplus(raw[:, :2]), beta = 1 + softplus(raw[:, 2:])
        d_raw = np.concatenate([da, db], axis=-1) * sigmoid(self.raw)
        return params.actor.backward(self.actor_tape, d_raw)

    def critic_grads(self, params: PolicyParams, d_value):
        d = np.asarray(d_value, dtype=float)[..., None]
        return params.critic.backward(self.critic_tape, d)


def heads(params: PolicyParams, obs):
    raw, tape = params.actor.forward(obs)
    # the floor keeps alpha, beta > 1 once softplus underflows for very negative logits
    alpha = 1.0 + np.maximum(softplus(raw[..., :ACT_DIM]), HEAD_FLOOR)
    beta = 1.0 + np.maximum(softplus(raw[..., ACT_DIM:]), HEAD_FLOOR)
    return alpha, beta, raw, tape


def evaluate(params: PolicyParams, obs, action_unit=None) -> PolicyEval:
    alpha, beta, raw, atape = heads(params, obs)
    value, ctape = params.critic.forward(obs)
    ev = PolicyEval(alpha, beta, value[..., 0], beta_mode(alpha, beta), raw=raw, actor_tape=atape, critic_tape=ctape)
    if action_unit is not None:
        x = np.clip(np.asarray(action_unit, dtype=float), UNIT_EPS, 1.0 - UNIT_EPS)
        ev.x = x
        ev.log_prob = beta_log_pdf(x, alpha, beta).sum(axis=-1) - params.log_scale
        ev.entropy = beta_entropy(alpha, beta).sum(axis=-1)
    return ev


def log_prob_and_entropy(params: PolicyParams, obs, action_unit):
    ev = evaluate(params, obs, action_unit)
    return ev.log_prob, ev.entropy, ev.value


def _sample(params: PolicyParams, obs, unit) -> ActionSample:
    ev = evaluate(params, obs, unit)
    x = ev.x
    return ActionSample(params.to_env(x), x, float(ev.log_prob), float(ev.value))


def act_stochastic(params: PolicyParams, obs, rng: np.random.Generator) -> ActionSample:
    alpha, beta, _, _ = heads(params, obs)
    return _sample(params, obs, rng.beta(alpha, beta))


def act_deterministic(params: PolicyParams, obs) -> ActionSample:
    alpha, beta, _, _ = heads(params, obs)
    return _sample(params, obs, beta_mode(alpha, beta))


def value(params: PolicyParams, obs):
    return params.critic(obs)[..., 0]
