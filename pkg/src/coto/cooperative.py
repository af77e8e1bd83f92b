"""Cooperative TO + PPO: per-step arbitration by simulated reward, and training.

At each step the optimizer's action and a policy action are both simulated
one step ahead from a plant snapshot; the one with the larger shaped reward is
executed. Policy-chosen steps feed PPO, optimizer-chosen steps feed
behavioral cloning.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plant
from .env import CarFlagRun, EnvConfig, observe, shaped_reward
from .plant import PlantConfig
from .policy import ActionSample, PolicyParams, act_deterministic, act_stochastic
from .rl import (
    RL,
    TO,
    BcConfig,
    Buffers,
    Optimizers,
    PpoConfig,
    SlPair,
    Transition,
    bc_update,
    ppo_update,
)
from .trajopt import TOConfig, TOModel, TrajectoryOptimizer

TRAIN_DOMAIN = 0
EVAL_DOMAIN = 1
ABLATION_DOMAIN = 2

LOG_COLUMNS = (
    "timestep",
    "ep_reward_mean",
    "rl_fraction",
    "mean_gate_margin",
    "to_converged_rate",
    "surrogate",
    "value_loss",
    "entropy",
    "bc_loss",
    "kl",
    "grad_norm",
    "n_ppo",
    "n_sl",
    "episodes",
    "gate_checks",
    "gate_violations",
)
UPDATE_COLUMNS = ("update", "surrogate", "value_loss", "entropy", "kl", "grad_norm", "n_ppo", "n_sl")


class GateInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class CotoConfig:
    horizon_h: int = 1
    gate_enabled: bool = True
    to_enabled: bool = True
    rl_enabled: bool = True

    def __post_init__(self):
        if not (self.to_enabled or self.rl_enabled):
            raise ValueError("at least one of coto.to_enabled / coto.rl_enabled must be true")
        if self.horizon_h < 1:
            raise ValueError("coto.horizon_h must be >= 1")

    @property
    def gated(self) -> bool:
        return self.gate_enabled and self.to_enabled and self.rl_enabled


@dataclass
class GateDecision:
    a_rl: ActionSample | None
    a_to: tuple[float, float] | None
    r_rl: float | None
    r_to: float | None
    chosen: str
    margin: float | None
    to_converged: bool | None = None

    @property
    def action(self):
        return self.a_rl.action_env if self.chosen == RL else np.asarray(self.a_to)


def episode_seed(seed: int, domain: int, episode: int) -> int:
    """Independent env seed per (run seed, domain, episode index)."""
    return int(np.random.SeedSequence([seed, domain, episode]).generate_state(1)[0])


def _policy_action(params, obs, rng, deterministic):
    return act_deterministic(params, obs) if deterministic else act_stochastic(params, obs, rng)


def _rollout_reward_rl(env: CarFlagRun, first: ActionSample, params, rng, deterministic, h) -> float:
    s = plant.snapshot(env.state)
    total = 0.0
    a = first.action_env
    for k in range(h):
        if k > 0:
            a = _policy_action(params, observe(s, env.goal, env.plant_cfg), rng, deterministic).action_env
        nxt = plant.step(s, a, env.plant_cfg)
        total += shaped_reward(s, nxt, env.goal, env.cfg.shaping_gamma)
        s = nxt
    return total


def _rollout_reward_to(env: CarFlagRun, first, solver: TrajectoryOptimizer, h) -> float:
    from .trajopt import first_action, shift_warm_start, solve

    s = plant.snapshot(env.state)
    total = 0.0
    a = first
    warm = solver.warm
    for k in range(h):
        if k > 0:
            sol = solve(solver.problem_for(s, env.goal), shift_warm_start(warm), solver.model, solver.cfg)
            warm = sol
            a = first_action(sol)
        nxt = plant.step(s, a, env.plant_cfg)
        total += shaped_reward(s, nxt, env.goal, env.cfg.shaping_gamma)
        s = nxt
    return total


def decide(
    env: CarFlagRun,
    params: PolicyParams | None,
    solver: TrajectoryOptimizer | None,
    cfg: CotoConfig,
    rng: np.random.Generator | None,
    deterministic: bool = False,
    horizon: int | None = None,
) -> GateDecision:
    """Pick the action to execute; the environment is left untouched."""
    if env.done:
        from .env import EpisodeDoneError

        raise EpisodeDoneError("cannot act in a finished episode")
    h = min(cfg.horizon_h if horizon is None else horizon, env.steps_left)
    if h < 1:
        raise ValueError("horizon must be >= 1")
    a_to = converged = a_rl = None
    if cfg.to_enabled:
        a_to, sol = solver.act(env.state, env.goal)
        converged = sol.converged
    if cfg.rl_enabled:
        a_rl = _policy_action(params, env.observation(), rng, deterministic)
    if not cfg.gated:
        chosen = RL if cfg.rl_enabled else TO
        return GateDecision(a_rl, a_to, None, None, chosen, None, converged)
    if h == 1:
        r_rl = env.peek_reward(a_rl.action_env)
        r_to = env.peek_reward(a_to)
    else:
        r_rl = _rollout_reward_rl(env, a_rl, params, rng, deterministic, h)
        r_to = _rollout_reward_to(env, a_to, solver, h)
    chosen = RL if r_rl >= r_to else TO  # ties go to the policy
    margin = (r_rl - r_to) if chosen == RL else (r_to - r_rl)
    return GateDecision(a_rl, a_to, r_rl, r_to, chosen, margin, converged)


def gate_step(
    env: CarFlagRun,
    params: PolicyParams | None,
    solver: TrajectoryOptimizer | None,
    cfg: CotoConfig,
    rng: np.random.Generator | None,
    deterministic: bool = False,
    horizon: int | None = None,
):
    """Decide, execute the winner on the real env and route the sample.

    Returns ``(decision, step_result, routed)`` where ``routed`` is a
    ``(RL, ActionSample)`` or ``(TO, SlPair)`` tuple.
    """
    obs = env.observation()
    d = decide(env, params, solver, cfg, rng, deterministic, horizon)
    result = env.step(d.action)
    if d.r_to is not None and (horizon or cfg.horizon_h) == 1 and not result.reward >= d.r_to:
        raise GateInvariantError(f"executed reward {result.reward!r} < TO reward {d.r_to!r}")
    if d.chosen == RL:
        routed = (RL, d.a_rl)
    else:
        expert = params.to_unit(d.a_to) if params is not None else None
        routed = (TO, SlPair(obs, expert) if expert is not None else None)
    return d, result, routed


def select_action_horizon(env, params, solver, h: int, rng, deterministic=False, cfg: CotoConfig | None = None):
    """Compare cumulative simulated reward over ``h`` steps; only the first winning action is committed."""
    cfg = cfg or CotoConfig()
    return gate_step(env, params, solver, cfg, rng, deterministic, horizon=h)


@dataclass
class RunSettings:
    plant: PlantConfig = field(default_factory=PlantConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    to: TOConfig = field(default_factory=TOConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    coto: CotoConfig = field(default_factory=CotoConfig)
    total_timesteps: int = 300_000
    seed: int = 0
    checkpoint_every: int = 50


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class Trainer:
    """Algorithm 1 loop: T-step gated rollouts alternating with PPO and BC phases."""

    def __init__(self, settings: RunSettings, out_dir: Path | str | None = None):
        self.s = settings
        self.out_dir = Path(out_dir) if out_dir is not None else None
        root = np.random.SeedSequence([settings.seed, TRAIN_DOMAIN])
        init_ss, act_ss, upd_ss = root.spawn(3)
        self.params = PolicyParams.init(np.random.default_rng(init_ss), settings.plant)
        self.opt = Optimizers.for_policy(self.params, settings.ppo.lr)
        self.opt.actor.lr = settings.ppo.lr
        self.bc_lr = settings.bc.lr
        self.act_rng = np.random.default_rng(act_ss)
        self.upd_rng = np.random.default_rng(upd_ss)
        self.env = CarFlagRun(settings.env, settings.plant)
        self.solver = (
            TrajectoryOptimizer(TOModel.from_plant(settings.plant), settings.to) if settings.coto.to_enabled else None
        )
        self.buffers = Buffers()
        self.timestep = 0
        self.episode = 0
        self.rows: list[dict] = []
        self.update_rows: list[dict] = []
        self.gate_checks = 0
        self.to_solve_time = 0.0
        self._ep_return = 0.0
        self._segment = 0
        self._prev_source = None
        self._new_episode()

    def _new_episode(self):
        self.env.reset(seed=episode_seed(self.s.seed, TRAIN_DOMAIN, self.episode))
        self.episode += 1
        self._ep_return = 0.0
        self._prev_source = None
        if self.solver is not None:
            self.solver.reset()

    def _collect(self, n_steps: int) -> dict:
        cfg = self.s.coto
        ep_returns, margins = [], []
        n_rl = n_conv = n_to_solves = 0
        gated = cfg.gated
        for _ in range(n_steps):
            obs = self.env.observation()
            t0 = time.perf_counter()
            # gate_step raises GateInvariantError if the executed action scores below a_TO
            d, res, (source, item) = gate_step(self.env, self.params, self.solver, cfg, self.act_rng)
            self.to_solve_time += time.perf_counter() - t0
            if gated:
                self.gate_checks += 1
                margins.append(d.margin)
            if d.to_converged is not None:
                n_to_solves += 1
                n_conv += d.to_converged
            self.timestep += 1
            self._ep_return += res.reward
            if source == RL:
                n_rl += 1
                if self._prev_source != RL:
                    self._segment += 1
                self.buffers.ppo.append(
                    Transition(obs, item.action_unit, item.log_prob, res.reward, item.value, res.done,
                               self._segment, RL)
                )
                self.buffers.seg_next_obs[self._segment] = res.obs
            else:
                self.buffers.sl.append(item)
            self._prev_source = d.chosen
            if res.done:
                ep_returns.append(self._ep_return)
                self._new_episode()
        self._prev_source = None  # rollout boundary always closes the segment
        return {
            "ep_returns": ep_returns,
            "rl_fraction": n_rl / n_steps,
            "mean_gate_margin": float(np.mean(margins)) if margins else float("nan"),
            "to_converged_rate": n_conv / n_to_solves if n_to_solves else float("nan"),
        }

    def _update(self) -> dict:
        stats = {"surrogate": float("nan"), "value_loss": float("nan"), "entropy": float("nan"),
                 "kl": float("nan"), "grad_norm": float("nan"), "bc_loss": float("nan")}
        n_ppo, n_sl = len(self.buffers.ppo), len(self.buffers.sl)
        if n_ppo:
            batch = self.buffers.ppo_batch(self.params, self.s.ppo)
            self.opt.actor.lr = self.s.ppo.lr
            st = ppo_update(self.params, self.opt, batch, self.s.ppo, self.upd_rng)
            stats.update({k: st[k] for k in ("surrogate", "value_loss", "entropy", "kl", "grad_norm")})
        if n_sl and self.s.coto.to_enabled and self.s.coto.rl_enabled:
            self.opt.actor.lr = self.bc_lr
            st = bc_update(
                self.params, self.opt, [p.obs for p in self.buffers.sl],
                [p.expert_action_unit for p in self.buffers.sl], self.s.bc, self.upd_rng,
            )
            self.opt.actor.lr = self.s.ppo.lr
            stats["bc_loss"] = st["bc_loss"]
        self.buffers.clear(keep_sl=self.s.bc.accumulate)
        stats["n_ppo"], stats["n_sl"] = n_ppo, n_sl
        return stats

    def run(self, progress=None) -> list[dict]:
        T = self.s.ppo.rollout
        n_updates = math.ceil(self.s.total_timesteps / T)
        for u in range(1, n_updates + 1):
            steps = min(T, self.s.total_timesteps - self.timestep)
            col = self._collect(steps)
            upd = self._update() if self.s.coto.rl_enabled else {
                k: float("nan") for k in ("surrogate", "value_loss", "entropy", "kl", "grad_norm", "bc_loss")
            } | {"n_ppo": 0, "n_sl": 0}
            self.params.steps_trained = self.timestep
            row = {
                "timestep": self.timestep,
                "ep_reward_mean": float(np.mean(col["ep_returns"])) if col["ep_returns"] else float("nan"),
                "rl_fraction": col["rl_fraction"],
                "mean_gate_margin": col["mean_gate_margin"],
                "to_converged_rate": col["to_converged_rate"],
                "surrogate": upd["surrogate"],
                "value_loss": upd["value_loss"],
                "entropy": upd["entropy"],
                "bc_loss": upd["bc_loss"],
                "kl": upd["kl"],
                "grad_norm": upd["grad_norm"],
                "n_ppo": upd["n_ppo"],
                "n_sl": upd["n_sl"],
                "episodes": len(col["ep_returns"]),
                "gate_checks": self.gate_checks,
                "gate_violations": 0,  # a violation aborts the run with GateInvariantError
            }
            self.rows.append(row)
            self.update_rows.append({"update": u, **{k: row[k] for k in UPDATE_COLUMNS[1:]}})
            if self.out_dir is not None:
                self._write_logs()
                if self.s.checkpoint_every and (u % self.s.checkpoint_every == 0 or u == n_updates):
                    self.save_checkpoint()
            if progress is not None:
                progress(row)
        return self.rows

    def checkpoint_path(self) -> Path:
        return self.out_dir / f"ckpt_{self.timestep}.json"

    def save_checkpoint(self) -> Path:
        path = self.checkpoint_path()
        self.params.save(path, {"optimizer": {"actor": self.opt.actor.to_dict(), "critic": self.opt.critic.to_dict()}})
        return path

    def _write_logs(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "train_log.csv").write_text(rows_to_csv(self.rows, LOG_COLUMNS))
        (self.out_dir / "updates.csv").write_text(rows_to_csv(self.update_rows, UPDATE_COLUMNS))


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def train(settings: RunSettings, out_dir=None, progress=None) -> Trainer:
    trainer = Trainer(settings, out_dir)
    trainer.run(progress)
    return trainer


def settings_dict(settings: RunSettings) -> dict:
    return json.loads(json.dumps(asdict(settings)))


def horizon_win_fraction(h: int, seed: int, steps: int = 60, settings: RunSettings | None = None) -> float:
    """RL-win fraction of an untrained policy gating against TO with look-ahead ``h``.

    Policy init, action sampling and the episode's goals depend only on
    ``seed``, so different ``h`` see the same starting conditions.
    """
    s = settings or RunSettings()
    init_ss, act_ss = np.random.SeedSequence([seed, ABLATION_DOMAIN]).spawn(2)
    params = PolicyParams.init(np.random.default_rng(init_ss), s.plant)
    rng = np.random.default_rng(act_ss)
    env = CarFlagRun(s.env, s.plant)
    env.reset(seed=episode_seed(seed, ABLATION_DOMAIN, 0))
    solver = TrajectoryOptimizer(TOModel.from_plant(s.plant), s.to)
    cfg = CotoConfig(horizon_h=h)
    n = min(steps, env.steps_left)
    wins = 0
    for _ in range(n):
        d, _, _ = select_action_horizon(env, params, solver, h, rng, cfg=cfg)
        wins += d.chosen == RL
    return wins / n
