"""Experiment arms: training runs, evaluation protocol and run manifests."""

from __future__ import annotations

import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..cooperative import EVAL_DOMAIN, Trainer, episode_seed, gate_step
from ..env import CarFlagRun
from ..policy import PolicyParams
from ..rl import RL
from ..trajopt import TOModel, TrajectoryOptimizer
from .config import ConfigError, RunConfig, config_hash

POLICY_ARMS = ("pure_ppo", "coto_ppo", "coto_policy_only", "coto_pure_ppo")


@dataclass
class EvalReport:
    arm: str
    mode: str
    trials: int
    seed: int
    rewards: list[float]
    percent_rl: float | None
    wall_time_s: float = 0.0
    checkpoint: str | None = None
    mean: float = field(init=False)
    std: float = field(init=False)
    sem: float = field(init=False)

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float)
        self.mean = float(r.mean())
        self.std = float(r.std(ddof=1)) if len(r) > 1 else 0.0
        self.sem = self.std / math.sqrt(len(r))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        keep = {k: d[k] for k in ("arm", "mode", "trials", "seed", "rewards", "percent_rl", "wall_time_s", "checkpoint")}
        return cls(**keep)

    def summary(self) -> str:
        rl = f"  rl={self.percent_rl:.1f}%" if self.percent_rl is not None else ""
        return f"{self.arm:<17} {self.mode:<5} n={self.trials}  mean={self.mean:.3f}  std={self.std:.3f}  sem={self.sem:.3f}{rl}"


def version_string() -> str:
    """``git describe``-style identifier of the code that produced an artifact."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _eval_trial(job) -> tuple[float, int, int]:
    flags, params_dict, plant_cfg, env_cfg, to_cfg, seed, i, deterministic = job
    params = PolicyParams.from_dict(params_dict) if params_dict is not None else None
    env = CarFlagRun(env_cfg, plant_cfg)
    env.reset(seed=episode_seed(seed, EVAL_DOMAIN, i))
    solver = TrajectoryOptimizer(TOModel.from_plant(plant_cfg), to_cfg) if flags.to_enabled else None
    # separate stream from the goal sampler; never shared with training
    rng = np.random.default_rng([seed, EVAL_DOMAIN, i, 1])
    total, n_rl, n = 0.0, 0, 0
    while not env.done:
        d, res, _ = gate_step(env, params, solver, flags, rng, deterministic)
        total += res.reward
        n_rl += d.chosen == RL
        n += 1
    return total, n_rl, n


def run_eval(
    arm: str,
    checkpoint=None,
    trials: int = 100,
    mode: str = "det",
    seed: int = 0,
    workers: int = 1,
    cfg: RunConfig | None = None,
    params: PolicyParams | None = None,
) -> EvalReport:
    """Run ``trials`` fresh episodes of ``arm`` and summarise the episode rewards.

    Policy arms need ``checkpoint`` (a path) or ``params``. Trials are
    independent; with ``workers > 1`` they run in a process pool and are merged
    by trial index, so the report does not depend on the worker count.
    """
    cfg = cfg if cfg is not None else RunConfig(arm=arm)
    if arm != cfg.arm:
        cfg = replace(cfg, arm=arm)
    if mode not in ("det", "stoch"):
        raise ConfigError([f"mode: {mode!r} is not det or stoch"])
    flags = cfg.eval_flags()
    if arm in POLICY_ARMS and params is None:
        if checkpoint is None:
            raise ConfigError([f"arm {arm} needs a policy checkpoint"])
        params = PolicyParams.load(checkpoint)
    pd = params.to_dict() if (params is not None and flags.rl_enabled) else None
    jobs = [(flags, pd, cfg.plant, cfg.env, cfg.to, seed, i, mode == "det") for i in range(trials)]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_trial, jobs))
    else:
        results = [_eval_trial(j) for j in jobs]
    wall = time.perf_counter() - t0
    gated = flags.gated
    pct = 100.0 * sum(r[1] for r in results) / sum(r[2] for r in results) if gated else None
    return EvalReport(arm, mode, trials, seed, [r[0] for r in results], pct, wall,
                      str(checkpoint) if checkpoint is not None else None)


def _write_manifest(run_dir: Path, cfg: RunConfig, seed: int, wall: float, extra: dict | None = None) -> dict:
    text = replace(cfg, seeds=(seed,), out=str(run_dir)).to_text()
    (run_dir / "config.cfg").write_text(text)
    manifest = {
        "arm": cfg.arm,
        "seed": seed,
        "total_timesteps": cfg.total_timesteps if cfg.trains else 0,
        "config_file": "config.cfg",
        "config_hash": config_hash(text),
        "version": version_string(),
        "wall_time_s": wall,
    }
    manifest.update(extra or {})
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def run_dirs_for(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    if len(cfg.seeds) == 1:
        return [out]
    return [out / f"seed_{s}" for s in cfg.seeds]


def run_train(cfg: RunConfig, progress=None) -> list[Path]:
    """Train (or, for pure_to, evaluate) every seed of ``cfg`` and write artifacts.

    Each run directory gets train_log.csv, updates.csv, ckpt_*.json (trained
    arms) or eval_report.json (pure_to), plus config.cfg and manifest.json.
    """
    dirs = run_dirs_for(cfg)
    for seed, run_dir in zip(cfg.seeds, dirs):
        run_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        if not cfg.trains:
            report = run_eval(cfg.arm, trials=cfg.eval.trials, mode="det", seed=seed, workers=cfg.eval.workers, cfg=cfg)
            report.save(run_dir / "eval_report.json")
            _write_manifest(run_dir, cfg, seed, time.perf_counter() - t0, {"eval_mean": report.mean})
            continue
        trainer = Trainer(cfg.settings(seed), run_dir)
        trainer.run(progress)
        final = trainer.checkpoint_path()
        if not final.exists():
            trainer.save_checkpoint()
        _write_manifest(run_dir, cfg, seed, time.perf_counter() - t0,
                        {"final_checkpoint": final.name, "gate_checks": trainer.gate_checks})
    return dirs


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no manifest.json")
    return json.loads(path.read_text())


def final_checkpoint(run_dir) -> Path:
    m = load_manifest(run_dir)
    if "final_checkpoint" not in m:
        raise FileNotFoundError(f"{run_dir}: arm {m['arm']} has no checkpoint")
    return Path(run_dir) / m["final_checkpoint"]
