"""``coto`` command line: train, eval, plot, to-solve, gate-probe.

Exit codes: 0 ok, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..cooperative import EVAL_DOMAIN, episode_seed, gate_step
from ..env import CarFlagRun, GoalSpec
from ..plant import CarState
from ..policy import PolicyParams
from ..trajopt import TOModel, TrajectoryOptimizer
from .config import ARMS, ConfigError, load_config
from .experiment import final_checkpoint, load_manifest, run_eval, run_train
from .plots import emit_plots

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args, **direct):
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or (), **direct)


def cmd_train(args) -> int:
    cfg = _config(args, arm=args.arm, seed=args.seed, seeds=args.seeds, out=args.out, total_timesteps=args.timesteps)

    def progress(row):
        if not args.quiet:
            print(f"t={row['timestep']:>7d}  reward={row['ep_reward_mean']:.3f}  rl={row['rl_fraction']:.3f}", flush=True)

    for d in run_train(cfg, progress):
        print(f"wrote {d}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, arm = args.ckpt, args.arm
    cfg_path = args.config
    if args.run is not None:
        m = load_manifest(args.run)
        arm = arm or m["arm"]
        cfg_path = cfg_path or str(Path(args.run) / m["config_file"])
        if "final_checkpoint" in m and ckpt is None:
            ckpt = final_checkpoint(args.run)
    if ckpt is not None and arm is None:
        try:
            arm = load_manifest(Path(ckpt).parent)["arm"]
        except FileNotFoundError:
            arm = "coto_ppo"
    if arm is None:
        raise ConfigError(["arm: pass --arm, --run or --ckpt"])
    cfg = load_config(cfg_path, args.set or (), arm=arm)
    report = run_eval(arm, ckpt, trials=args.trials or cfg.eval.trials, mode=args.mode or cfg.eval.mode,
                      seed=args.seed, workers=args.workers or cfg.eval.workers, cfg=cfg)
    print(report.summary())
    if args.out:
        report.save(args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    for p in emit_plots(args.runs, args.out, args.baseline):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_to_solve(args) -> int:
    cfg = _config(args)
    solver = TrajectoryOptimizer(TOModel.from_plant(cfg.plant), cfg.to)
    x, y, th, steer = args.state
    state = CarState(x, y, th, steer, 0.0, steer)
    _, sol = solver.act(state, GoalSpec(*args.goal))
    print(sol.to_json())
    return EXIT_OK


def cmd_gate_probe(args) -> int:
    cfg = _config(args)
    rng = np.random.default_rng([args.seed, EVAL_DOMAIN])
    params = PolicyParams.load(args.ckpt) if args.ckpt else PolicyParams.init(rng, cfg.plant)
    env = CarFlagRun(cfg.env, cfg.plant)
    env.reset(seed=episode_seed(args.seed, EVAL_DOMAIN, 0))
    solver = TrajectoryOptimizer(TOModel.from_plant(cfg.plant), cfg.to)
    for _ in range(args.steps):
        if env.done:
            break
        d, res, _ = gate_step(env, params, solver, cfg.settings(args.seed).coto, rng, args.mode == "det")
        print(json.dumps({
            "t": env.t, "a_rl": d.a_rl.action_env.tolist(), "a_to": list(d.a_to), "r_rl": d.r_rl, "r_to": d.r_to,
            "chosen": d.chosen, "margin": d.margin, "to_converged": d.to_converged, "reward": res.reward,
        }))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coto", description="Cooperative trajectory optimization + PPO experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    t = sub.add_parser("train", help="train one arm for one or more seeds")
    common(t)
    t.add_argument("--arm", choices=ARMS)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seeds")
    t.add_argument("--out")
    t.add_argument("--timesteps", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an arm over fresh episodes")
    common(e)
    e.add_argument("--ckpt")
    e.add_argument("--run", help="run directory; uses its manifest, config and final checkpoint")
    e.add_argument("--arm", choices=ARMS)
    e.add_argument("--trials", type=int)
    e.add_argument("--mode", choices=("det", "stoch"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int)
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="reward and RL-fraction SVGs from run directories")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--baseline", type=float, help="TO reward mean for the dashed line")
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("to-solve", help="solve one TO problem and dump it as JSON")
    common(s)
    s.add_argument("--state", type=float, nargs=4, default=[0.0, 0.0, 0.0, 0.0], metavar=("X", "Y", "THETA", "STEER"))
    s.add_argument("--goal", type=float, nargs=2, required=True, metavar=("XG", "YG"))
    s.set_defaults(func=cmd_to_solve)

    g = sub.add_parser("gate-probe", help="trace gate decisions from a fresh episode")
    common(g)
    g.add_argument("--ckpt")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=1)
    g.add_argument("--mode", choices=("det", "stoch"), default="stoch")
    g.set_defaults(func=cmd_gate_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
