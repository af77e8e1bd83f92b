"""Flat ``section.key = value`` run configuration.

A config file is plain text, one assignment per line, ``#`` comments allowed::

    arm = coto_ppo
    total_timesteps = 300000
    seeds = 0,1,2
    plant.dt = 0.05
    ppo.lr = 3e-4

Command-line ``--set key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..cooperative import CotoConfig, RunSettings
from ..env import EnvConfig
from ..plant import PlantConfig
from ..rl import BcConfig, PpoConfig
from ..trajopt import TOConfig

ARMS = ("pure_ppo", "pure_to", "coto_ppo", "coto_policy_only", "coto_pure_ppo")

# arm -> (training flags, evaluation flags); None means the arm has no training phase
ARM_FLAGS = {
    "pure_ppo": (CotoConfig(to_enabled=False), CotoConfig(to_enabled=False)),
    "pure_to": (None, CotoConfig(rl_enabled=False)),
    "coto_ppo": (CotoConfig(), CotoConfig()),
    "coto_policy_only": (CotoConfig(), CotoConfig(to_enabled=False)),
    "coto_pure_ppo": (CotoConfig(to_enabled=False), CotoConfig()),
}

SECTIONS = {"plant": PlantConfig, "env": EnvConfig, "to": TOConfig, "ppo": PpoConfig, "bc": BcConfig, "coto": CotoConfig}
# gate flags come from the arm, only the look-ahead is user-settable
COTO_KEYS = {"horizon_h"}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per offending field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class EvalSettings:
    trials: int = 100
    mode: str = "det"
    workers: int = 1


@dataclass
class RunConfig:
    arm: str = "coto_ppo"
    total_timesteps: int = 300_000
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"
    checkpoint_every: int = 50
    plant: PlantConfig = field(default_factory=PlantConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    to: TOConfig = field(default_factory=TOConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    horizon_h: int = 1
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        problems = []
        if self.arm not in ARMS:
            problems.append(f"arm: {self.arm!r} is not one of {', '.join(ARMS)}")
        if self.total_timesteps < 1:
            problems.append("total_timesteps: must be >= 1")
        if not self.seeds:
            problems.append("seeds: at least one seed is required")
        if self.eval.mode not in ("det", "stoch"):
            problems.append(f"eval.mode: {self.eval.mode!r} is not det or stoch")
        if self.eval.trials < 1 or self.eval.workers < 1:
            problems.append("eval.trials and eval.workers must be >= 1")
        if self.horizon_h < 1:
            problems.append("coto.horizon_h: must be >= 1")
        if problems:
            raise ConfigError(problems)

    @property
    def trains(self) -> bool:
        return ARM_FLAGS[self.arm][0] is not None

    def train_flags(self) -> CotoConfig | None:
        flags = ARM_FLAGS[self.arm][0]
        return replace(flags, horizon_h=self.horizon_h) if flags is not None else None

    def eval_flags(self) -> CotoConfig:
        return replace(ARM_FLAGS[self.arm][1], horizon_h=self.horizon_h)

    def settings(self, seed: int) -> RunSettings:
        return RunSettings(
            plant=self.plant, env=self.env, to=self.to, ppo=self.ppo, bc=self.bc,
            coto=self.train_flags() or self.eval_flags(), total_timesteps=self.total_timesteps,
            seed=seed, checkpoint_every=self.checkpoint_every,
        )

    def to_text(self) -> str:
        """Canonical config text; parsing it back gives an equal config."""
        lines = [
            f"arm = {self.arm}",
            f"total_timesteps = {self.total_timesteps}",
            f"seeds = {','.join(str(s) for s in self.seeds)}",
            f"out = {self.out}",
            f"checkpoint_every = {self.checkpoint_every}",
        ]
        for name in SECTIONS:
            if name == "coto":
                lines.append(f"coto.horizon_h = {self.horizon_h}")
                continue
            obj = getattr(self, name)
            lines += [f"{name}.{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
        lines += [f"eval.{f.name} = {getattr(self.eval, f.name)}" for f in fields(self.eval)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return config_hash(self.to_text())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError([f"{key}: expected a boolean, got {raw!r}"])
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError([f"{key}: expected {type(like).__name__}, got {raw!r}"]) from None
    return raw


def parse_assignments(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc.message if hasattr(exc, 'message') else exc}"]) from None
    return dict(parser["run"])


def build_config(assignments: dict[str, str]) -> RunConfig:
    base = RunConfig()
    top: dict = {}
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    ev: dict = {}
    problems = []
    for key, raw in assignments.items():
        try:
            if key == "seeds":
                top["seeds"] = tuple(int(s) for s in raw.replace(" ", "").split(",") if s)
            elif key == "seed":
                top["seeds"] = (int(raw),)
            elif key in ("arm", "out"):
                top[key] = raw.strip()
            elif key in ("total_timesteps", "checkpoint_every"):
                top[key] = _coerce(raw, getattr(base, key), key)
            elif "." in key:
                sec, name = key.split(".", 1)
                if sec == "eval":
                    if name not in {f.name for f in fields(EvalSettings)}:
                        raise ConfigError([f"{key}: unknown key"])
                    ev[name] = _coerce(raw, getattr(base.eval, name), key)
                elif sec == "coto":
                    if name not in COTO_KEYS:
                        raise ConfigError([f"{key}: unknown key (gate flags follow from the arm)"])
                    top["horizon_h"] = _coerce(raw, base.horizon_h, key)
                elif sec in SECTIONS:
                    default = getattr(base, sec)
                    if name not in {f.name for f in fields(default)}:
                        raise ConfigError([f"{key}: unknown key"])
                    sections[sec][name] = _coerce(raw, getattr(default, name), key)
                else:
                    raise ConfigError([f"{key}: unknown section {sec!r}"])
            else:
                raise ConfigError([f"{key}: unknown key"])
        except ConfigError as exc:
            problems += exc.problems
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r}")
    for sec, vals in sections.items():
        if sec == "coto" or not vals:
            continue
        try:
            top[sec] = replace(getattr(base, sec), **vals)
        except ValueError as exc:
            problems.append(f"{sec}: {exc}")
    if ev:
        top["eval"] = dataclasses.replace(base.eval, **ev)
    if problems:
        raise ConfigError(problems)
    return RunConfig(**top)


def load_config(path: str | Path | None = None, overrides=(), **direct) -> RunConfig:
    """Read ``path`` (if any), then apply ``key=value`` overrides and keyword overrides."""
    assignments = parse_assignments(Path(path).read_text()) if path is not None else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        k, v = item.split("=", 1)
        assignments[k.strip()] = v.strip()
    for k, v in direct.items():
        if v is not None:
            assignments[k] = str(v)
    return build_config(assignments)
