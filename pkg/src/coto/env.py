"""CarFlagRun: drive to a flag that relocates whenever the car reaches it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import plant
from .plant import CarState, PlantConfig, wrap_angle

OBS_DIM = 7
ACT_DIM = 2


@dataclass(frozen=True)
class EnvConfig:
    goal_radius: float = 0.2
    goal_square_half: float = 5.0
    episode_seconds: float = 10.0
    shaping_gamma: float = 0.99
    rng_seed: int = 0

    def __post_init__(self):
        if not self.goal_radius > 0:
            raise ValueError("env.goal_radius must be > 0")
        if not 0 < self.shaping_gamma <= 1:
            raise ValueError("env.shaping_gamma must be in (0, 1]")
        if not self.goal_square_half > 0 or not self.episode_seconds > 0:
            raise ValueError("env.goal_square_half and env.episode_seconds must be > 0")


@dataclass(frozen=True)
class GoalSpec:
    x_g: float
    y_g: float

    def heading_from(self, state: CarState) -> float:
        """Goal heading used by the optimizer: direction from the car to the flag."""
        return math.atan2(self.y_g - state.y_b, self.x_g - state.x_b)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    goal_reached: bool


class EpisodeDoneError(RuntimeError):
    pass


def distance(state: CarState, goal: GoalSpec) -> float:
    return math.hypot(state.x_b - goal.x_g, state.y_b - goal.y_g)


def potential(state: CarState, goal: GoalSpec) -> float:
    return -distance(state, goal)


def shaped_reward(prev: CarState, new: CarState, goal: GoalSpec, gamma: float) -> float:
    return gamma * potential(new, goal) - potential(prev, goal)


def observe(state: CarState, goal: GoalSpec, pcfg: PlantConfig) -> np.ndarray:
    """7-vector: distance, bearing, steering angle, xdot, ydot, yaw rate, steer rate."""
    bearing = wrap_angle(math.atan2(goal.y_g - state.y_b, goal.x_g - state.x_b) - state.theta_b)
    xdot, ydot, yaw_rate = state.body_rates(pcfg)
    return np.array(
        [
            distance(state, goal),
            bearing,
            state.theta_f_act,
            xdot,
            ydot,
            yaw_rate,
            state.steer_rate(pcfg),
        ]
    )


class CarFlagRun:
    def __init__(self, cfg: EnvConfig | None = None, plant_cfg: PlantConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.plant_cfg = plant_cfg or PlantConfig()
        self.episode_len = int(round(self.cfg.episode_seconds / self.plant_cfg.dt))
        self.rng = np.random.default_rng(self.cfg.rng_seed)
        self.state = CarState()
        self.goal = GoalSpec(0.0, 0.0)
        self.t = 0
        self.goals_reached = 0
        self.done = True

    def _sample_goal(self) -> GoalSpec:
        half = self.cfg.goal_square_half
        while True:
            gx, gy = self.rng.uniform(-half, half, size=2)
            goal = GoalSpec(float(gx), float(gy))
            if distance(self.state, goal) > self.cfg.goal_radius:
                return goal

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = CarState()
        self.t = 0
        self.goals_reached = 0
        self.done = False
        self.goal = self._sample_goal()
        return self.observation()

    def observation(self) -> np.ndarray:
        return observe(self.state, self.goal, self.plant_cfg)

    @property
    def steps_left(self) -> int:
        return self.episode_len - self.t

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        prev = self.state
        self.state = plant.step(prev, action, self.plant_cfg)
        # reward is always scored against the goal that was active during the step
        reward = shaped_reward(prev, self.state, self.goal, self.cfg.shaping_gamma)
        reached = distance(self.state, self.goal) <= self.cfg.goal_radius
        if reached:
            self.goals_reached += 1
            self.goal = self._sample_goal()
        self.t += 1
        self.done = self.t >= self.episode_len
        return StepResult(self.observation(), reward, self.done, reached)

    def peek_reward(self, action, saved: CarState | None = None) -> float:
        """One-step shaped reward of ``action`` without committing it."""
        start = plant.restore(saved) if saved is not None else self.state
        nxt = plant.step(start, action, self.plant_cfg)
        return shaped_reward(start, nxt, self.goal, self.cfg.shaping_gamma)
