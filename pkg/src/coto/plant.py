"""Ground-truth car plant: actuator lag + no-slip/no-skid kinematic bicycle."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


class InvalidStateError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    if w == -math.pi:
        return math.pi
    return w


@dataclass(frozen=True)
class PlantConfig:
    wheelbase: float = 0.325
    v_limit: float = 2.0
    steer_limit: float = 0.6
    tau_v: float = 0.15
    steer_rate_limit: float = 4.0
    dt: float = 0.05

    def __post_init__(self):
        for name in ("wheelbase", "v_limit", "steer_limit", "tau_v", "steer_rate_limit", "dt"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"plant.{name} must be finite and > 0, got {val!r}")
        if self.steer_limit >= math.pi / 2:
            raise ValueError("plant.steer_limit must be < pi/2")


@dataclass(frozen=True)
class CarState:
    """Pose, steering setpoint and actuator outputs.

    ``theta_f`` is the steering setpoint held by the position controller
    (last clamped command); ``theta_f_act`` is the wheel angle actually reached.
    """

    x_b: float = 0.0
    y_b: float = 0.0
    theta_b: float = 0.0
    theta_f: float = 0.0
    v_act: float = 0.0
    theta_f_act: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x_b, self.y_b, self.theta_b, self.theta_f, self.v_act, self.theta_f_act)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    def body_rates(self, cfg: PlantConfig) -> tuple[float, float, float]:
        """World-frame (xdot, ydot) and yaw rate implied by the actuator state."""
        v = self.v_act
        return (
            v * math.cos(self.theta_b),
            v * math.sin(self.theta_b),
            v / cfg.wheelbase * math.tan(self.theta_f_act),
        )

    def steer_rate(self, cfg: PlantConfig) -> float:
        """Rate the steering servo is currently applying toward its setpoint."""
        r = (self.theta_f - self.theta_f_act) / cfg.dt
        return min(max(r, -cfg.steer_rate_limit), cfg.steer_rate_limit)


def clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def step(state: CarState, action, cfg: PlantConfig) -> CarState:
    """Advance the plant by one control period ``cfg.dt``.

    Commands saturate silently. Actuators update first (exact exponential
    speed lag, rate-limited steering), then the pose integrates with the new
    actuator values (semi-implicit Euler). Heading is updated before the
    translation so the displacement lies exactly along the new body axis.
    """
    v_cmd, steer_cmd = float(action[0]), float(action[1])
    if not (math.isfinite(v_cmd) and math.isfinite(steer_cmd)) or not state.is_finite():
        raise InvalidStateError(f"non-finite plant input: state={state}, action={(v_cmd, steer_cmd)}")
    dt = cfg.dt
    v_cmd = clamp(v_cmd, -cfg.v_limit, cfg.v_limit)
    steer_cmd = clamp(steer_cmd, -cfg.steer_limit, cfg.steer_limit)

    decay = math.exp(-dt / cfg.tau_v)
    v = v_cmd + (state.v_act - v_cmd) * decay
    max_dsteer = cfg.steer_rate_limit * dt
    steer = state.theta_f_act + clamp(steer_cmd - state.theta_f_act, -max_dsteer, max_dsteer)
    steer = clamp(steer, -cfg.steer_limit, cfg.steer_limit)

    theta = state.theta_b + dt * v / cfg.wheelbase * math.tan(steer)
    theta = wrap_angle(theta)
    x = state.x_b + dt * v * math.cos(theta)
    y = state.y_b + dt * v * math.sin(theta)
    return CarState(x, y, theta, steer_cmd, v, steer)


def snapshot(state: CarState) -> CarState:
    # CarState is immutable; a copy is still handed out so callers never alias.
    return replace(state)


def restore(saved: CarState) -> CarState:
    return replace(saved)


def lateral_velocity(prev: CarState, new: CarState, cfg: PlantConfig) -> float:
    """Body-frame sideways velocity of the last step (zero for a no-skid update)."""
    dx = (new.x_b - prev.x_b) / cfg.dt
    dy = (new.y_b - prev.y_b) / cfg.dt
    return -math.sin(new.theta_b) * dx + math.cos(new.theta_b) * dy
