import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coto.plant import (
    CarState,
    InvalidStateError,
    PlantConfig,
    lateral_velocity,
    restore,
    snapshot,
    step,
    wrap_angle,
)

CFG = PlantConfig()


def random_state(rng):
    return CarState(
        rng.uniform(-5, 5),
        rng.uniform(-5, 5),
        rng.uniform(-math.pi, math.pi),
        rng.uniform(-0.6, 0.6),
        rng.uniform(-2, 2),
        rng.uniform(-0.6, 0.6),
    )


def test_rest_is_fixed_point():
    s = step(CarState(), (0.0, 0.0), CFG)
    assert s == CarState()


def test_straight_line_advance():
    theta = 0.7
    s0 = CarState(1.0, 2.0, theta, 0.0, 1.0, 0.0)
    s1 = step(s0, (1.0, 0.0), CFG)
    assert s1.x_b - s0.x_b == pytest.approx(0.05 * math.cos(theta), abs=1e-15)
    assert s1.y_b - s0.y_b == pytest.approx(0.05 * math.sin(theta), abs=1e-15)
    assert s1.v_act == 1.0


def test_yaw_increment_matches_fine_integrator():
    s0 = CarState(0, 0, 0, 0.3, 1.0, 0.3)
    s1 = step(s0, (1.0, 0.3), CFG)
    expected = 0.05 * (1 / 0.325) * math.tan(0.3)
    assert s1.theta_b == pytest.approx(expected, abs=1e-15)
    # oracle: explicit integration with 1e-5 s substeps of the continuous bicycle
    th = 0.0
    n = 5000
    for _ in range(n):
        th += (0.05 / n) * 1.0 / 0.325 * math.tan(0.3)
    assert abs(s1.theta_b - th) < 1e-3


def test_commands_are_clamped_silently():
    s = CarState()
    for _ in range(200):
        s = step(s, (50.0, -9.0), CFG)
    assert s.v_act == pytest.approx(CFG.v_limit)
    assert s.theta_f_act == pytest.approx(-CFG.steer_limit)
    assert s.theta_f == -CFG.steer_limit


def test_non_finite_rejected():
    with pytest.raises(InvalidStateError):
        step(CarState(), (math.nan, 0.0), CFG)
    with pytest.raises(InvalidStateError):
        step(CarState(x_b=math.inf), (0.0, 0.0), CFG)


@pytest.mark.parametrize("bad", [dict(dt=0.0), dict(tau_v=-1.0), dict(steer_limit=1.6)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PlantConfig(**bad)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    for a in np.linspace(-20, 20, 401):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)


def test_snapshot_restore_determinism():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = random_state(rng)
        a = rng.uniform(-3, 3, size=2)
        saved = snapshot(s)
        before = step(s, a, CFG)
        restored = restore(saved)
        assert restored == s
        assert step(restored, a, CFG) == before


def test_restore_untouched_snapshot_is_identity():
    s = CarState(1, 2, 3, 0.1, 0.5, -0.2)
    assert restore(snapshot(s)) == s


def test_k_steps_after_restore_bit_identical():
    rng = np.random.default_rng(1)
    s = random_state(rng)
    actions = rng.uniform(-2, 2, size=(25, 2))
    saved = snapshot(s)
    a = s
    for act in actions:
        a = step(a, act, CFG)
    b = restore(saved)
    for act in actions:
        b = step(b, act, CFG)
    assert a.as_tuple() == b.as_tuple()


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(-math.pi, math.pi),
    st.floats(-0.6, 0.6),
    st.floats(-2, 2),
    st.floats(-0.6, 0.6),
    finite,
    finite,
)
def test_step_invariants(x, y, th, tf, v, tfa, v_cmd, s_cmd):
    s0 = CarState(x, y, th, tf, v, tfa)
    s1 = step(s0, (v_cmd, s_cmd), CFG)
    assert -math.pi < s1.theta_b <= math.pi
    assert abs(s1.theta_f_act) <= CFG.steer_limit
    assert abs(s1.v_act) <= CFG.v_limit
    assert abs(s1.theta_f_act - s0.theta_f_act) <= CFG.steer_rate_limit * CFG.dt + 1e-12
    assert abs(lateral_velocity(s0, s1, CFG)) < 1e-12


def test_coasting_decays_monotonically():
    s = CarState(0, 0, 0.3, 0.2, 2.0, 0.2)
    speeds, xs = [], []
    for _ in range(300):
        s = step(s, (0.0, 0.2), CFG)
        speeds.append(s.v_act)
        xs.append(s.x_b)
    assert all(b <= a for a, b in zip(speeds, speeds[1:]))
    assert speeds[-1] < 1e-12
    assert abs(xs[-1] - xs[-2]) < 1e-12


def test_body_rates_consistent_with_state():
    s = CarState(0, 0, 0.5, 0.1, 1.5, 0.1)
    xd, yd, w = s.body_rates(CFG)
    assert math.hypot(xd, yd) == pytest.approx(1.5)
    assert w == pytest.approx(1.5 / CFG.wheelbase * math.tan(0.1))
