"""Receding-horizon trajectory optimization for the kinematic car.

Knot states q = (x_b, y_b, theta_b, theta_f) are coupled by backward Euler,
q[k+1] = q[k] + h * f(q[k+1], u[k+1]), with controls u = (v, steer_rate).
The transcription is condensed shooting: controls are the free variables and
each implicit step is solved exactly, so the dynamics constraints hold by
construction. Controls are minimised by a projected, damped Gauss-Newton
method on central finite-difference Jacobians of the terminal error, with a
projected-gradient fallback when the Gauss-Newton direction stalls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .env import GoalSpec
from .plant import CarState, PlantConfig


@dataclass(frozen=True)
class TOModel:
    wheelbase: float = 0.325
    v_limit: float = 2.0
    steer_limit: float = 0.6
    steer_rate_limit: float = 4.0

    @classmethod
    def from_plant(cls, cfg: PlantConfig) -> "TOModel":
        return cls(cfg.wheelbase, cfg.v_limit, cfg.steer_limit, cfg.steer_rate_limit)


@dataclass(frozen=True)
class TOConfig:
    N: int = 20
    h: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    gamma_theta: float = 0.0
    max_iter_cold: int = 120
    max_iter_warm: int = 40
    fd_step: float = 1e-4
    damping: float = 1e-3
    damping_min: float = 1e-9
    damping_max: float = 1e3
    step0: float = 0.5
    min_step: float = 1e-6
    cost_tol: float = 1e-10
    grad_tol: float = 1e-7
    stall_tol: float = 1e-4
    stall_grad_tol: float = 1e-3

    def __post_init__(self):
        if self.N < 2 or not self.h > 0:
            raise ValueError("to.N must be >= 2 and to.h > 0")
        if min(self.alpha, self.beta, self.gamma_theta) < 0:
            raise ValueError("to.alpha, to.beta and to.gamma_theta must be >= 0")
        if self.max_iter_cold < 1 or self.max_iter_warm < 1 or not self.fd_step > 0:
            raise ValueError("to.max_iter_* must be >= 1 and to.fd_step > 0")


@dataclass
class TOProblem:
    q0: np.ndarray
    goal: GoalSpec
    theta_g: float
    N: int = 20
    h: float = 0.1
    weights: tuple[float, float, float] = (1.0, 1.0, 0.0)

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=float)
        if self.N < 2 or not self.h > 0:
            raise ValueError("TO problem needs N >= 2 and h > 0")
        data = [*self.q0, self.goal.x_g, self.goal.y_g, self.theta_g, *self.weights]
        if self.q0.shape != (4,) or not all(math.isfinite(v) for v in data):
            raise ValueError(f"non-finite or malformed TO problem data: {data}")

    @classmethod
    def from_car(cls, state: CarState, goal: GoalSpec, cfg: TOConfig) -> "TOProblem":
        q0 = np.array([state.x_b, state.y_b, state.theta_b, state.theta_f_act])
        return cls(q0, goal, goal.heading_from(state), cfg.N, cfg.h, (cfg.alpha, cfg.beta, cfg.gamma_theta))


@dataclass
class TOSolution:
    q: np.ndarray  # (N+1, 4)
    u: np.ndarray  # (N, 2); u[k] drives q[k] -> q[k+1]
    cost: float
    constraint_residual: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    residuals: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "knots": self.q.tolist(),
                "controls": self.u.tolist(),
                "cost": self.cost,
                "constraint_residual": self.constraint_residual,
                "residuals": None if self.residuals is None else self.residuals.tolist(),
                "iterations": self.iterations,
                "converged": self.converged,
            }
        )


@njit(cache=True)
def _wrap(a):
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    if w == -math.pi:
        return math.pi
    return w


@njit(cache=True)
def _f(q, u, L):
    return np.array([u[0] * math.cos(q[2]), u[0] * math.sin(q[2]), u[0] / L * math.tan(q[3]), u[1]])


@njit(cache=True)
def _rollout(q0, U, h, L):
    # Implicit step z = q_k + h f(z, u) by three Jacobi fixed-point sweeps.
    # f is triangular (steer -> heading -> position), so sweep 3 is exact;
    # the sweeps are unrolled below in that order.
    n = U.shape[0]
    Q = np.empty((n + 1, 4))
    Q[0] = q0
    for k in range(n):
        v = U[k, 0]
        steer = Q[k, 3] + h * U[k, 1]
        theta = Q[k, 2] + h * v / L * math.tan(steer)
        Q[k + 1, 0] = Q[k, 0] + h * v * math.cos(theta)
        Q[k + 1, 1] = Q[k, 1] + h * v * math.sin(theta)
        Q[k + 1, 2] = theta
        Q[k + 1, 3] = steer
    return Q


@njit(cache=True)
def _terminal_cost(q0, U, h, L, goal, w):
    n = U.shape[0]
    x, y, theta, steer = q0[0], q0[1], q0[2], q0[3]
    for k in range(n):
        v = U[k, 0]
        steer = steer + h * U[k, 1]
        theta = theta + h * v / L * math.tan(steer)
        x = x + h * v * math.cos(theta)
        y = y + h * v * math.sin(theta)
    dth = _wrap(goal[2] - theta)
    return w[0] * (goal[0] - x) ** 2 + w[1] * (goal[1] - y) ** 2 + w[2] * dth * dth


@njit(cache=True)
def _terminal_residual(q0, U, h, L, goal, sqrt_w):
    n = U.shape[0]
    x, y, theta, steer = q0[0], q0[1], q0[2], q0[3]
    for k in range(n):
        v = U[k, 0]
        steer = steer + h * U[k, 1]
        theta = theta + h * v / L * math.tan(steer)
        x = x + h * v * math.cos(theta)
        y = y + h * v * math.sin(theta)
    r = np.empty(3)
    r[0] = sqrt_w[0] * (x - goal[0])
    r[1] = sqrt_w[1] * (y - goal[1])
    r[2] = sqrt_w[2] * _wrap(theta - goal[2])
    return r


@njit(cache=True)
def _fd_jacobian(q0, U, h, L, goal, sqrt_w, eps):
    # central differences: 2 * N * 2 rollouts
    n = U.shape[0]
    Jac = np.empty((3, 2 * n))
    P = U.copy()
    for k in range(n):
        for j in range(2):
            base = P[k, j]
            P[k, j] = base + eps
            rp = _terminal_residual(q0, P, h, L, goal, sqrt_w)
            P[k, j] = base - eps
            rm = _terminal_residual(q0, P, h, L, goal, sqrt_w)
            P[k, j] = base
            for i in range(3):
                Jac[i, 2 * k + j] = (rp[i] - rm[i]) / (2.0 * eps)
    return Jac


def terminal_cost(problem: TOProblem, U, model: TOModel | None = None) -> float:
    model = model or TOModel()
    goal = np.array([problem.goal.x_g, problem.goal.y_g, problem.theta_g])
    return float(_terminal_cost(problem.q0, np.asarray(U, dtype=float), problem.h, model.wheelbase, goal,
                                np.array(problem.weights, dtype=float)))


@njit(cache=True)
def _project(U, steer0, h, v_lim, rate_lim, steer_lim):
    # Speed box, then steering-rate box intersected with the rate that keeps the
    # steering state inside its box at every knot.
    P = np.empty_like(U)
    steer = steer0
    for k in range(U.shape[0]):
        P[k, 0] = min(max(U[k, 0], -v_lim), v_lim)
        lo = max(-rate_lim, (-steer_lim - steer) / h)
        hi = min(rate_lim, (steer_lim - steer) / h)
        if lo > hi:  # steer0 itself outside the box: drive back at full rate
            lo = hi = -rate_lim if steer > 0 else rate_lim
        r = min(max(U[k, 1], lo), hi)
        P[k, 1] = r
        steer = steer + h * r
    return P


def dynamics(q, u, wheelbase: float) -> np.ndarray:
    return _f(np.asarray(q, dtype=float), np.asarray(u, dtype=float), wheelbase)


def rollout(q0, U, h: float, wheelbase: float) -> np.ndarray:
    return _rollout(np.asarray(q0, dtype=float), np.asarray(U, dtype=float), h, wheelbase)


def dynamics_residual(q: np.ndarray, u: np.ndarray, h: float, wheelbase: float) -> np.ndarray:
    """Per-step max-norm of q[k+1] - q[k] - h f(q[k+1], u[k])."""
    res = np.empty(len(u))
    for k in range(len(u)):
        res[k] = np.max(np.abs(q[k + 1] - q[k] - h * _f(q[k + 1], u[k], wheelbase)))
    return res


class TrajectoryOptimizer:
    """Stateful wrapper holding the model, settings and the receding-horizon warm start."""

    def __init__(self, model: TOModel | None = None, cfg: TOConfig | None = None):
        self.model = model or TOModel()
        self.cfg = cfg or TOConfig()
        self.warm: TOSolution | None = None

    def reset(self):
        self.warm = None

    def problem_for(self, state: CarState, goal: GoalSpec) -> TOProblem:
        return TOProblem.from_car(state, goal, self.cfg)

    def act(self, state: CarState, goal: GoalSpec) -> tuple[tuple[float, float], TOSolution]:
        """Solve at ``state`` from the shifted previous plan and return (a_TO, solution)."""
        warm = shift_warm_start(self.warm) if self.warm is not None else None
        sol = solve(self.problem_for(state, goal), warm, self.model, self.cfg)
        self.warm = sol
        return first_action(sol), sol


def _cold_start(problem: TOProblem, model: TOModel) -> np.ndarray:
    U = np.zeros((problem.N, 2))
    dx = problem.goal.x_g - problem.q0[0]
    dy = problem.goal.y_g - problem.q0[1]
    if math.hypot(dx, dy) > 1e-9:
        ahead = dx * math.cos(problem.q0[2]) + dy * math.sin(problem.q0[2]) >= 0.0
        # small creep toward the goal side; zero speed is a saddle for steering
        U[:, 0] = 0.1 * model.v_limit * (1.0 if ahead else -1.0)
    return U


def solve(
    problem: TOProblem,
    warm_start: TOSolution | None = None,
    model: TOModel | None = None,
    cfg: TOConfig | None = None,
) -> TOSolution:
    """Minimise the weighted terminal error over the control sequence.

    Never raises on non-convergence: the best iterate is always returned and
    ``converged`` says whether a stationarity test was met.
    """
    model = model or TOModel()
    cfg = cfg or TOConfig()
    q0 = problem.q0
    h, L = problem.h, model.wheelbase
    goal = np.array([problem.goal.x_g, problem.goal.y_g, problem.theta_g])
    w = np.array(problem.weights, dtype=float)
    sqrt_w = np.sqrt(w)

    def project(U):
        return _project(U, q0[3], h, model.v_limit, model.steer_rate_limit, model.steer_limit)

    if warm_start is not None and warm_start.u.shape == (problem.N, 2):
        U = np.array(warm_start.u, dtype=float)
        max_iter = cfg.max_iter_warm
    else:
        U = _cold_start(problem, model)
        max_iter = cfg.max_iter_cold
    U = project(U)
    r = _terminal_residual(q0, U, h, L, goal, sqrt_w)
    J = float(r @ r)
    history = [J]
    converged = False
    damping = cfg.damping
    it = 0
    while it < max_iter:
        if J <= cfg.cost_tol:
            converged = True
            break
        Jac = _fd_jacobian(q0, U, h, L, goal, sqrt_w, cfg.fd_step)  # (3, 2N)
        grad = 2.0 * (Jac.T @ r)
        pg = np.max(np.abs(U - project(U - grad.reshape(U.shape))))
        if pg <= cfg.grad_tol:
            converged = True
            break
        it += 1
        lo, hi = _control_bounds(U, q0[3], h, model)
        step = _gauss_newton_step(U, Jac, r, grad, lo, hi, damping)
        accepted = False
        for d in (step, -grad.reshape(U.shape)):
            s = 1.0 if d is step else cfg.step0
            while s >= cfg.min_step:
                cand = project(U + s * d)
                rc = _terminal_residual(q0, cand, h, L, goal, sqrt_w)
                Jc = float(rc @ rc)
                if Jc < J + 1e-4 * float(grad @ (cand - U).ravel()):
                    accepted = True
                    break
                s *= 0.5
            if accepted:
                break
        # Levenberg-Marquardt style: shrink damping after full steps, grow it after cuts
        if accepted and d is step and s == 1.0:
            damping = max(damping * 0.1, cfg.damping_min)
        else:
            damping = min(damping * 10.0, cfg.damping_max)
        if not accepted or J - Jc <= cfg.stall_tol * J:
            if accepted and Jc < J:
                U, r, J = cand, rc, Jc
                history.append(J)
            converged = pg <= cfg.stall_grad_tol
            break
        U, r, J = cand, rc, Jc
        history.append(J)

    Q = _rollout(q0, U, h, L)
    res = dynamics_residual(Q, U, h, L)
    return TOSolution(Q, U, float(J), float(res.max()), it, bool(converged), history, res)


def _control_bounds(U, steer0, h, model: TOModel):
    """Per-knot (lo, hi) boxes of the current iterate, steering box folded into the rate box."""
    lo = np.empty_like(U)
    hi = np.empty_like(U)
    lo[:, 0], hi[:, 0] = -model.v_limit, model.v_limit
    steer = steer0 + h * np.concatenate(([0.0], np.cumsum(U[:-1, 1])))
    lo[:, 1] = np.maximum(-model.steer_rate_limit, (-model.steer_limit - steer) / h)
    hi[:, 1] = np.minimum(model.steer_rate_limit, (model.steer_limit - steer) / h)
    return lo.ravel(), hi.ravel()


def _gauss_newton_step(U, Jac, r, grad, lo, hi, damping):
    # Damped min-norm Gauss-Newton step on the free variables; variables sitting
    # on a bound that the gradient or the step pushes outward are frozen.
    flat = U.ravel()
    tol = 1e-12
    at_hi = flat >= hi - tol
    at_lo = flat <= lo + tol
    free = ~((at_hi & (grad < 0)) | (at_lo & (grad > 0)))
    step = np.zeros(flat.size)
    for _ in range(5):
        if not free.any():
            break
        Jf = Jac[:, free]
        A = Jf @ Jf.T
        A[np.diag_indices_from(A)] += damping * (1.0 + np.trace(A))
        step[:] = 0.0
        step[free] = -Jf.T @ np.linalg.solve(A, r)
        pushing = free & ((at_hi & (step > 0)) | (at_lo & (step < 0)))
        if not pushing.any():
            break
        free &= ~pushing
    return step.reshape(U.shape)


def first_action(sol: TOSolution) -> tuple[float, float]:
    """Speed from the first control; steering angle from the first knot's steering state."""
    return float(sol.u[0, 0]), float(sol.q[1, 3])


def shift_warm_start(prev: TOSolution) -> TOSolution:
    q = np.vstack([prev.q[1:], prev.q[-1:]])
    u = np.vstack([prev.u[1:], prev.u[-1:]])
    res = None if prev.residuals is None else np.append(prev.residuals[1:], np.nan)
    return TOSolution(q, u, prev.cost, prev.constraint_residual, 0, prev.converged, [], res)
