"""
Real-time-iteration MPC baseline.

The prediction model keeps only linear damping:

    eta_dot = R(psi) nu,   M nu_dot = B(u) - D_l nu

and the target enters as an (x, y) reference. Every control cycle runs one
Gauss-Newton iteration: shift the previous controls by one node, roll the
model out from the measured state, linearize every node, solve the
linear-quadratic subproblem with a Riccati recursion and clamp the controls
to [-1, 1] in the forward pass.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError

from .dynamics import REVERSE_THRUST_RATIO, VesselParams, VesselState
from .task import Action, Goal
from .utils import FloatArray

logger = logging.getLogger(__name__)

MODEL_STATE_SIZE = 6
CONTROL_SIZE = 2


@dataclass(frozen=True)
class MpcModel:
    mass: float = 35.82
    inertia_z: float = 8.31
    X_u: float = 0.0
    Y_v: float = 99.99
    N_r: float = 5.83
    thruster_separation: float = 0.74
    thrust_max_forward: float = 22.1
    thrust_max_reverse: float = REVERSE_THRUST_RATIO * 22.1

    def __post_init__(self) -> None:
        errors = {}
        for name in ("mass", "inertia_z", "thruster_separation"):
            if not getattr(self, name) > 0.0:
                errors[name] = "must be > 0"
        for name in ("X_u", "Y_v", "N_r", "thrust_max_forward", "thrust_max_reverse"):
            if not getattr(self, name) >= 0.0:
                errors[name] = "must be >= 0"
        if errors:
            raise ValidationError(errors)

    @classmethod
    def from_params(cls, params: VesselParams, n_r: Optional[float] = None) -> "MpcModel":
        """Linear-damping model of a scalar parameter set, optionally with a hand-tuned N_r."""
        return cls(
            mass=float(params.mass),
            inertia_z=float(params.inertia_z),
            X_u=float(params.X_u),
            Y_v=float(params.Y_v),
            N_r=float(params.N_r if n_r is None else n_r),
            thruster_separation=float(params.thruster_separation),
            thrust_max_forward=float(params.thrust_max_forward),
            thrust_max_reverse=float(params.thrust_max_reverse),
        )


@dataclass(frozen=True)
class OcpConfig:
    horizon: float = 3.0
    control_rate: float = 20.0
    nodes: int = 60
    position_weight: float = 1.0
    velocity_weight: float = 0.1
    control_weight: float = 0.05
    terminal_factor: float = 10.0
    n_r: float = 5.83

    def __post_init__(self) -> None:
        errors = {}
        if not self.horizon > 0.0:
            errors["horizon"] = "must be > 0"
        if not self.control_rate > 0.0:
            errors["control_rate"] = "must be > 0"
        if self.nodes < 1:
            errors["nodes"] = "must be >= 1"
        if not self.position_weight > 0.0:
            errors["position_weight"] = "must be > 0"
        for name in ("velocity_weight", "control_weight", "terminal_factor", "n_r"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                errors[name] = "must be finite and >= 0"
        if errors:
            raise ValidationError(errors)

    @property
    def node_dt(self) -> float:
        return self.horizon / self.nodes

    def replace(self, **changes: float) -> "OcpConfig":
        return dataclasses.replace(self, **changes)

    def stage_weights(self) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Diagonal state, control and terminal weight matrices."""
        w_p, w_v = self.position_weight, self.velocity_weight
        state = np.diag([w_p, w_p, 0.0, w_v, w_v, w_v])
        control = self.control_weight * np.eye(CONTROL_SIZE)
        return state, control, self.terminal_factor * state


@dataclass
class MpcSolution:
    states: FloatArray
    controls: FloatArray
    residual: float = 0.0
    latency: float = 0.0
    degraded: bool = False

    @property
    def first_control(self) -> FloatArray:
        return self.controls[0]

    @property
    def nodes(self) -> int:
        return self.controls.shape[0]


def _thrust_slopes(u: FloatArray, model: MpcModel) -> FloatArray:
    return np.where(u >= 0.0, model.thrust_max_forward, model.thrust_max_reverse)


def model_derivative(q: FloatArray, u: FloatArray, model: MpcModel) -> FloatArray:
    """Continuous-time model over (..., 6) states and (..., 2) controls."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    force = _thrust_slopes(u, model) * u
    surge = force[..., 0] + force[..., 1]
    yaw = 0.5 * model.thruster_separation * (force[..., 1] - force[..., 0])

    psi, su, sv, r = q[..., 2], q[..., 3], q[..., 4], q[..., 5]
    c, s = np.cos(psi), np.sin(psi)
    return np.stack(
        [
            c * su - s * sv,
            s * su + c * sv,
            r,
            (surge - model.X_u * su) / model.mass,
            -model.Y_v * sv / model.mass,
            (yaw - model.N_r * r) / model.inertia_z,
        ],
        axis=-1,
    )


def model_jacobians(q: FloatArray, u: FloatArray, model: MpcModel) -> tuple[FloatArray, FloatArray]:
    """Continuous-time Jacobians df/dq (..., 6, 6) and df/du (..., 6, 2)."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = q.shape[:-1]
    psi, su, sv = q[..., 2], q[..., 3], q[..., 4]
    c, s = np.cos(psi), np.sin(psi)

    fq = np.zeros((*batch, MODEL_STATE_SIZE, MODEL_STATE_SIZE))
    fq[..., 0, 2] = -s * su - c * sv
    fq[..., 0, 3] = c
    fq[..., 0, 4] = -s
    fq[..., 1, 2] = c * su - s * sv
    fq[..., 1, 3] = s
    fq[..., 1, 4] = c
    fq[..., 2, 5] = 1.0
    fq[..., 3, 3] = -model.X_u / model.mass
    fq[..., 4, 4] = -model.Y_v / model.mass
    fq[..., 5, 5] = -model.N_r / model.inertia_z

    slopes = _thrust_slopes(u, model)
    half = 0.5 * model.thruster_separation
    fu = np.zeros((*u.shape[:-1], MODEL_STATE_SIZE, CONTROL_SIZE))
    fu[..., 3, 0] = slopes[..., 0] / model.mass
    fu[..., 3, 1] = slopes[..., 1] / model.mass
    fu[..., 5, 0] = -half * slopes[..., 0] / model.inertia_z
    fu[..., 5, 1] = half * slopes[..., 1] / model.inertia_z
    return fq, np.broadcast_to(fu, (*batch, MODEL_STATE_SIZE, CONTROL_SIZE))


def discretize(q: FloatArray, u: FloatArray, model: MpcModel, dt: float) -> FloatArray:
    """One RK4 step of the prediction model with the control held."""
    k1 = model_derivative(q, u, model)
    k2 = model_derivative(q + 0.5 * dt * k1, u, model)
    k3 = model_derivative(q + 0.5 * dt * k2, u, model)
    k4 = model_derivative(q + dt * k3, u, model)
    return q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linearize(q: FloatArray, u: FloatArray, model: MpcModel, dt: float) -> tuple[FloatArray, FloatArray]:
    """
    Exact Jacobians (A, B) of the RK4-discretized model, by the chain rule
    through the four stages. Batched over leading node axes.
    """
    if not dt > 0.0:
        raise ValueError("node step must be > 0")
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    eye = np.eye(MODEL_STATE_SIZE)

    k1 = model_derivative(q, u, model)
    fq1, fu = model_jacobians(q, u, model)
    j1q, j1u = fq1, fu

    q2 = q + 0.5 * dt * k1
    k2 = model_derivative(q2, u, model)
    fq2, _ = model_jacobians(q2, u, model)
    j2q = fq2 @ (eye + 0.5 * dt * j1q)
    j2u = fq2 @ (0.5 * dt * j1u) + fu

    q3 = q + 0.5 * dt * k2
    fq3, _ = model_jacobians(q3, u, model)
    j3q = fq3 @ (eye + 0.5 * dt * j2q)
    j3u = fq3 @ (0.5 * dt * j2u) + fu

    q4 = q + dt * model_derivative(q3, u, model)
    fq4, _ = model_jacobians(q4, u, model)
    j4q = fq4 @ (eye + dt * j3q)
    j4u = fq4 @ (dt * j3u) + fu

    a = eye + (dt / 6.0) * (j1q + 2.0 * j2q + 2.0 * j3q + j4q)
    b = (dt / 6.0) * (j1u + 2.0 * j2u + 2.0 * j3u + j4u)
    return a, b


def rollout(q0: FloatArray, controls: FloatArray, model: MpcModel, dt: float) -> FloatArray:
    states = np.empty((controls.shape[0] + 1, MODEL_STATE_SIZE))
    states[0] = q0
    for k, u in enumerate(controls):
        states[k + 1] = discretize(states[k], u, model, dt)
    return states


def cold_start(q0: Sequence[float] | FloatArray, config: OcpConfig, model: MpcModel) -> MpcSolution:
    """Zero controls with the model rolled out from the current state."""
    controls = np.zeros((config.nodes, CONTROL_SIZE))
    return MpcSolution(rollout(np.asarray(q0, dtype=float), controls, model, config.node_dt), controls)


def shift_solution(solution: MpcSolution) -> MpcSolution:
    """Advance the trajectory by one node, duplicating the last node."""
    states = np.concatenate([solution.states[1:], solution.states[-1:]])
    controls = np.concatenate([solution.controls[1:], solution.controls[-1:]])
    return MpcSolution(states, controls, solution.residual, solution.latency, solution.degraded)


def _riccati(
    a: FloatArray,
    b: FloatArray,
    state_residuals: FloatArray,
    controls: FloatArray,
    config: OcpConfig,
) -> tuple[FloatArray, FloatArray]:
    """Feedback gains and feed-forward steps of the Gauss-Newton LQ subproblem."""
    q_w, r_w, q_terminal = config.stage_weights()
    nodes = controls.shape[0]
    gains = np.empty((nodes, CONTROL_SIZE, MODEL_STATE_SIZE))
    steps = np.empty((nodes, CONTROL_SIZE))

    p_mat = q_terminal
    p_vec = q_terminal @ state_residuals[-1]
    for k in reversed(range(nodes)):
        a_k, b_k = a[k], b[k]
        pb = p_mat @ b_k
        h = r_w + b_k.T @ pb
        g = r_w @ controls[k] + b_k.T @ p_vec
        g_mat = pb.T @ a_k
        solved = np.linalg.solve(h, np.column_stack([g_mat, g]))
        gains[k] = -solved[:, :-1]
        steps[k] = -solved[:, -1]
        p_mat = q_w + a_k.T @ p_mat @ a_k + g_mat.T @ gains[k]
        p_mat = 0.5 * (p_mat + p_mat.T)
        p_vec = q_w @ state_residuals[k] + a_k.T @ p_vec + g_mat.T @ steps[k]
    return gains, steps


def rti_step(
    q0: Sequence[float] | FloatArray,
    target: tuple[float, float],
    previous: Optional[MpcSolution],
    config: OcpConfig,
    model: MpcModel,
    shift: bool = True,
) -> MpcSolution:
    """
    One real-time iteration from the measured state ``q0`` toward ``target``.

    On a singular or non-finite subproblem the shifted previous solution is
    returned with ``degraded`` set.
    """
    started = time.perf_counter()
    q0 = np.asarray(q0, dtype=float)[:MODEL_STATE_SIZE]
    dt = config.node_dt
    if previous is None:
        guess = cold_start(q0, config, model)
    elif shift:
        guess = shift_solution(previous)
    else:
        guess = previous
    if guess.nodes != config.nodes:
        raise ValueError(f"previous solution has {guess.nodes} nodes, expected {config.nodes}")

    controls = guess.controls
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            states = rollout(q0, controls, model, dt)
            reference = np.zeros(MODEL_STATE_SIZE)
            reference[0:2] = target
            residuals = states - reference
            a, b = linearize(states[:-1], controls, model, dt)
            gains, steps = _riccati(a, b, residuals, controls, config)

            new_controls = np.empty_like(controls)
            dq = np.zeros(MODEL_STATE_SIZE)
            for k in range(config.nodes):
                new_controls[k] = np.clip(controls[k] + steps[k] + gains[k] @ dq, -1.0, 1.0)
                dq = a[k] @ dq + b[k] @ (new_controls[k] - controls[k])
            new_states = rollout(q0, new_controls, model, dt)
        if not (np.all(np.isfinite(new_states)) and np.all(np.isfinite(new_controls))):
            raise FloatingPointError("non-finite iterate")
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.warning("MPC iteration degraded: %s", exc)
        return MpcSolution(
            guess.states,
            guess.controls,
            residual=math.nan,
            latency=time.perf_counter() - started,
            degraded=True,
        )

    return MpcSolution(
        new_states,
        new_controls,
        residual=float(np.linalg.norm(new_controls - controls)),
        latency=time.perf_counter() - started,
    )


class MpcController:
    """
    Stateful receding-horizon controller for one episode. Consumes the full
    plant state; the first call starts from zero controls.
    """

    def __init__(self, model: MpcModel = MpcModel(), config: OcpConfig = OcpConfig()):
        self.model = model
        self.config = config
        self.solution: Optional[MpcSolution] = None
        self.degraded_steps = 0

    def reset(self) -> None:
        self.solution = None
        self.degraded_steps = 0

    def __call__(self, state: VesselState | FloatArray, goal: Goal) -> Action:
        q0 = state.as_array() if isinstance(state, VesselState) else np.asarray(state, dtype=float)
        self.solution = rti_step(q0, (goal.gx, goal.gy), self.solution, self.config, self.model)
        if self.solution.degraded:
            self.degraded_steps += 1
        left, right = np.clip(self.solution.first_control, -1.0, 1.0)
        return Action(float(left), float(right))
