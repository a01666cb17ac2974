"""
Planar (surge, sway, yaw) rigid-body model of the twin-hull capture vessel.

    M nu_dot + D(nu) nu = tau_thruster + tau_disturbance,   D(nu) = D_l + D_q(nu)

with M = diag(m, m, I_z), pose kinematics eta_dot = R(psi) nu, rate-limited
thruster commands and a lateral centre-of-mass offset. The offset leaves the
thrust lines where they are but drags the resistance centre with it, so at
cruise it yaws the vessel with a couple of com_offset_y times the surge drag.

State arrays use the layout of ``STATE_FIELDS``; every kernel accepts a
leading batch dimension, and ``VesselParams`` fields may be floats or
arrays broadcastable against that batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Union, overload

import numpy as np
from django.core.exceptions import ValidationError

from .utils import FloatArray, Scalar, wrap_angle

STATE_FIELDS = (
    "x",
    "y",
    "psi",
    "u",
    "v",
    "r",
    "thrust_applied_left",
    "thrust_applied_right",
)
STATE_SIZE = len(STATE_FIELDS)
POSE_VELOCITY_SIZE = 6

# reverse thrust as a share of forward thrust when not given explicitly
REVERSE_THRUST_RATIO = 0.6

HULL_LENGTH = 1.35
HULL_BEAM = 0.98
MAX_DT = 0.1
DAMPING_LINEAR = ("X_u", "Y_v", "N_r")
DAMPING_QUADRATIC = ("X_uu", "Y_vv", "N_rr")


def box_inertia(mass: float, length: float = HULL_LENGTH, width: float = HULL_BEAM) -> float:
    """Yaw inertia of a uniform rectangular plate."""
    return mass * (length**2 + width**2) / 12.0


@dataclass(frozen=True)
class VesselState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    u: float = 0.0
    v: float = 0.0
    r: float = 0.0
    thrust_applied_left: float = 0.0
    thrust_applied_right: float = 0.0

    def as_array(self) -> FloatArray:
        return np.array([getattr(self, name) for name in STATE_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float] | FloatArray) -> "VesselState":
        values = np.asarray(values, dtype=float)
        return cls(**{name: float(values[i]) for i, name in enumerate(STATE_FIELDS)})

    @property
    def nu(self) -> tuple[float, float, float]:
        return (self.u, self.v, self.r)


@dataclass(frozen=True)
class VesselParams:
    """Physical parameters of the vessel; the domain-randomization target."""

    mass: Scalar = 35.82
    inertia_z: Scalar = 8.31
    com_offset_y: Scalar = 0.0
    X_u: Scalar = 0.00
    Y_v: Scalar = 99.99
    N_r: Scalar = 5.83
    X_uu: Scalar = 17.26
    Y_vv: Scalar = 99.99
    N_rr: Scalar = 17.34
    thruster_separation: Scalar = 0.74
    thrust_max_forward: Scalar = 22.1
    thrust_max_reverse: Optional[Scalar] = None
    thrust_slew_rate: Scalar = 1.0
    thrust_gain_left: Scalar = 1.0
    thrust_gain_right: Scalar = 1.0

    def __post_init__(self) -> None:
        if self.thrust_max_reverse is None:
            object.__setattr__(self, "thrust_max_reverse", REVERSE_THRUST_RATIO * self.thrust_max_forward)
        errors: dict[str, str] = {}
        for field in dataclasses.fields(self):
            if not np.all(np.isfinite(getattr(self, field.name))):
                errors[field.name] = "must be finite"
        for name in ("mass", "inertia_z", "thruster_separation", "thrust_slew_rate"):
            if np.any(np.asarray(getattr(self, name)) <= 0.0):
                errors.setdefault(name, "must be > 0")
        for name in (*DAMPING_LINEAR, *DAMPING_QUADRATIC, "thrust_max_forward", "thrust_max_reverse"):
            if np.any(np.asarray(getattr(self, name)) < 0.0):
                errors.setdefault(name, "must be >= 0")
        for name in ("thrust_gain_left", "thrust_gain_right"):
            gain = np.asarray(getattr(self, name))
            if np.any(gain <= 0.0) or np.any(gain > 1.5):
                errors.setdefault(name, "must lie in (0, 1.5]")
        if errors:
            raise ValidationError(errors)

    @property
    def damping_linear(self) -> tuple[Scalar, Scalar, Scalar]:
        return (self.X_u, self.Y_v, self.N_r)

    @property
    def damping_quadratic(self) -> tuple[Scalar, Scalar, Scalar]:
        return (self.X_uu, self.Y_vv, self.N_rr)

    @property
    def batch_size(self) -> int | None:
        sizes = {np.size(getattr(self, f.name)) for f in dataclasses.fields(self)}
        sizes.discard(1)
        return sizes.pop() if sizes else None

    def replace(self, **changes: Any) -> "VesselParams":
        """Copy with ``changes``; a derived reverse thrust follows a new forward thrust."""
        derived = np.array_equal(self.thrust_max_reverse, REVERSE_THRUST_RATIO * np.asarray(self.thrust_max_forward))
        if "thrust_max_forward" in changes and derived:
            changes.setdefault("thrust_max_reverse", None)
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def take(self, index: int) -> "VesselParams":
        """Scalar parameters of one member of a stacked batch."""
        values = {}
        for name, value in self.as_dict().items():
            values[name] = float(value[index]) if np.ndim(value) else float(value)
        return VesselParams(**values)

    @classmethod
    def stack(cls, params: Sequence["VesselParams"]) -> "VesselParams":
        """Stack scalar parameter sets into one batch (one array per field)."""
        if not params:
            raise ValueError("cannot stack an empty parameter list")
        fields = [f.name for f in dataclasses.fields(cls)]
        return cls(
            **{name: np.array([float(getattr(p, name)) for p in params]) for name in fields}
        )


@dataclass(frozen=True)
class DisturbanceWrench:
    """Body-frame external force/torque acting at the centre of mass."""

    force_x: float = 0.0
    force_y: float = 0.0
    torque_z: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(value) for value in self.as_array()):
            raise ValidationError({"disturbance": "wrench components must be finite"})

    def as_array(self) -> FloatArray:
        return np.array([self.force_x, self.force_y, self.torque_z], dtype=float)


NO_DISTURBANCE = DisturbanceWrench()


def _state_array(state: VesselState | FloatArray) -> FloatArray:
    if isinstance(state, VesselState):
        return state.as_array()
    return np.asarray(state, dtype=float)


def _wrench_array(disturbance: DisturbanceWrench | FloatArray | None) -> FloatArray:
    if disturbance is None:
        return np.zeros(3)
    if isinstance(disturbance, DisturbanceWrench):
        return disturbance.as_array()
    return np.asarray(disturbance, dtype=float)


def damping_wrench(nu: Sequence[float] | FloatArray, params: VesselParams) -> FloatArray:
    """D(nu) nu per axis; odd in each velocity component."""
    nu = np.asarray(nu, dtype=float)
    u, v, r = nu[..., 0], nu[..., 1], nu[..., 2]
    return np.stack(
        [
            params.X_u * u + params.X_uu * np.abs(u) * u,
            params.Y_v * v + params.Y_vv * np.abs(v) * v,
            params.N_r * r + params.N_rr * np.abs(r) * r,
        ],
        axis=-1,
    )


def thruster_forces(commands: FloatArray, params: VesselParams) -> tuple[FloatArray, FloatArray]:
    """Piecewise-linear thrust curve with weaker reverse thrust, per thruster."""
    commands = np.asarray(commands, dtype=float)
    left, right = commands[..., 0], commands[..., 1]
    curve_left = np.where(left >= 0.0, params.thrust_max_forward * left, params.thrust_max_reverse * left)
    curve_right = np.where(
        right >= 0.0, params.thrust_max_forward * right, params.thrust_max_reverse * right
    )
    return params.thrust_gain_left * curve_left, params.thrust_gain_right * curve_right


def thruster_wrench(state: VesselState | FloatArray, params: VesselParams) -> FloatArray:
    """
    Body-frame wrench of the applied thrust about the centre of mass.

    Thrusters sit at y = +a/2 (left) and y = -a/2 (right) from the hull
    centreline; with the centre of mass at y = com_offset_y the surge force
    acts on lever arms shifted by the offset.
    """
    s = _state_array(state)
    force_left, force_right = thruster_forces(s[..., 6:8], params)
    surge = force_left + force_right
    half = 0.5 * params.thruster_separation
    yaw = half * (force_right - force_left) + params.com_offset_y * surge
    return np.stack([surge, np.zeros_like(surge), yaw], axis=-1)


def apply_slew(
    command: Sequence[float] | FloatArray,
    state: VesselState | FloatArray,
    dt: float,
    params: VesselParams,
) -> FloatArray:
    """Move the applied thrust toward the command by at most slew_rate * dt."""
    target = np.clip(np.asarray(command, dtype=float), -1.0, 1.0)
    applied = _state_array(state)[..., 6:8]
    max_change = np.asarray(params.thrust_slew_rate * dt)[..., None]
    moved = applied + np.clip(target - applied, -max_change, max_change)
    return np.clip(moved, -1.0, 1.0)


def derivative(
    state: VesselState | FloatArray,
    params: VesselParams,
    disturbance: DisturbanceWrench | FloatArray | None = None,
) -> FloatArray:
    """
    Time derivative of the state array. Applied thrust is held constant
    across an integration step, so its derivative is zero.
    """
    s = _state_array(state)
    nu = s[..., 3:6]
    drag = damping_wrench(nu, params)
    # the loaded hull sits deeper, so surge drag acts in line with the centre
    # of mass while thrust stays on the hull centreline
    tau = thruster_wrench(s, params) + _wrench_array(disturbance) - drag

    psi = s[..., 2]
    u, v, r = nu[..., 0], nu[..., 1], nu[..., 2]
    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    out = np.zeros_like(s)
    out[..., 0] = cos_psi * u - sin_psi * v
    out[..., 1] = sin_psi * u + cos_psi * v
    out[..., 2] = r
    out[..., 3] = tau[..., 0] / params.mass
    out[..., 4] = tau[..., 1] / params.mass
    out[..., 5] = tau[..., 2] / params.inertia_z
    return out


def _rk4(state: FloatArray, params: VesselParams, disturbance: FloatArray, dt: float) -> FloatArray:
    k1 = derivative(state, params, disturbance)
    k2 = derivative(state + 0.5 * dt * k1, params, disturbance)
    k3 = derivative(state + 0.5 * dt * k2, params, disturbance)
    k4 = derivative(state + dt * k3, params, disturbance)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@overload
def step_dynamics(
    state: VesselState,
    command: Sequence[float] | FloatArray,
    params: VesselParams,
    disturbance: DisturbanceWrench | FloatArray | None,
    dt: float,
) -> VesselState: ...


@overload
def step_dynamics(
    state: FloatArray,
    command: Sequence[float] | FloatArray,
    params: VesselParams,
    disturbance: DisturbanceWrench | FloatArray | None,
    dt: float,
) -> FloatArray: ...


def step_dynamics(
    state: Union[VesselState, FloatArray],
    command: Sequence[float] | FloatArray,
    params: VesselParams,
    disturbance: DisturbanceWrench | FloatArray | None,
    dt: float,
) -> Union[VesselState, FloatArray]:
    """
    Advance the vessel by one physics step: slew-limit the command, then
    integrate with fixed-step RK4 and wrap the heading.
    """
    if not (0.0 < dt <= MAX_DT):
        raise ValueError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    s = _state_array(state)
    if not np.all(np.isfinite(s)):
        raise ValueError("vessel state contains non-finite values")

    s = s.copy()
    s[..., 6:8] = apply_slew(command, s, dt, params)
    s = _rk4(s, params, _wrench_array(disturbance), dt)
    s[..., 2] = wrap_angle(s[..., 2])
    if isinstance(state, VesselState):
        return VesselState.from_array(s)
    return s


def kinetic_energy(state: VesselState | FloatArray, params: VesselParams) -> Scalar:
    s = _state_array(state)
    u, v, r = s[..., 3], s[..., 4], s[..., 5]
    return 0.5 * (params.mass * (u**2 + v**2) + params.inertia_z * r**2)

