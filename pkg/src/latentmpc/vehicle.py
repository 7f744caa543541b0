"""Bicycle kinematics, integrators, and the control <-> actuator converter.

All functions are pure; states live in the centerline reference frame (or,
for the simulator plant, in the global frame -- the equations are the same).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import wrap_angle


@dataclass(frozen=True)
class VehicleParams:
    """Kinematic limits and footprint; defaults follow the compact-sedan setup."""

    wheelbase: float = 2.875
    v_min: float = 0.0
    v_max: float = 10.0
    a_min: float = -9.0
    a_max: float = 4.5
    delta_max: float = 0.75
    half_length: float = 2.35
    half_width: float = 0.95

    def __post_init__(self):
        if self.wheelbase <= 0.0:
            raise ValueError("wheelbase must be positive")
        if self.v_min >= self.v_max or self.a_min >= self.a_max or self.delta_max <= 0.0:
            raise ValueError("degenerate control bounds")


@dataclass(frozen=True)
class VehicleState:
    """Pose and speed (x, y, heading, speed)."""

    x: float
    y: float
    psi: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v], dtype=float)

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class ControlInput:
    """Acceleration (m/s^2) and steering angle (rad)."""

    a: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)


@dataclass(frozen=True)
class ActuatorCommand:
    """Normalized throttle/brake in [0, 1] (mutually exclusive) and steer in [-1, 1]."""

    throttle: float
    brake: float
    steer: float


def derivative(state: VehicleState, control: ControlInput, params: VehicleParams):
    """Continuous-time state rate of the kinematic bicycle model."""
    theta = state.psi + control.delta
    return (
        state.v * math.cos(theta),
        state.v * math.sin(theta),
        (2.0 * state.v / params.wheelbase) * math.sin(control.delta),
        control.a,
    )


def step_euler(state: VehicleState, control: ControlInput, dt: float, params: VehicleParams) -> VehicleState:
    """One forward-Euler step; heading wrapped, speed clamped to its bounds."""
    theta = state.psi + control.delta
    x = state.x + state.v * math.cos(theta) * dt
    y = state.y + state.v * math.sin(theta) * dt
    psi = wrap_angle(state.psi + (2.0 * state.v / params.wheelbase) * math.sin(control.delta) * dt)
    v = state.v + control.a * dt
    v = min(max(v, params.v_min), params.v_max)
    return VehicleState(x, y, psi, v)


def step_rk4(state: VehicleState, control: ControlInput, dt: float, params: VehicleParams) -> VehicleState:
    """Classical RK4 step under zero-order-hold control, wrap/clamp as step_euler."""
    def f(s):
        return derivative(s, control, params)

    def advance(s, rate, h):
        return VehicleState(s.x + rate[0] * h, s.y + rate[1] * h, s.psi + rate[2] * h, s.v + rate[3] * h)

    k1 = f(state)
    k2 = f(advance(state, k1, 0.5 * dt))
    k3 = f(advance(state, k2, 0.5 * dt))
    k4 = f(advance(state, k3, dt))
    x = state.x + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    y = state.y + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    psi = wrap_angle(state.psi + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]))
    v = state.v + dt / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
    v = min(max(v, params.v_min), params.v_max)
    return VehicleState(x, y, psi, v)


def to_actuator(control: ControlInput) -> ActuatorCommand:
    """Convert (a, delta) to throttle/brake/steer signals.

    Throttle saturates at a = 3 m/s^2, brake at a = -8 m/s^2; both stay in
    [0, 1] and are mutually exclusive.  Steer is the steering angle clipped
    to [-1, 1].
    """
    if control.a >= 0.0:
        throttle = min(control.a / 3.0, 1.0)
        brake = 0.0
    else:
        throttle = 0.0
        brake = min(max(-control.a / 8.0, 0.0), 1.0)
    steer = min(max(control.delta, -1.0), 1.0)
    return ActuatorCommand(throttle, brake, steer)


def from_actuator(cmd: ActuatorCommand) -> ControlInput:
    """Invert an actuator command back to (a, delta) as the plant applies it."""
    return ControlInput(3.0 * cmd.throttle - 8.0 * cmd.brake, cmd.steer)


def clamp_control(control: ControlInput, params: VehicleParams) -> ControlInput:
    return ControlInput(
        min(max(control.a, params.a_min), params.a_max),
        min(max(control.delta, -params.delta_max), params.delta_max),
    )


def with_speed(state: VehicleState, v: float) -> VehicleState:
    return replace(state, v=v)
