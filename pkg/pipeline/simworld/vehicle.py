"""
Kinematic bicycle vehicle
"""

import math
from dataclasses import dataclass
from typing import Optional

from ..config import VEHICLE_CONFIG
from ..errors import InvalidInputError
from .scenario import Pose, wrap_angle

MAX_DT = 0.1


@dataclass(frozen=True)
class VehicleParams:
    wheelbase_m: float = VEHICLE_CONFIG['wheelbase_m']
    max_steering_deg: float = VEHICLE_CONFIG['max_steering_deg']
    max_accel_mps2: float = VEHICLE_CONFIG['max_accel_mps2']
    max_brake_mps2: float = VEHICLE_CONFIG['max_brake_mps2']
    drag_per_s: float = VEHICLE_CONFIG['drag_per_s']
    half_width_m: float = VEHICLE_CONFIG['half_width_m']

    def __post_init__(self):
        if self.wheelbase_m <= 0 or not 0 < self.max_steering_deg < 90:
            raise InvalidInputError("wheelbase must be positive and max steering within (0, 90) degrees")
        if self.drag_per_s < 0:
            raise InvalidInputError("drag must be non-negative")

    @property
    def max_steering_rad(self) -> float:
        return math.radians(self.max_steering_deg)


@dataclass(frozen=True)
class VehicleState:
    """Position in meters, yaw in radians (counter-clockwise from +x), speed in km/h"""

    x: float
    y: float
    yaw: float
    v: float = 0.0

    def __post_init__(self):
        if self.v < 0:
            raise InvalidInputError(f"speed must be non-negative, got {self.v}")
        object.__setattr__(self, 'yaw', wrap_angle(self.yaw))

    @classmethod
    def at(cls, pose: Pose, v: float = 0.0) -> 'VehicleState':
        return cls(pose.x, pose.y, pose.yaw, v)

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.yaw)


def step_vehicle(
    state: VehicleState,
    steering: float,
    throttle: float,
    brake: float,
    dt: float,
    params: VehicleParams = VehicleParams(),
    speed_limit_kmh: Optional[float] = None,
) -> VehicleState:
    """
    Advance the kinematic bicycle by dt seconds

    Positive steering turns right: yaw' = yaw - (v / L) * tan(steering * max_steer) * dt.
    Speed follows throttle, brake and linear drag, clamped to [0, speed_limit_kmh].
    """
    if not 0.0 < dt <= MAX_DT:
        raise InvalidInputError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    if not -1.0 <= steering <= 1.0 or not 0.0 <= throttle <= 1.0 or not 0.0 <= brake <= 1.0:
        raise InvalidInputError(f"commands out of range (steering={steering}, throttle={throttle}, brake={brake})")

    v = state.v / 3.6
    angle = steering * params.max_steering_rad
    x = state.x + v * math.cos(state.yaw) * dt
    y = state.y + v * math.sin(state.yaw) * dt
    yaw = state.yaw - v / params.wheelbase_m * math.tan(angle) * dt

    accel = params.max_accel_mps2 * throttle - params.max_brake_mps2 * brake - params.drag_per_s * v
    v_next = max(0.0, v + accel * dt)
    if speed_limit_kmh is not None:
        v_next = min(v_next, speed_limit_kmh / 3.6)
    return VehicleState(x, y, yaw, v_next * 3.6)
