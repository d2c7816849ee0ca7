"""
Scripted demonstrator: pure pursuit on an obstacle-aware, laterally offset
reference path, longitudinal command from the coupled control law
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..control import ControlConfig, coupled_control, split_command
from ..imgproc import ImageU8, make_rng
from .scenario import TrackScenario
from .vehicle import VehicleParams, VehicleState

LOOKAHEAD_MIN_M = 4.0
LOOKAHEAD_GAIN_S = 0.25


@dataclass(frozen=True)
class ExpertConfig:
    lookahead_min_m: float = LOOKAHEAD_MIN_M
    lookahead_gain_s: float = LOOKAHEAD_GAIN_S
    avoid_offset_m: float = 2.0
    avoid_window_m: float = 10.0
    wander_amplitude_m: float = 0.0
    wander_seed: int = 0


class ExpertDriver:
    """
    Pure-pursuit demonstrator bound to one scenario

    Steering is normalized and positive to the right. With a non-zero wander
    amplitude the reference path drifts smoothly (two seeded sinusoids over station).
    """

    needs_frame = False

    def __init__(
        self,
        scenario: TrackScenario,
        cfg: ExpertConfig = ExpertConfig(),
        vehicle: VehicleParams = VehicleParams(),
        control: Optional[ControlConfig] = None,
    ):
        self.scenario = scenario
        self.cfg = cfg
        self.vehicle = vehicle
        self.control = control or ControlConfig(speed_limit_kmh=scenario.speed_limit_kmh)
        rng = make_rng(cfg.wander_seed)
        self._wander_phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
        self._wander_period = (60.0 + 20.0 * rng.random(), 23.0 + 7.0 * rng.random())

    def driver_for(self, scenario: TrackScenario) -> 'ExpertDriver':
        return ExpertDriver(scenario, self.cfg, self.vehicle, None)

    def _wander(self, station: float) -> float:
        if not self.cfg.wander_amplitude_m:
            return 0.0
        a = self.cfg.wander_amplitude_m
        p1, p2 = self._wander_period
        return a * (0.6 * math.sin(2 * math.pi * station / p1 + self._wander_phase[0])
                    + 0.4 * math.sin(2 * math.pi * station / p2 + self._wander_phase[1]))

    def reference_offset(self, station: float) -> float:
        """Lateral target at a station: lane center, blended around cones, plus wander"""
        line = self.scenario.centerline
        base = self.scenario.lane_center(station)
        target = base
        window = self.cfg.avoid_window_m
        for ob in self.scenario.obstacles:
            gap = line.station_delta(ob.station, station)
            if abs(gap) < window:
                weight = 0.5 * (1.0 + math.cos(math.pi * gap / window))
                side = -1.0 if ob.offset >= 0 else 1.0
                target += weight * (side * self.cfg.avoid_offset_m - base)
        return target + self._wander(station)

    def steer(self, state: VehicleState) -> float:
        line = self.scenario.centerline
        station, _ = line.project(state.x, state.y)
        lookahead = max(self.cfg.lookahead_min_m,
                        self.cfg.lookahead_min_m + self.cfg.lookahead_gain_s * state.v / 3.6)
        target_station = station + lookahead
        tx, ty = line.point_at(target_station, self.reference_offset(target_station))
        dx, dy = tx - state.x, ty - state.y
        c, s = math.cos(state.yaw), math.sin(state.yaw)
        forward = dx * c + dy * s
        left = -dx * s + dy * c
        distance = math.hypot(forward, left)
        if distance < 1e-6:
            return 0.0
        alpha = math.atan2(left, forward)
        angle = math.atan(2.0 * self.vehicle.wheelbase_m * math.sin(alpha) / distance)
        return float(np.clip(-angle / self.vehicle.max_steering_rad, -1.0, 1.0))

    def act(self, state: VehicleState, frame: Optional[ImageU8] = None) -> float:
        return self.steer(state)

    def command(self, state: VehicleState) -> Tuple[float, float, float]:
        """(steering, throttle, brake)"""
        steering = self.steer(state)
        throttle, brake = split_command(coupled_control(steering, state.v, self.control))
        return steering, throttle, brake


class ExpertPolicy:
    """Expert stand-in for a trained model: binds a fresh ExpertDriver to each scenario"""

    needs_frame = False

    def __init__(self, cfg: ExpertConfig = ExpertConfig(), vehicle: VehicleParams = VehicleParams()):
        self.cfg = cfg
        self.vehicle = vehicle

    def driver_for(self, scenario: TrackScenario) -> ExpertDriver:
        return ExpertDriver(scenario, self.cfg, self.vehicle)


def expert_policy(
    scenario: TrackScenario,
    state: VehicleState,
    cfg: ExpertConfig = ExpertConfig(),
    control: Optional[ControlConfig] = None,
) -> Tuple[float, float, float]:
    """(steering, throttle, brake) the demonstrator applies in a given state"""
    return ExpertDriver(scenario, cfg, control=control).command(state)
