"""
Desk-scale driving simulator: scenarios, vehicle, camera, expert and closed-loop runner
"""

from .camera import CameraRig, Renderer, render_camera
from .expert import ExpertConfig, ExpertDriver, ExpertPolicy, expert_policy
from .runner import (
    CollectionResult,
    ConstantDriver,
    DeployConfig,
    LapLog,
    ModelDriver,
    collect,
    compare_laps,
    deploy,
    read_lap_log,
)
from .scenario import (
    SCENARIO_IDS,
    Obstacle,
    Pose,
    ScenarioVariation,
    TrackScenario,
    builtin_scenario,
    load_scenario,
    place_obstacles,
    resolve_scenario,
    write_scenario,
)
from .vehicle import VehicleParams, VehicleState, step_vehicle

__all__ = [
    'CameraRig', 'Renderer', 'render_camera',
    'ExpertConfig', 'ExpertDriver', 'ExpertPolicy', 'expert_policy',
    'CollectionResult', 'ConstantDriver', 'DeployConfig', 'LapLog', 'ModelDriver',
    'collect', 'compare_laps', 'deploy', 'read_lap_log',
    'SCENARIO_IDS', 'Obstacle', 'Pose', 'ScenarioVariation', 'TrackScenario',
    'builtin_scenario', 'load_scenario', 'place_obstacles', 'resolve_scenario', 'write_scenario',
    'VehicleParams', 'VehicleState', 'step_vehicle',
]
