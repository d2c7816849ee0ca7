"""
Configuration for the behavioral-cloning workbench
"""

import math
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Data root for manifests, frames, models and reports (override with BCW_DATA_ROOT)
DATA_ROOT = os.environ.get('BCW_DATA_ROOT', 'data')

# Built-in scenario files live next to the code
SCENARIO_DIR = str(Path(__file__).parent / 'scenarios')

# Simulated camera
CAMERA_CONFIG = {
    'width': 320,
    'height': 160,
    'fov_deg': 60.0,
    'height_m': 1.4,
    'pitch_deg': 10.0,
    'max_range_m': 80.0,
    'inter_camera_distance_m': 0.95,  # left/right at +-0.475 m
    'count': 3,
}

# Kinematic bicycle stand-in for the simulator dynamics
VEHICLE_CONFIG = {
    'wheelbase_m': 2.6,
    'max_steering_deg': 25.0,
    'max_accel_mps2': 3.0,
    'max_brake_mps2': 6.0,
    'drag_per_s': 0.05,
    'half_width_m': 0.95,
}

# Perspective shift geometry (constant recovery distance, 1.9 m wide vehicle)
PERSPECTIVE_CONFIG = {
    'recovery_distance_m': 10.0,
    'inter_camera_distance_m': 0.95,
    'max_steering_rad': math.radians(25.0),
}

# Probability of applying each augmentation; 'none' is the ablation preset
AUGMENTATION_PRESETS = {
    'simplistic': {'perspective': 0.50, 'shadows': 0.30, 'brightness': 0.40,
                   'flip': 0.50, 'pan': 0.10, 'tilt': 0.05},
    'rigorous': {'perspective': 0.50, 'shadows': 0.30, 'brightness': 0.40,
                 'flip': 0.00, 'pan': 0.10, 'tilt': 0.05},
    'collision': {'perspective': 0.00, 'shadows': 0.30, 'brightness': 0.40,
                  'flip': 0.50, 'pan': 0.10, 'tilt': 0.05},
    'none': {'perspective': 0.0, 'shadows': 0.0, 'brightness': 0.0,
             'flip': 0.0, 'pan': 0.0, 'tilt': 0.0},
}

# Zero-steering deletion rate
BALANCE_PRESETS = {
    'simplistic': {'deletion_rate': 0.7, 'zero_epsilon': 1e-6},
    'rigorous': {'deletion_rate': 0.8, 'zero_epsilon': 1e-6},
    'collision': {'deletion_rate': 0.8, 'zero_epsilon': 1e-6},
}

# Training hyperparameters
TRAINING_PRESETS = {
    'simplistic': {'epochs': 5, 'batch_size': 256, 'augmentation_loops': 64, 'learning_rate': 1e-3},
    'rigorous': {'epochs': 10, 'batch_size': 256, 'augmentation_loops': 64, 'learning_rate': 1e-3},
    'collision': {'epochs': 5, 'batch_size': 256, 'augmentation_loops': 64, 'learning_rate': 1e-3},
}

# Demonstration collection (laps per behavior, bi-directional driving)
COLLECTION_PRESETS = {
    'simplistic': {'scenario': 'simplistic', 'laps': 10, 'bidirectional': True, 'cameras': 3},
    'rigorous': {'scenario': 'rigorous', 'laps': 20, 'bidirectional': False, 'cameras': 3},
    'collision': {'scenario': 'collision', 'laps': 20, 'bidirectional': False, 'cameras': 1},
}

COLLECTION_CONFIG = {
    'rate_hz': 1.5,
    'sim_rate_hz': 30.0,
    'wander_amplitude_m': 0.3,
    'split_ratio': 0.8,
    'histogram_bins': 25,
}

# Closed-loop deployment
DEPLOY_CONFIG = {
    'control_rate_hz': 30.0,
    'speed_limit_kmh': 25.0,  # reduced w.r.t. the 30 km/h used while collecting
    'aggressiveness_tau': 1.0,
    'steering_limit': 1.0,
    'contact_margin_m': 1.0,
    'stall_speed_kmh': 0.5,
    'stall_seconds': 5.0,
    'timeout_factor': 4.0,
}

# Robustness experiments
EXPERIMENT_CONFIG = {
    'interference_seconds': 6.0,
    'max_sweep_steps': 20,
    'laps_per_condition': 1,
    'light_intensity_step': 0.1,
    'light_direction_step_deg': 1.0,
    'orientation_step_deg': 5.0,
    'speed_limit_start_kmh': 30.0,
    'speed_limit_step_kmh': 5.0,
    'obstacle_sets': [20, 10, 0],
    'workers': 1,
}

# Run tracking: DuckDB ledger plus optional dlt publishing
TRACKING_CONFIG = {
    'tracking_db': os.environ.get('BCW_TRACKING_DB', 'workbench_tracking.duckdb'),
    'publish': False,
    'pipeline_name': 'behavior_cloning_workbench',
    'dataset_name': 'workbench_runs',
    'destination_db': 'workbench_runs.duckdb',
}
