"""
Coupled longitudinal control: throttle and brake from predicted steering and speed
"""

import math
from dataclasses import dataclass
from typing import Tuple

from .config import DEPLOY_CONFIG
from .errors import InvalidInputError


@dataclass(frozen=True)
class ControlConfig:
    """
    Speed limit v_l (km/h), steering limit delta (same unit as the steering it
    divides, normalized by default) and aggressiveness tau
    """

    speed_limit_kmh: float = DEPLOY_CONFIG['speed_limit_kmh']
    steering_limit: float = DEPLOY_CONFIG['steering_limit']
    aggressiveness: float = DEPLOY_CONFIG['aggressiveness_tau']

    def __post_init__(self):
        if not self.speed_limit_kmh > 0 or not math.isfinite(self.speed_limit_kmh):
            raise InvalidInputError(f"speed limit must be positive, got {self.speed_limit_kmh}")
        if not self.steering_limit > 0 or not math.isfinite(self.steering_limit):
            raise InvalidInputError(f"steering limit must be positive, got {self.steering_limit}")
        if not 0.0 <= self.aggressiveness <= 1.0:
            raise InvalidInputError(f"aggressiveness must lie in [0, 1], got {self.aggressiveness}")


def coupled_control(theta: float, v_a: float, cfg: ControlConfig) -> float:
    """
    xi = tau * ((v_l - v_a) / v_l - |theta| / delta), clamped to [-1, 1]

    |theta| is clamped to delta first; positive xi is throttle, negative is brake.
    """
    if not math.isfinite(theta) or not math.isfinite(v_a):
        raise InvalidInputError(f"non-finite control input (theta={theta}, v_a={v_a})")
    if v_a < 0:
        raise InvalidInputError(f"speed must be non-negative, got {v_a}")
    steer_ratio = min(abs(theta), cfg.steering_limit) / cfg.steering_limit
    xi = cfg.aggressiveness * ((cfg.speed_limit_kmh - v_a) / cfg.speed_limit_kmh - steer_ratio)
    return max(-1.0, min(1.0, xi))


def split_command(xi: float) -> Tuple[float, float]:
    """(throttle, brake) from the signed command; at most one is non-zero"""
    if not -1.0 <= xi <= 1.0:
        raise InvalidInputError(f"command must lie in [-1, 1], got {xi}")
    return max(xi, 0.0), max(-xi, 0.0)
