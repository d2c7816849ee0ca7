"""
Image transforms for training and deployment: the six augmentations with their
steering-label corrections, and the two-step preprocessing (resize, normalize)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, List, Optional, Tuple

import cv2
import numpy as np

from .config import AUGMENTATION_PRESETS, PERSPECTIVE_CONFIG
from .errors import DataError, FrameLoadError, InvalidInputError

if TYPE_CHECKING:
    from .dataset import DrivingSample

logger = logging.getLogger(__name__)

# (height, width, 3) uint8 RGB raster
ImageU8 = np.ndarray
# (height, width, 3) float32 raster
ImageF32 = np.ndarray
Rng = np.random.Generator

SHADOW_DARKNESS = 0.65
SHADOW_POLYGONS = 4
BRIGHTNESS_BIAS = 100
PAN_FRACTION = 0.05
TILT_DEGREES = 1.0
SIDES = ('left', 'right')


def make_rng(seed) -> Rng:
    """PCG64 generator; seed is an int or a sequence of ints (same seeds, same draws everywhere)"""
    return np.random.Generator(np.random.PCG64(seed))


def check_image(img: np.ndarray) -> ImageU8:
    """Validate the ImageU8 invariants and return the image unchanged"""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected an (h, w, 3) image, got {getattr(img, 'shape', type(img))}")
    if img.dtype != np.uint8:
        raise InvalidInputError(f"expected uint8 pixels, got {img.dtype}")
    return img


@dataclass(frozen=True)
class PerspectiveShiftConfig:
    recovery_distance_m: float = PERSPECTIVE_CONFIG['recovery_distance_m']
    inter_camera_distance_m: float = PERSPECTIVE_CONFIG['inter_camera_distance_m']
    max_steering_rad: float = PERSPECTIVE_CONFIG['max_steering_rad']

    def __post_init__(self):
        if not self.recovery_distance_m > 0 or not self.inter_camera_distance_m > 0:
            raise InvalidInputError("recovery and inter-camera distances must be positive")
        if not self.max_steering_rad > 0:
            raise InvalidInputError("max_steering_rad must be positive")

    def gamma(self) -> float:
        return self.inter_camera_distance_m / self.recovery_distance_m


@dataclass(frozen=True)
class AugmentationProbabilities:
    perspective: float = 0.0
    shadows: float = 0.0
    brightness: float = 0.0
    flip: float = 0.0
    pan: float = 0.0
    tilt: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"probability '{name}' must lie in [0, 1], got {value}")

    @classmethod
    def preset(cls, name: str) -> 'AugmentationProbabilities':
        if name not in AUGMENTATION_PRESETS:
            raise InvalidInputError(f"unknown augmentation preset '{name}'")
        return cls(**AUGMENTATION_PRESETS[name])


# ---------------------------------------------------------------------------
# Perspective shift
# ---------------------------------------------------------------------------

def perspective_correction(theta: float, gamma: float, side: str) -> float:
    """
    Correct a steering angle for a frame taken by a side camera

    Args:
        theta: Center-camera steering angle in radians (positive steers right)
        gamma: Inter-camera distance over recovery distance
        side: 'left' or 'right'

    Returns:
        theta + delta for the left camera, theta - phi for the right camera
    """
    if not (math.isfinite(theta) and math.isfinite(gamma)):
        raise InvalidInputError(f"non-finite perspective input theta={theta}, gamma={gamma}")
    if gamma < 0:
        raise InvalidInputError(f"gamma must be non-negative, got {gamma}")
    if abs(theta) >= math.pi / 2:
        raise InvalidInputError(f"|theta| must be below pi/2, got {theta}")

    t = math.tan(theta)
    if side == 'left':
        return theta + math.atan2(gamma, 1.0 + t * t + gamma * t)
    if side == 'right':
        return theta - math.atan2(gamma, 1.0 + t * t - gamma * t)
    raise InvalidInputError(f"side must be 'left' or 'right', got {side!r}")


def shift_steering(steering: float, side: str, cfg: PerspectiveShiftConfig) -> float:
    """Apply the perspective correction to a normalized steering label"""
    theta = steering * cfg.max_steering_rad
    corrected = perspective_correction(theta, cfg.gamma(), side)
    return float(np.clip(corrected / cfg.max_steering_rad, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Photometric augmentations
# ---------------------------------------------------------------------------

def _quadrangle(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Order four vertices by angle around their centroid so the polygon is simple"""
    cx, cy = xs.mean(), ys.mean()
    order = np.argsort(np.arctan2(ys - cy, xs - cx), kind='stable')
    return np.stack([xs[order], ys[order]], axis=1).astype(np.int32)


def apply_shadows(img: ImageU8, rng: Rng) -> ImageU8:
    """Darken four random quadrangles in the lower half of the frame"""
    check_image(img)
    h, w = img.shape[:2]
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(SHADOW_POLYGONS):
        xs = rng.integers(0, w, size=4)
        ys = rng.integers(h // 2, h, size=4)
        cv2.fillPoly(mask, [_quadrangle(xs, ys).reshape(-1, 1, 2)], 1)

    out = img.copy()
    inside = mask.astype(bool)
    out[inside] = np.floor(img[inside].astype(np.float32) * SHADOW_DARKNESS + 0.5).astype(np.uint8)
    return out


def adjust_brightness(img: ImageU8, beta: int) -> ImageU8:
    """Add a constant bias to every pixel and channel, clamped to [0, 255]"""
    check_image(img)
    return np.clip(img.astype(np.int16) + int(beta), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Geometric augmentations
# ---------------------------------------------------------------------------

def flip_horizontal(img: ImageU8, steering: float, slot: str = 'center') -> Tuple[ImageU8, float]:
    """Mirror the pixel columns and negate the steering label (center frames only)"""
    check_image(img)
    if slot != 'center':
        raise InvalidInputError(f"only center-camera frames may be flipped, got a {slot} frame")
    return np.ascontiguousarray(img[:, ::-1]), -steering


def pan(img: ImageU8, tx: float, ty: float) -> ImageU8:
    """
    Translate by (tx * width, ty * height) pixels, crop the null border and
    resize back to the original dimensions
    """
    check_image(img)
    if tx == 0 and ty == 0:
        return img.copy()

    h, w = img.shape[:2]
    dx, dy = tx * w, ty * h
    m_t = np.float32([[1, 0, dx], [0, 1, dy]])
    shifted = cv2.warpAffine(img, m_t, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    x0, x1 = (math.ceil(dx), w) if dx > 0 else (0, w + math.floor(dx))
    y0, y1 = (math.ceil(dy), h) if dy > 0 else (0, h + math.floor(dy))
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise InvalidInputError(f"pan ({tx}, {ty}) leaves no valid region")
    return resize(shifted[y0:y1, x0:x1], w, h)


def max_axis_aligned_crop(w: float, h: float, phi: float) -> Tuple[float, float]:
    """
    Largest-area axis-aligned central rectangle inside a (w, h) image rotated by phi radians

    Returns:
        (w_roi, h_roi) from the half-constrained or fully-constrained case
    """
    if not (w > 0 and h > 0):
        raise InvalidInputError(f"image dimensions must be positive, got ({w}, {h})")
    if not math.isfinite(phi) or abs(phi) > math.pi / 4 + 1e-12:
        raise InvalidInputError(f"|phi| must not exceed pi/4, got {phi}")
    if phi == 0:
        return float(w), float(h)

    a = abs(phi)
    sin_a, cos_a = math.sin(a), math.cos(a)
    long_side, short_side = max(w, h), min(w, h)

    if short_side <= long_side * math.sin(2 * a):
        # two corners on the longer side, the other two on the mid line
        half = 0.5 * short_side
        if w >= h:
            return half / sin_a, half / cos_a
        return half / cos_a, half / sin_a

    cos_2a = cos_a * cos_a - sin_a * sin_a
    return (w * cos_a - h * sin_a) / cos_2a, (h * cos_a - w * sin_a) / cos_2a


def tilt(img: ImageU8, phi: float) -> ImageU8:
    """Rotate by phi degrees about the center, crop the maximal ROI, resize back"""
    check_image(img)
    if phi == 0:
        return img.copy()

    h, w = img.shape[:2]
    rad = math.radians(phi)
    m_r = cv2.getRotationMatrix2D((w / 2, h / 2), phi, 1.0)
    rotated = cv2.warpAffine(img, m_r, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    w_roi, h_roi = max_axis_aligned_crop(w, h, rad)
    cw = min(w, max(1, int(math.floor(w_roi))))
    ch = min(h, max(1, int(math.floor(h_roi))))
    x0, y0 = (w - cw) // 2, (h - ch) // 2
    return resize(rotated[y0:y0 + ch, x0:x0 + cw], w, h)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resize(img: ImageU8, out_w: int, out_h: int) -> ImageU8:
    """Bilinear resampling to (out_w, out_h)"""
    if out_w <= 0 or out_h <= 0:
        raise InvalidInputError(f"output size must be positive, got ({out_w}, {out_h})")
    if img.shape[1] == out_w and img.shape[0] == out_h:
        return img.copy()
    return cv2.resize(img, (int(out_w), int(out_h)), interpolation=cv2.INTER_LINEAR)


def normalize_center(img: ImageU8) -> ImageF32:
    """Map intensities v to v / 255 - 0.5"""
    return img.astype(np.float32) / np.float32(255.0) - np.float32(0.5)


def preprocess(img: ImageU8, out_w: int = 64, out_h: int = 64) -> ImageF32:
    """The deployment preprocessing: resize, then normalize and mean-center"""
    return normalize_center(resize(img, out_w, out_h))


# ---------------------------------------------------------------------------
# Augmentation pipeline
# ---------------------------------------------------------------------------

def augment_sample(
    sample: 'DrivingSample',
    probs: AugmentationProbabilities,
    cfg: PerspectiveShiftConfig,
    rng: Rng,
    load_frame: Callable[[str], ImageU8],
) -> Tuple[ImageU8, float]:
    """
    Apply perspective shift, shadows, brightness, flip, pan and tilt, in that order,
    each gated by an independent uniform draw against its probability

    Returns:
        (augmented frame, corrected normalized steering)
    """
    steering = sample.steering
    shifted = False

    draw = rng.random()
    if draw < probs.perspective:
        side = 'left' if draw < probs.perspective / 2 else 'right'
        ref = sample.left if side == 'left' else sample.right
        if ref is None:
            raise DataError(f"sample {sample.sample_id} has no {side} frame for a perspective shift")
        img = load_frame(ref)
        steering = shift_steering(steering, side, cfg)
        shifted = True
    else:
        img = load_frame(sample.center)

    if rng.random() < probs.shadows:
        img = apply_shadows(img, rng)

    if rng.random() < probs.brightness:
        img = adjust_brightness(img, int(rng.integers(-BRIGHTNESS_BIAS, BRIGHTNESS_BIAS + 1)))

    # a shifted frame is a synthetic side frame and must not be mirrored
    if rng.random() < probs.flip and not shifted:
        img, steering = flip_horizontal(img, steering)

    if rng.random() < probs.pan:
        tx, ty = rng.uniform(-PAN_FRACTION, PAN_FRACTION, size=2)
        img = pan(img, float(tx), float(ty))

    if rng.random() < probs.tilt:
        img = tilt(img, float(rng.uniform(-TILT_DEGREES, TILT_DEGREES)))

    return img, float(np.clip(steering, -1.0, 1.0))


def augmentation_preview(
    center: ImageU8,
    steering: float,
    rng: Rng,
    cfg: Optional[PerspectiveShiftConfig] = None,
    left: Optional[ImageU8] = None,
    right: Optional[ImageU8] = None,
    input_size: Tuple[int, int] = (64, 64),
) -> List[Tuple[str, ImageU8, float]]:
    """Each augmentation and preprocessing step applied on its own to one sample"""
    cfg = cfg or PerspectiveShiftConfig()
    frames = [('original', center, steering)]
    if left is not None:
        frames.append(('perspective_left', left, shift_steering(steering, 'left', cfg)))
    if right is not None:
        frames.append(('perspective_right', right, shift_steering(steering, 'right', cfg)))

    frames.append(('shadows', apply_shadows(center, rng), steering))
    beta = int(rng.integers(-BRIGHTNESS_BIAS, BRIGHTNESS_BIAS + 1))
    frames.append((f'brightness_{beta:+d}', adjust_brightness(center, beta), steering))
    flipped, flipped_steering = flip_horizontal(center, steering)
    frames.append(('flip', flipped, flipped_steering))
    tx, ty = rng.uniform(-PAN_FRACTION, PAN_FRACTION, size=2)
    frames.append(('pan', pan(center, float(tx), float(ty)), steering))
    frames.append(('tilt', tilt(center, float(rng.uniform(-TILT_DEGREES, TILT_DEGREES))), steering))

    resized = resize(center, *input_size)
    frames.append(('resized', resized, steering))
    normalized = np.clip((normalize_center(resized) + 0.5) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    frames.append(('normalized', normalized, steering))
    return frames


# ---------------------------------------------------------------------------
# Frame files
# ---------------------------------------------------------------------------

def save_image(img: ImageU8, path) -> Path:
    """Write an RGB frame as an 8-bit image file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(check_image(img), cv2.COLOR_RGB2BGR)):
        raise DataError(f"could not write image {path}")
    return path


def load_image(path) -> ImageU8:
    """Read an 8-bit image file as an RGB frame"""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FrameLoadError(f"could not read frame {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
