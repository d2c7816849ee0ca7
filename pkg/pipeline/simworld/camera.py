"""
Onboard camera rig and the ground-plane renderer

The track is rasterized once into a top-down texture; every frame is a
perspective resampling of that texture (cv2.remap) plus sky, cones and light.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Tuple

import cv2
import numpy as np

from ..config import CAMERA_CONFIG
from ..errors import InvalidInputError
from ..imgproc import ImageU8
from .scenario import Pose, TrackScenario

logger = logging.getLogger(__name__)

TEXTURE_RESOLUTION_M = 0.1
TEXTURE_MARGIN_M = 70.0
SUBPIXEL_SHIFT = 4
_SCALE = 1 << SUBPIXEL_SHIFT

GRASS = (70, 120, 55)
ROAD = (95, 95, 100)
BRIDGE = (150, 140, 125)
EDGE_LINE = (235, 235, 235)
DIVIDER_LINE = (230, 200, 60)
SKY = (150, 195, 235)
CONE = (240, 120, 20)
PROP = (80, 60, 40)

EDGE_INSET_M = 0.3
LINE_WIDTH_M = 0.15
DASH_LENGTH_M = 3.0
DASH_PERIOD_M = 6.0
CONE_HEIGHT_M = 0.8
PROP_SHADOW_DARKNESS = 0.6
MAX_SHADOW_M = 60.0
SLOTS = ('center', 'left', 'right')


@dataclass(frozen=True)
class CameraRig:
    count: int = CAMERA_CONFIG['count']
    inter_camera_distance_m: float = CAMERA_CONFIG['inter_camera_distance_m']
    height_m: float = CAMERA_CONFIG['height_m']
    pitch_deg: float = CAMERA_CONFIG['pitch_deg']
    fov_deg: float = CAMERA_CONFIG['fov_deg']
    width: int = CAMERA_CONFIG['width']
    height: int = CAMERA_CONFIG['height']
    max_range_m: float = CAMERA_CONFIG['max_range_m']

    def __post_init__(self):
        if self.count not in (1, 3):
            raise InvalidInputError(f"camera count must be 1 or 3, got {self.count}")
        if not 0 < self.fov_deg < 180 or self.width < 2 or self.height < 2:
            raise InvalidInputError("invalid camera intrinsics")

    @property
    def slots(self) -> Tuple[str, ...]:
        return SLOTS[:self.count]

    @property
    def focal_px(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    def lateral_offset(self, slot: str) -> float:
        """Camera position to the left (+) of the vehicle axis"""
        if slot == 'center':
            return 0.0
        if slot == 'left':
            return self.inter_camera_distance_m / 2.0
        if slot == 'right':
            return -self.inter_camera_distance_m / 2.0
        raise InvalidInputError(f"unknown camera slot '{slot}'")


@dataclass(frozen=True)
class GroundTexture:
    image: np.ndarray
    x0: float
    y_top: float
    resolution: float


@lru_cache(maxsize=8)
def _ground_rays(rig: CameraRig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel ground intersection (forward, left) in the camera frame, and the sky mask"""
    f = rig.focal_px
    p = math.radians(rig.pitch_deg)
    xc = (np.arange(rig.width) - (rig.width - 1) / 2.0) / f
    yc = (np.arange(rig.height) - (rig.height - 1) / 2.0) / f
    denom = math.sin(p) + yc * math.cos(p)
    hits = denom > 1e-9
    t = np.where(hits, rig.height_m / np.where(hits, denom, 1.0), 0.0)
    fwd_row = t * (math.cos(p) - yc * math.sin(p))
    visible = hits & (fwd_row <= rig.max_range_m)
    fwd = np.repeat(np.where(visible, fwd_row, 0.0)[:, None], rig.width, axis=1)
    left = np.where(visible[:, None], -t[:, None] * xc[None, :], 0.0)
    sky = np.repeat(~visible[:, None], rig.width, axis=1)
    return fwd, left, sky


def _to_px(points: np.ndarray, tex_x0: float, tex_y_top: float, res: float) -> np.ndarray:
    px = np.column_stack([(points[:, 0] - tex_x0) / res, (tex_y_top - points[:, 1]) / res])
    return np.round(px * _SCALE).astype(np.int32)


def _runs(mask: np.ndarray):
    """(start, stop) index runs where a cyclic boolean mask is set"""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    stops = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    return list(zip(starts, stops))


@lru_cache(maxsize=4)
def ground_texture(key: TrackScenario) -> GroundTexture:
    """Top-down raster of road, markings and prop shadows (light intensity excluded)"""
    line = key.centerline
    half = (line.width / 2.0)[:, None]
    left_edge = line.xy + line.normal * half
    right_edge = line.xy - line.normal * half
    prop_xy = np.array([key.centerline.point_at(p.station, p.offset) for p in key.props]).reshape(-1, 2)
    extent = np.vstack([left_edge, right_edge, prop_xy])
    x0 = float(extent[:, 0].min() - TEXTURE_MARGIN_M)
    y_top = float(extent[:, 1].max() + TEXTURE_MARGIN_M)
    res = TEXTURE_RESOLUTION_M
    w = int(math.ceil((extent[:, 0].max() + TEXTURE_MARGIN_M - x0) / res))
    h = int(math.ceil((y_top - extent[:, 1].min() + TEXTURE_MARGIN_M) / res))
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = GRASS

    def px(points):
        return _to_px(points, x0, y_top, res)

    aa = dict(lineType=cv2.LINE_AA, shift=SUBPIXEL_SHIFT)
    cv2.fillPoly(img, [px(left_edge), px(right_edge)], ROAD, **aa)

    for i, tag in enumerate(line.tags):
        if tag == 'bridge':
            j = (i + 1) % len(line)
            quad = np.array([left_edge[i], left_edge[j], right_edge[j], right_edge[i]])
            cv2.fillConvexPoly(img, px(quad), BRIDGE, **aa)

    thickness = max(1, int(round(LINE_WIDTH_M / res)))
    inset = half - EDGE_INSET_M
    for edge in (line.xy + line.normal * inset, line.xy - line.normal * inset):
        cv2.polylines(img, [px(edge)], True, EDGE_LINE, thickness, **aa)

    if key.divider == 'solid':
        cv2.polylines(img, [px(line.xy)], True, DIVIDER_LINE, thickness, **aa)
    elif key.divider == 'dashed':
        for start, stop in _runs((line.s % DASH_PERIOD_M) < DASH_LENGTH_M):
            cv2.polylines(img, [px(line.xy[start:stop + 1])], False, DIVIDER_LINE, thickness, **aa)

    elevation = math.radians(key.light.direction_deg)
    for prop, (cx, cy) in zip(key.props, prop_xy):
        r = prop.size / 2.0
        footprint = np.array([(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r), (cx - r, cy + r)])
        reach = float(np.clip(prop.height / math.tan(elevation), -MAX_SHADOW_M, MAX_SHADOW_M))
        hull = cv2.convexHull(px(np.vstack([footprint, footprint - (0.0, reach)])))
        mask = np.zeros(img.shape[:2], dtype=np.uint8)
        cv2.fillConvexPoly(mask, hull, 255, lineType=cv2.LINE_8, shift=SUBPIXEL_SHIFT)
        shaded = mask > 0
        img[shaded] = (img[shaded].astype(np.float32) * PROP_SHADOW_DARKNESS + 0.5).astype(np.uint8)
        cv2.fillConvexPoly(img, px(footprint), PROP, **aa)

    logger.debug(f"Rasterized ground texture for '{key.id}': {w}x{h} px")
    return GroundTexture(img, x0, y_top, res)


class Renderer:
    """Renders camera frames of one scenario; frames depend only on (scenario, pose, slot)"""

    def __init__(self, scenario: TrackScenario, rig: CameraRig = CameraRig()):
        self.scenario = scenario
        self.rig = rig
        self.texture = ground_texture(scenario.render_key())
        self._cones = np.array([scenario.obstacle_xy(o) + (o.radius,) for o in scenario.obstacles]).reshape(-1, 3)

    def render(self, pose: Pose, slot: str = 'center') -> ImageU8:
        rig, tex = self.rig, self.texture
        fwd, left, sky = _ground_rays(rig)
        offset = rig.lateral_offset(slot)
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        lat = left + offset
        wx = pose.x + fwd * c - lat * s
        wy = pose.y + fwd * s + lat * c
        map_x = ((wx - tex.x0) / tex.resolution).astype(np.float32)
        map_y = ((tex.y_top - wy) / tex.resolution).astype(np.float32)
        img = cv2.remap(tex.image, map_x, map_y, cv2.INTER_LINEAR,
                        borderMode=cv2.BORDER_CONSTANT, borderValue=GRASS)
        img[sky] = SKY
        self._draw_cones(img, pose.x - offset * s, pose.y + offset * c, c, s)

        scale = self.scenario.light.brightness_scale
        if scale != 1.0:
            img = np.clip(np.rint(img.astype(np.float32) * np.float32(scale)), 0, 255).astype(np.uint8)
        return img

    def render_rig(self, pose: Pose) -> Dict[str, ImageU8]:
        return {slot: self.render(pose, slot) for slot in self.rig.slots}

    def _draw_cones(self, img: ImageU8, cam_x: float, cam_y: float, c: float, s: float):
        if len(self._cones) == 0:
            return
        rig = self.rig
        f = rig.focal_px
        p = math.radians(rig.pitch_deg)
        rel = self._cones[:, :2] - (cam_x, cam_y)
        forward = rel[:, 0] * c + rel[:, 1] * s
        lateral = -rel[:, 0] * s + rel[:, 1] * c
        up = CONE_HEIGHT_M / 2.0 - rig.height_m
        z = forward * math.cos(p) - up * math.sin(p)
        y = -forward * math.sin(p) - up * math.cos(p)
        keep = (z > 0.5) & (forward <= rig.max_range_m)
        for k in np.argsort(-z):
            if not keep[k]:
                continue
            u = (rig.width - 1) / 2.0 + f * -lateral[k] / z[k]
            v = (rig.height - 1) / 2.0 + f * y[k] / z[k]
            radius = f * self._cones[k, 2] / z[k]
            if not (-radius <= u <= rig.width + radius and -radius <= v <= rig.height + radius):
                continue
            cv2.circle(img, (int(round(u * _SCALE)), int(round(v * _SCALE))), max(_SCALE, int(round(radius * _SCALE))),
                       CONE, -1, lineType=cv2.LINE_AA, shift=SUBPIXEL_SHIFT)


def render_camera(scenario: TrackScenario, pose: Pose, slot: str = 'center', rig: CameraRig = CameraRig()) -> ImageU8:
    """One frame from a rig slot"""
    return Renderer(scenario, rig).render(pose, slot)
