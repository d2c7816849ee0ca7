"""
Track scenarios: closed centerlines, lane layout, cones, trackside props and
scene lighting, plus the structured text format they are stored in
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import splev, splprep
from scipy.spatial import cKDTree

from ..config import SCENARIO_DIR
from ..errors import InvalidInputError, ScenarioError
from ..imgproc import Rng, make_rng

logger = logging.getLogger(__name__)

SCENARIO_IDS = ('simplistic', 'rigorous', 'collision')
CORRIDORS = ('road', 'lane')
DIVIDERS = ('none', 'solid', 'dashed')
SAMPLE_SPACING_M = 1.0


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]"""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float


@dataclass(frozen=True)
class TrackVertex:
    """Raw centerline vertex; the tag applies to the segment that starts here"""

    x: float
    y: float
    width: float
    tag: str = 'asphalt'


@dataclass(frozen=True)
class Obstacle:
    """Cone at a station along the centerline, offset to the left (+) or right (-)"""

    station: float
    offset: float
    radius: float = 0.6


@dataclass(frozen=True)
class Prop:
    """Trackside box that casts a shadow on the ground"""

    station: float
    offset: float
    height: float
    size: float


@dataclass(frozen=True)
class SceneLight:
    """
    intensity in cd-equivalents, scaled to rendered brightness by scale_per_cd;
    direction is the light elevation in degrees within the scene Y-Z plane
    """

    intensity: float = 1.0
    direction_deg: float = 60.0
    scale_per_cd: float = 1.0

    def __post_init__(self):
        if not self.intensity >= 0 or not math.isfinite(self.intensity):
            raise InvalidInputError(f"light intensity must be >= 0, got {self.intensity}")
        if not 0.0 < self.direction_deg < 180.0:
            raise InvalidInputError(f"light elevation must lie in (0, 180) degrees, got {self.direction_deg}")
        if not self.scale_per_cd > 0:
            raise InvalidInputError("scale_per_cd must be positive")

    @property
    def brightness_scale(self) -> float:
        return self.intensity * self.scale_per_cd


class Centerline:
    """
    Closed periodic spline through the raw vertices, resampled at ~1 m spacing

    Lateral offsets are positive to the left of the travel direction.
    """

    def __init__(self, vertices: Tuple[TrackVertex, ...], spacing: float = SAMPLE_SPACING_M):
        n = len(vertices)
        xy = np.array([(v.x, v.y) for v in vertices], dtype=np.float64)
        closed = np.vstack([xy, xy[:1]])
        degree = 3 if n >= 4 else 1
        try:
            tck, u = splprep([closed[:, 0], closed[:, 1]], s=0, per=True, k=degree)
        except (ValueError, TypeError) as e:
            raise ScenarioError(f"cannot fit a closed centerline through {n} vertices: {e}") from e

        dense_u = np.linspace(0.0, 1.0, max(4000, 40 * n))
        dx, dy = splev(dense_u, tck)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(dx), np.diff(dy)))])
        self.length = float(cum[-1])
        m = max(16, int(round(self.length / spacing)))
        self.spacing = self.length / m
        self.s = np.arange(m) * self.spacing
        u_at = np.interp(self.s, cum, dense_u)

        x, y = splev(u_at, tck)
        tx, ty = splev(u_at, tck, der=1)
        norm = np.hypot(tx, ty)
        self.xy = np.column_stack([x, y])
        self.tangent = np.column_stack([tx / norm, ty / norm])
        self.normal = np.column_stack([-self.tangent[:, 1], self.tangent[:, 0]])

        widths = np.array([v.width for v in vertices] + [vertices[0].width])
        self.width = np.interp(u_at, u, widths)
        segment = np.clip(np.searchsorted(u, u_at, side='right') - 1, 0, n - 1)
        self.tags = [vertices[i].tag for i in segment]
        self._tree = cKDTree(self.xy)

    def __len__(self) -> int:
        return len(self.s)

    def _index(self, station: float) -> Tuple[int, int, float]:
        station = station % self.length
        pos = station / self.spacing
        i = int(pos) % len(self.s)
        return i, (i + 1) % len(self.s), pos - int(pos)

    def point_at(self, station: float, offset: float = 0.0) -> Tuple[float, float]:
        i, j, f = self._index(station)
        p = self.xy[i] * (1 - f) + self.xy[j] * f
        nrm = self.normal[i] * (1 - f) + self.normal[j] * f
        nrm /= np.hypot(*nrm)
        return float(p[0] + offset * nrm[0]), float(p[1] + offset * nrm[1])

    def heading_at(self, station: float) -> float:
        i, j, f = self._index(station)
        t = self.tangent[i] * (1 - f) + self.tangent[j] * f
        return math.atan2(t[1], t[0])

    def width_at(self, station: float) -> float:
        i, j, f = self._index(station)
        return float(self.width[i] * (1 - f) + self.width[j] * f)

    def tag_at(self, station: float) -> str:
        return self.tags[self._index(station)[0]]

    def project(self, x: float, y: float) -> Tuple[float, float]:
        """(station, signed lateral offset) of the closest centerline point"""
        _, i = self._tree.query((x, y))
        best = None
        for a in ((i - 1) % len(self.s), i):
            b = (a + 1) % len(self.s)
            seg = self.xy[b] - self.xy[a]
            rel = np.array((x, y)) - self.xy[a]
            t = float(np.clip(rel @ seg / (seg @ seg), 0.0, 1.0))
            foot = self.xy[a] + t * seg
            dist = float(np.hypot(*(np.array((x, y)) - foot)))
            if best is None or dist < best[0]:
                lateral = float((np.array((x, y)) - foot) @ self.normal[a])
                best = (dist, (self.s[a] + t * self.spacing) % self.length, lateral)
        return best[1], best[2]

    def station_delta(self, s_from: float, s_to: float) -> float:
        """Signed progress between two stations, wrapped to (-L/2, L/2]"""
        d = (s_to - s_from) % self.length
        return d - self.length if d > self.length / 2 else d

    def self_intersects(self) -> bool:
        a = self.xy
        b = np.roll(self.xy, -1, axis=0)
        d = b - a
        m = len(a)

        def cross(u, v):
            return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

        o1 = cross(d[:, None], a[None, :] - a[:, None])
        o2 = cross(d[:, None], b[None, :] - a[:, None])
        o3 = cross(d[None, :], a[:, None] - a[None, :])
        o4 = cross(d[None, :], b[:, None] - a[None, :])
        hits = (o1 * o2 < 0) & (o3 * o4 < 0)
        idx = np.arange(m)
        gap = np.abs(idx[:, None] - idx[None, :])
        hits &= (gap > 1) & (gap < m - 1)
        return bool(hits.any())


@dataclass(frozen=True)
class TrackScenario:
    id: str
    vertices: Tuple[TrackVertex, ...]
    obstacles: Tuple[Obstacle, ...] = ()
    props: Tuple[Prop, ...] = ()
    light: SceneLight = field(default_factory=SceneLight)
    speed_limit_kmh: float = 30.0
    spawn: Optional[Pose] = None
    lanes: int = 1
    corridor: str = 'road'
    divider: str = 'none'

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ScenarioError(f"scenario '{self.id}' needs at least 3 centerline vertices")
        if any(v.width <= 0 for v in self.vertices):
            raise ScenarioError(f"scenario '{self.id}' has a non-positive road width")
        if self.corridor not in CORRIDORS:
            raise ScenarioError(f"unknown corridor '{self.corridor}'")
        if self.divider not in DIVIDERS:
            raise ScenarioError(f"unknown divider '{self.divider}'")
        if self.lanes not in (1, 2) or (self.corridor == 'lane' and self.lanes != 2):
            raise ScenarioError("lane corridors need exactly 2 lanes")
        if not self.speed_limit_kmh > 0:
            raise ScenarioError("speed limit must be positive")

    @cached_property
    def centerline(self) -> Centerline:
        return Centerline(self.vertices)

    @property
    def length(self) -> float:
        return self.centerline.length

    @property
    def lane_offset(self) -> float:
        """Lateral offset of the reference lane center (right lane when lane keeping)"""
        if self.corridor == 'lane':
            return -self.vertices[0].width / 4.0
        return 0.0

    def lane_center(self, station: float) -> float:
        if self.corridor == 'lane':
            return -self.centerline.width_at(station) / 4.0
        return 0.0

    def corridor_bounds(self, station: float) -> Tuple[float, float]:
        """(min, max) lateral offset of the drivable corridor at a station"""
        half = self.centerline.width_at(station) / 2.0
        return (-half, 0.0) if self.corridor == 'lane' else (-half, half)

    def spawn_pose(self) -> Pose:
        if self.spawn is not None:
            return self.spawn
        return self.pose_at(0.0)

    def pose_at(self, station: float) -> Pose:
        """Reference-lane pose at a station, yaw tangent to the travel direction"""
        x, y = self.centerline.point_at(station, self.lane_center(station))
        return Pose(x, y, self.centerline.heading_at(station))

    def obstacle_xy(self, obstacle: Obstacle) -> Tuple[float, float]:
        return self.centerline.point_at(obstacle.station, obstacle.offset)

    def validate(self) -> 'TrackScenario':
        """Check the geometric invariants; returns self"""
        line = self.centerline
        if line.self_intersects():
            raise ScenarioError(f"scenario '{self.id}' centerline intersects itself")
        for ob in self.obstacles:
            half = line.width_at(ob.station) / 2.0
            if ob.radius <= 0 or abs(ob.offset) + ob.radius > half:
                raise ScenarioError(f"cone at station {ob.station} lies off the road")
            if 2.0 * ob.radius > half:
                raise ScenarioError(f"cone at station {ob.station} blocks more than half the road")
        return self

    def reversed(self) -> 'TrackScenario':
        """Same track driven the other way round from the same start point"""
        n = len(self.vertices)
        order = [0] + list(range(n - 1, 0, -1))
        # reversed segment k runs from order[k] to order[k+1]; it is original segment order[k+1]
        vertices = tuple(
            replace(self.vertices[order[k]], tag=self.vertices[order[(k + 1) % n]].tag)
            for k in range(n)
        )
        length = self.length
        spawn = None
        if self.spawn is not None:
            spawn = replace(self.spawn, yaw=wrap_angle(self.spawn.yaw + math.pi))
        return replace(
            self,
            vertices=vertices,
            obstacles=tuple(replace(o, station=(length - o.station) % length, offset=-o.offset)
                            for o in self.obstacles),
            props=tuple(replace(p, station=(length - p.station) % length, offset=-p.offset)
                        for p in self.props),
            spawn=spawn,
        )

    def render_key(self) -> 'TrackScenario':
        """Copy with only the fields that change the ground texture"""
        return replace(self, light=replace(self.light, intensity=1.0, scale_per_cd=1.0),
                       speed_limit_kmh=30.0, spawn=None)


@dataclass(frozen=True)
class ScenarioVariation:
    """
    Departure from the conditions a model was trained in; unset axes keep the scenario as is
    """

    light_intensity_delta: float = 0.0
    light_direction_delta: float = 0.0
    spawn_station: Optional[float] = None
    spawn_position: Optional[Pose] = None
    spawn_yaw_delta: float = 0.0
    heading_inverted: bool = False
    speed_limit_kmh: Optional[float] = None
    obstacle_count: Optional[int] = None
    obstacle_seed: int = 0

    def apply(self, scenario: TrackScenario) -> TrackScenario:
        sc = scenario.reversed() if self.heading_inverted else scenario
        if self.obstacle_count is not None:
            sc = place_obstacles(sc, self.obstacle_count, make_rng(self.obstacle_seed))
        light = replace(
            sc.light,
            intensity=round(sc.light.intensity + self.light_intensity_delta, 9),
            direction_deg=round(sc.light.direction_deg + self.light_direction_delta, 9),
        )
        if self.spawn_position is not None:
            spawn = self.spawn_position
        elif self.spawn_station is not None:
            spawn = sc.pose_at(self.spawn_station)
        else:
            spawn = sc.spawn_pose()
        if self.spawn_yaw_delta:
            spawn = replace(spawn, yaw=wrap_angle(spawn.yaw + math.radians(self.spawn_yaw_delta)))
        return replace(
            sc,
            light=light,
            spawn=spawn,
            speed_limit_kmh=self.speed_limit_kmh if self.speed_limit_kmh is not None else sc.speed_limit_kmh,
        )


def place_obstacles(
    scenario: TrackScenario,
    count: int,
    rng: Rng,
    min_gap_m: float = 15.0,
    start_margin_m: float = 20.0,
    radius: float = 0.6,
) -> TrackScenario:
    """
    Re-randomized cone layout: `count` cones at least min_gap_m apart, alternating
    sides at |offset| within [w/4 - 0.5, w/4 + 0.5]
    """
    if count < 0:
        raise InvalidInputError(f"obstacle count must be >= 0, got {count}")
    if count == 0:
        return replace(scenario, obstacles=())
    usable = scenario.length - 2.0 * start_margin_m
    spacing = usable / count
    if spacing < min_gap_m:
        raise InvalidInputError(f"{count} cones do not fit {scenario.length:.0f} m with a {min_gap_m} m gap")

    slack = (spacing - min_gap_m) / 2.0
    first_side = 1.0 if rng.random() < 0.5 else -1.0
    obstacles = []
    for k in range(count):
        station = start_margin_m + (k + 0.5) * spacing + float(rng.uniform(-slack, slack))
        quarter = scenario.centerline.width_at(station) / 4.0
        magnitude = float(rng.uniform(quarter - 0.5, quarter + 0.5))
        side = first_side if k % 2 == 0 else -first_side
        obstacles.append(Obstacle(station=round(station, 3), offset=round(side * magnitude, 3), radius=radius))
    return replace(scenario, obstacles=tuple(obstacles)).validate()


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_SECTIONS = ('centerline', 'obstacles', 'props')


def _numbers(parts: List[str], count: int, path, lineno: int) -> List[float]:
    if len(parts) < count:
        raise ScenarioError(f"{path}:{lineno}: expected {count} values, got {len(parts)}")
    try:
        return [float(p) for p in parts[:count]]
    except ValueError:
        raise ScenarioError(f"{path}:{lineno}: not a number in {' '.join(parts)!r}") from None


def parse_scenario(text: str, path='<scenario>') -> TrackScenario:
    """
    Parse the scenario text format

    `key = value` lines, then [centerline] ("x y width [tag]"), [obstacles]
    ("station offset radius") and [props] ("station offset height size") sections.
    Blank lines and '#' comments are ignored.
    """
    settings: Dict[str, str] = {}
    rows: Dict[str, List[Tuple[int, List[str]]]] = {s: [] for s in _SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if line.startswith('[') and line.endswith(']'):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ScenarioError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if section is None:
            if '=' not in line:
                raise ScenarioError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split('=', 1))
            settings[key] = value
        else:
            rows[section].append((lineno, line.split()))

    try:
        vertices = tuple(
            TrackVertex(*_numbers(parts, 3, path, lineno), tag=parts[3] if len(parts) > 3 else 'asphalt')
            for lineno, parts in rows['centerline']
        )
        obstacles = tuple(Obstacle(*_numbers(p, 3, path, n)) for n, p in rows['obstacles'])
        props = tuple(Prop(*_numbers(p, 4, path, n)) for n, p in rows['props'])

        spawn = None
        if settings.get('spawn', 'auto') != 'auto':
            x, y, yaw_deg = _numbers(settings['spawn'].split(), 3, path, 0)
            spawn = Pose(x, y, math.radians(yaw_deg))

        scenario = TrackScenario(
            id=settings.get('id', Path(str(path)).stem),
            vertices=vertices,
            obstacles=obstacles,
            props=props,
            light=SceneLight(
                intensity=float(settings.get('light_intensity', 1.0)),
                direction_deg=float(settings.get('light_direction_deg', 60.0)),
                scale_per_cd=float(settings.get('light_scale_per_cd', 1.0)),
            ),
            speed_limit_kmh=float(settings.get('speed_limit_kmh', 30.0)),
            spawn=spawn,
            lanes=int(settings.get('lanes', 1)),
            corridor=settings.get('corridor', 'road'),
            divider=settings.get('divider', 'none'),
        )
    except InvalidInputError as e:
        raise ScenarioError(f"{path}: {e}") from e
    except ValueError as e:
        raise ScenarioError(f"{path}: invalid setting: {e}") from e
    return scenario.validate()


def load_scenario(path) -> TrackScenario:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    scenario = parse_scenario(text, path)
    logger.info(f"Loaded scenario '{scenario.id}' ({scenario.length:.0f} m, "
                f"{len(scenario.obstacles)} cones) from {path}")
    return scenario


def builtin_scenario(scenario_id: str) -> TrackScenario:
    if scenario_id not in SCENARIO_IDS:
        raise InvalidInputError(f"unknown scenario '{scenario_id}', expected one of {', '.join(SCENARIO_IDS)}")
    return load_scenario(Path(SCENARIO_DIR) / f"{scenario_id}.scn")


def resolve_scenario(name_or_path: str) -> TrackScenario:
    """Built-in id or path to a scenario file"""
    if name_or_path in SCENARIO_IDS:
        return builtin_scenario(name_or_path)
    return load_scenario(name_or_path)


def write_scenario(scenario: TrackScenario, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"id = {scenario.id}",
        f"speed_limit_kmh = {scenario.speed_limit_kmh!r}",
        f"lanes = {scenario.lanes}",
        f"corridor = {scenario.corridor}",
        f"divider = {scenario.divider}",
        f"light_intensity = {scenario.light.intensity!r}",
        f"light_direction_deg = {scenario.light.direction_deg!r}",
        f"light_scale_per_cd = {scenario.light.scale_per_cd!r}",
    ]
    if scenario.spawn is not None:
        s = scenario.spawn
        lines.append(f"spawn = {s.x!r} {s.y!r} {math.degrees(s.yaw)!r}")
    lines.append("")
    lines.append("[centerline]")
    lines.extend(f"{v.x!r} {v.y!r} {v.width!r} {v.tag}" for v in scenario.vertices)
    if scenario.obstacles:
        lines.append("")
        lines.append("[obstacles]")
        lines.extend(f"{o.station!r} {o.offset!r} {o.radius!r}" for o in scenario.obstacles)
    if scenario.props:
        lines.append("")
        lines.append("[props]")
        lines.extend(f"{p.station!r} {p.offset!r} {p.height!r} {p.size!r}" for p in scenario.props)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path
