"""
Closed-loop simulation: demonstration collection with the scripted expert and
deployment laps of a trained model with interference accounting
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Protocol

import numpy as np
import pandas as pd

from ..config import COLLECTION_CONFIG, DEPLOY_CONFIG
from ..control import ControlConfig, coupled_control, split_command
from ..dataset import Dataset, DrivingSample, write_manifest
from ..errors import IncompatibleModelError, InvalidInputError
from ..imgproc import ImageU8, save_image
from ..nnet import NetParams, NetSpec, predict
from .camera import CameraRig, Renderer
from .expert import ExpertConfig, ExpertDriver
from .scenario import ScenarioVariation, TrackScenario
from .vehicle import VehicleParams, VehicleState, step_vehicle

logger = logging.getLogger(__name__)

LAP_LOG_COLUMNS = ['t', 'x', 'y', 'yaw', 'progress', 'steering', 'throttle', 'brake', 'speed', 'interference']


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

class Driver(Protocol):
    needs_frame: bool

    def act(self, state: VehicleState, frame: Optional[ImageU8]) -> float: ...


class Policy(Protocol):
    def driver_for(self, scenario: TrackScenario) -> Driver: ...


class ModelDriver:
    """Steers from the center camera with a trained network"""

    needs_frame = True

    def __init__(self, spec: NetSpec, params: NetParams):
        if spec.input_shape[2] != 3:
            raise IncompatibleModelError(f"model expects {spec.input_shape[2]} channels, camera renders RGB")
        self.spec = spec
        self.params = params
        self.latencies_ms: List[float] = []

    def driver_for(self, scenario: TrackScenario) -> 'ModelDriver':
        return ModelDriver(self.spec, self.params)

    def act(self, state: VehicleState, frame: Optional[ImageU8]) -> float:
        if frame is None:
            raise IncompatibleModelError("model driver needs a camera frame")
        started = time.perf_counter()
        steering = predict(self.spec, self.params, frame)
        self.latencies_ms.append((time.perf_counter() - started) * 1000.0)
        return steering


class ConstantDriver:
    """Fixed steering regardless of input"""

    needs_frame = False

    def __init__(self, steering: float = 0.0):
        self.steering = steering

    def driver_for(self, scenario: TrackScenario) -> 'ConstantDriver':
        return self

    def act(self, state: VehicleState, frame: Optional[ImageU8]) -> float:
        return self.steering


# ---------------------------------------------------------------------------
# Lap logs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LapRecord:
    t: float
    x: float
    y: float
    yaw: float
    progress: float
    steering: float
    throttle: float
    brake: float
    speed: float


@dataclass(frozen=True)
class InterferenceEvent:
    t: float
    progress: float
    reason: str


@dataclass
class LapLog:
    records: List[LapRecord] = field(default_factory=list)
    interferences: List[InterferenceEvent] = field(default_factory=list)
    lap_time_s: float = 0.0
    completed: bool = False
    track_length_m: float = 0.0
    latencies_ms: List[float] = field(default_factory=list)

    @property
    def n_interferences(self) -> int:
        return len(self.interferences)

    def channel(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> Path:
        """Per-step CSV; a leading '#' line carries lap time, completion and track length"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        reasons = {}
        for event in self.interferences:
            reasons[round(event.t, 6)] = event.reason
        rows = [{**r.__dict__, 'interference': reasons.get(round(r.t, 6), '')} for r in self.records]
        with path.open('w', encoding='utf-8', newline='') as fh:
            fh.write(f"# lap_time_s={self.lap_time_s!r} completed={int(self.completed)} "
                     f"track_length_m={self.track_length_m!r}\n")
            pd.DataFrame(rows, columns=LAP_LOG_COLUMNS).to_csv(fh, index=False, lineterminator='\n')
        return path


def read_lap_log(path) -> LapLog:
    path = Path(path)
    with path.open(encoding='utf-8') as fh:
        meta = dict(item.split('=', 1) for item in fh.readline().lstrip('#').split())
        frame = pd.read_csv(fh, keep_default_na=False)
    records, events = [], []
    for row in frame.itertuples(index=False):
        records.append(LapRecord(*(float(getattr(row, c)) for c in LAP_LOG_COLUMNS[:-1])))
        if row.interference:
            events.append(InterferenceEvent(float(row.t), float(row.progress), str(row.interference)))
    return LapLog(
        records=records,
        interferences=events,
        lap_time_s=float(meta['lap_time_s']),
        completed=bool(int(meta['completed'])),
        track_length_m=float(meta['track_length_m']),
    )


def compare_laps(reference: LapLog, autonomous: LapLog, points: int = 500) -> Dict[str, Dict[str, float]]:
    """
    Manual-vs-autonomous comparison per channel

    Returns:
        {channel: {reference_mean, autonomous_mean, reference_std, autonomous_std, rmse}} where
        rmse is over both traces resampled on a common progress grid; 'steering' also carries
        the Pearson correlation of the resampled traces
    """
    if not reference.records or not autonomous.records:
        raise InvalidInputError("cannot compare empty lap logs")
    end = min(reference.channel('progress').max(), autonomous.channel('progress').max())
    grid = np.linspace(0.0, max(end, 1e-9), points)
    out = {}
    for name in ('steering', 'throttle', 'brake', 'speed'):
        ref = np.interp(grid, *_monotone(reference, name))
        auto = np.interp(grid, *_monotone(autonomous, name))
        stats = {
            'reference_mean': float(reference.channel(name).mean()),
            'autonomous_mean': float(autonomous.channel(name).mean()),
            'reference_std': float(reference.channel(name).std()),
            'autonomous_std': float(autonomous.channel(name).std()),
            'rmse': float(np.sqrt(np.mean((ref - auto) ** 2))),
        }
        if name == 'steering':
            stats['correlation'] = (float(np.corrcoef(ref, auto)[0, 1])
                                    if ref.std() > 0 and auto.std() > 0 else float('nan'))
        out[name] = stats
    return out


def _monotone(log: LapLog, name: str):
    # np.interp needs increasing x; keep the first sample at each progress value
    progress = np.maximum.accumulate(log.channel('progress'))
    keep = np.concatenate([[True], np.diff(progress) > 0])
    return progress[keep], log.channel(name)[keep]


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeployConfig:
    control_rate_hz: float = DEPLOY_CONFIG['control_rate_hz']
    contact_margin_m: float = DEPLOY_CONFIG['contact_margin_m']
    stall_speed_kmh: float = DEPLOY_CONFIG['stall_speed_kmh']
    stall_seconds: float = DEPLOY_CONFIG['stall_seconds']
    timeout_factor: float = DEPLOY_CONFIG['timeout_factor']
    vehicle: VehicleParams = VehicleParams()
    rig: CameraRig = CameraRig(count=1)

    def __post_init__(self):
        if not self.control_rate_hz >= 10.0:
            raise InvalidInputError("control rate must be at least 10 Hz")


def default_control(speed_limit_kmh: Optional[float] = None) -> ControlConfig:
    return ControlConfig(speed_limit_kmh=speed_limit_kmh or DEPLOY_CONFIG['speed_limit_kmh'])


class _Interference:
    """Corridor, cone and stall checks for one scenario"""

    def __init__(self, scenario: TrackScenario, cfg: DeployConfig):
        self.scenario = scenario
        self.cfg = cfg
        self.cones = [(scenario.obstacle_xy(o), o.radius) for o in scenario.obstacles]
        self.stalled_for = 0.0

    def check(self, state: VehicleState, station: float, lateral: float, dt: float) -> Optional[str]:
        low, high = self.scenario.corridor_bounds(station)
        if not low <= lateral <= high:
            return 'corridor'
        for (cx, cy), radius in self.cones:
            if math.hypot(state.x - cx, state.y - cy) < radius + self.cfg.contact_margin_m:
                return 'cone'
        self.stalled_for = self.stalled_for + dt if state.v < self.cfg.stall_speed_kmh else 0.0
        if self.stalled_for >= self.cfg.stall_seconds:
            return 'stall'
        return None

    def reset(self, station: float) -> VehicleState:
        self.stalled_for = 0.0
        return VehicleState.at(self.scenario.pose_at(station), 0.0)


def deploy(
    scenario: TrackScenario,
    model: Policy,
    control: Optional[ControlConfig] = None,
    variation: Optional[ScenarioVariation] = None,
    cfg: DeployConfig = DeployConfig(),
) -> LapLog:
    """
    Drive one lap closed-loop

    Each control step renders the center camera (when the driver needs it), asks the
    driver for steering, derives throttle/brake from the coupled control law and steps
    the vehicle. Leaving the corridor, touching a cone or stalling logs one interference
    and resets the vehicle to the lane center at that station with zero speed.

    Args:
        scenario: track as trained
        model: policy with driver_for(scenario), e.g. ModelDriver or ExpertPolicy
        control: longitudinal control settings; the deployment speed limit by default
        variation: optional departure from the trained conditions

    Returns:
        LapLog of the lap (completed is False on timeout)
    """
    if variation is not None:
        scenario = variation.apply(scenario)
        if variation.speed_limit_kmh is not None:
            control = replace(control or default_control(), speed_limit_kmh=variation.speed_limit_kmh)
    control = control or default_control()
    driver = model.driver_for(scenario)
    renderer = Renderer(scenario, cfg.rig) if driver.needs_frame else None
    checker = _Interference(scenario, cfg)
    line = scenario.centerline

    dt = 1.0 / cfg.control_rate_hz
    timeout = cfg.timeout_factor * line.length / (control.speed_limit_kmh / 3.6)
    state = VehicleState.at(scenario.spawn_pose(), 0.0)
    station, _ = line.project(state.x, state.y)
    log = LapLog(track_length_m=line.length)
    progress, t = 0.0, 0.0

    while progress < line.length and t < timeout:
        frame = renderer.render(state.pose, 'center') if renderer else None
        steering = float(np.clip(driver.act(state, frame), -1.0, 1.0))
        throttle, brake = split_command(coupled_control(steering, state.v, control))
        log.records.append(LapRecord(t, state.x, state.y, state.yaw, progress,
                                     steering, throttle, brake, state.v))

        state = step_vehicle(state, steering, throttle, brake, dt, cfg.vehicle, control.speed_limit_kmh)
        t += dt
        new_station, lateral = line.project(state.x, state.y)
        progress += line.station_delta(station, new_station)
        station = new_station

        reason = checker.check(state, station, lateral, dt)
        if reason:
            log.interferences.append(InterferenceEvent(t, progress, reason))
            logger.debug(f"Interference ({reason}) at t={t:.1f}s, progress {progress:.0f} m")
            state = checker.reset(station)

    log.lap_time_s = t
    log.completed = progress >= line.length
    log.latencies_ms = list(getattr(driver, 'latencies_ms', []))
    if not log.completed:
        logger.warning(f"Lap on '{scenario.id}' timed out after {t:.0f}s at {progress:.0f}/{line.length:.0f} m")
    logger.info(f"Deployed on '{scenario.id}': {log.n_interferences} interference(s), "
                f"lap time {t:.1f}s, completed={log.completed}")
    return log


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

@dataclass
class CollectionResult:
    dataset: Dataset
    manifest_path: Path
    lap_stats: List[Dict] = field(default_factory=list)


def _drive_lap(
    scenario: TrackScenario,
    expert: ExpertDriver,
    renderer: Renderer,
    out_dir: Path,
    lap: int,
    start_time: float,
    rate_hz: float,
    sim_rate_hz: float,
    vehicle: VehicleParams,
) -> tuple:
    line = scenario.centerline
    dt = 1.0 / sim_rate_hz
    timeout = 4.0 * line.length / (scenario.speed_limit_kmh / 3.6)
    state = VehicleState.at(scenario.spawn_pose(), 0.0)
    station, _ = line.project(state.x, state.y)
    checker = _Interference(scenario, DeployConfig(control_rate_hz=sim_rate_hz, vehicle=vehicle))
    samples: List[DrivingSample] = []
    interferences = 0
    progress, t, step = 0.0, 0.0, 0
    next_sample = 0

    while progress < line.length and t < timeout:
        steering, throttle, brake = expert.command(state)
        if t + 1e-9 >= next_sample / rate_hz:
            frames = renderer.render_rig(state.pose)
            refs = {}
            for slot, img in frames.items():
                ref = f"IMG/{slot}_{lap:03d}_{next_sample:05d}.png"
                save_image(img, out_dir / ref)
                refs[slot] = ref
            samples.append(DrivingSample(
                timestamp=round(start_time + t, 3),
                center=refs['center'],
                left=refs.get('left'),
                right=refs.get('right'),
                steering=steering,
                throttle=throttle,
                brake=brake,
                speed=state.v,
            ))
            next_sample += 1

        state = step_vehicle(state, steering, throttle, brake, dt, vehicle, scenario.speed_limit_kmh)
        step += 1
        t = step * dt
        new_station, lateral = line.project(state.x, state.y)
        progress += line.station_delta(station, new_station)
        station = new_station
        if checker.check(state, station, lateral, dt):
            interferences += 1
            state = checker.reset(station)

    return samples, t, interferences, progress >= line.length


def collect(
    scenario: TrackScenario,
    laps: int,
    rig: CameraRig,
    out_dir,
    rate_hz: float = COLLECTION_CONFIG['rate_hz'],
    seed: int = 0,
    bidirectional: bool = False,
    sim_rate_hz: float = COLLECTION_CONFIG['sim_rate_hz'],
    wander_amplitude_m: float = COLLECTION_CONFIG['wander_amplitude_m'],
    behavior_tag: Optional[str] = None,
    vehicle: VehicleParams = VehicleParams(),
) -> CollectionResult:
    """
    Drive the expert for `laps` laps and record frames plus commands

    With bidirectional, the first ceil(laps / 2) laps run the track forwards and the
    rest in reverse. Samples are taken at rate_hz; frames go to out_dir/IMG and the
    manifest to out_dir/driving_log.csv.
    """
    if not rate_hz > 0 or not sim_rate_hz >= rate_hz:
        raise InvalidInputError(f"need 0 < rate ({rate_hz}) <= simulation rate ({sim_rate_hz})")
    if laps < 1:
        raise InvalidInputError("at least one lap is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = behavior_tag or scenario.id
    forward_laps = (laps + 1) // 2 if bidirectional else laps
    renderers = {}

    samples: List[DrivingSample] = []
    lap_stats: List[Dict] = []
    elapsed = 0.0
    for lap in range(laps):
        reverse = lap >= forward_laps
        lap_scenario = scenario.reversed() if reverse else scenario
        if reverse not in renderers:
            renderers[reverse] = Renderer(lap_scenario, rig)
        expert = ExpertDriver(
            lap_scenario,
            ExpertConfig(wander_amplitude_m=wander_amplitude_m, wander_seed=seed * 1000 + lap),
            vehicle,
        )
        try:
            lap_samples, lap_time, n_int, completed = _drive_lap(
                lap_scenario, expert, renderers[reverse], out_dir, lap, elapsed, rate_hz, sim_rate_hz, vehicle)
            samples.extend(lap_samples)
            elapsed += lap_time
            lap_stats.append({
                'lap': lap + 1, 'direction': 'reverse' if reverse else 'forward',
                'samples': len(lap_samples), 'lap_time_s': round(lap_time, 3),
                'interferences': n_int, 'completed': completed, 'status': 'success',
            })
            if n_int or not completed:
                logger.warning(f"Lap {lap + 1}: expert needed {n_int} reset(s), completed={completed}")
            logger.info(f"Lap {lap + 1}/{laps} ({'reverse' if reverse else 'forward'}): "
                        f"{len(lap_samples)} samples in {lap_time:.1f}s")
        except OSError as e:
            logger.error(f"Lap {lap + 1} failed: {e}")
            lap_stats.append({'lap': lap + 1, 'status': 'failed', 'error': str(e)})
            raise

    dataset = Dataset(samples=tuple(samples), behavior_tag=tag, root=out_dir)
    manifest = write_manifest(dataset, out_dir / 'driving_log.csv')
    logger.info(f"Collected {len(samples)} samples over {laps} lap(s) into {manifest}")
    return CollectionResult(dataset=dataset, manifest_path=manifest, lap_stats=lap_stats)
