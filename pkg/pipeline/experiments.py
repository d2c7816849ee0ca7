"""
Robustness experiments around closed-loop deployment and the autonomy metric
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import EXPERIMENT_CONFIG
from .control import ControlConfig
from .dataset import Dataset, FrameLoader
from .errors import InvalidInputError
from .nnet import NetParams, NetSpec, predict_batch
from .simworld.runner import DeployConfig, LapLog, Policy, deploy
from .simworld.scenario import ScenarioVariation, TrackScenario

logger = logging.getLogger(__name__)

EXPERIMENT_IDS = (
    'no_variation',
    'obstacle_variation',
    'light_intensity',
    'light_direction',
    'position',
    'orientation',
    'heading_inversion',
    'speed_limit',
)
SWEEP_EXPERIMENTS = ('light_intensity', 'light_direction', 'orientation', 'speed_limit')

__all__ = [
    'EXPERIMENT_IDS', 'ScenarioVariation', 'ExperimentConfig', 'ConditionResult', 'ExperimentReport',
    'ReportBundle', 'autonomy', 'experiment_suite', 'run_experiment', 'emit_report', 'parse_report',
    'format_interval', 'compare_robustness', 'PredictionTrace', 'prediction_analysis',
]


def autonomy(n_int: int, t_lap: float, interference_s: float = EXPERIMENT_CONFIG['interference_seconds']) -> float:
    """
    Degree of autonomy in percent: (1 - interference_s * n_int / t_lap) * 100, clamped to [0, 100]
    """
    if not t_lap > 0:
        raise InvalidInputError(f"lap time must be positive, got {t_lap}")
    if n_int < 0:
        raise InvalidInputError(f"interference count must be >= 0, got {n_int}")
    return max(0.0, min(100.0, (1.0 - interference_s * n_int / t_lap) * 100.0))


@dataclass(frozen=True)
class ExperimentConfig:
    interference_seconds: float = EXPERIMENT_CONFIG['interference_seconds']
    max_sweep_steps: int = EXPERIMENT_CONFIG['max_sweep_steps']
    laps_per_condition: int = EXPERIMENT_CONFIG['laps_per_condition']
    light_intensity_step: float = EXPERIMENT_CONFIG['light_intensity_step']
    light_direction_step_deg: float = EXPERIMENT_CONFIG['light_direction_step_deg']
    orientation_step_deg: float = EXPERIMENT_CONFIG['orientation_step_deg']
    speed_limit_start_kmh: float = EXPERIMENT_CONFIG['speed_limit_start_kmh']
    speed_limit_step_kmh: float = EXPERIMENT_CONFIG['speed_limit_step_kmh']
    obstacle_sets: Tuple[int, ...] = tuple(EXPERIMENT_CONFIG['obstacle_sets'])
    workers: int = EXPERIMENT_CONFIG['workers']
    seed: int = 0
    control: Optional[ControlConfig] = None
    deploy: DeployConfig = DeployConfig()

    def __post_init__(self):
        if self.max_sweep_steps < 1 or self.laps_per_condition < 1 or self.workers < 1:
            raise InvalidInputError("sweep steps, laps per condition and workers must be at least 1")


@dataclass
class ConditionResult:
    label: str
    value: Optional[float]
    eta: float
    lap_time_s: float
    interferences: int
    completed: bool

    @property
    def autonomous(self) -> bool:
        """The ~100% threshold: no interference and every lap completed"""
        return self.completed and self.interferences == 0


@dataclass
class ExperimentReport:
    experiment: str
    scenario: str
    conditions: List[ConditionResult] = field(default_factory=list)
    lower: Optional[float] = None
    upper: Optional[float] = None
    lower_capped: bool = False
    upper_capped: bool = False
    sweep: bool = False

    @property
    def min_eta(self) -> Optional[float]:
        return min((c.eta for c in self.conditions), default=None)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ExperimentReport':
        data = dict(data)
        data['conditions'] = [ConditionResult(**c) for c in data.get('conditions', [])]
        return cls(**data)


@dataclass
class ReportBundle:
    reports: List[ExperimentReport]
    training: Optional[Dict] = None
    latency: Optional[Dict] = None


def experiment_suite(scenario_id: str) -> List[str]:
    """Experiments that apply to a scenario; obstacle variation is collision-only"""
    return [e for e in EXPERIMENT_IDS if e != 'obstacle_variation' or scenario_id == 'collision']


def _run_condition(
    scenario: TrackScenario,
    model: Policy,
    variation: ScenarioVariation,
    cfg: ExperimentConfig,
    label: str,
    value: Optional[float],
) -> Tuple[ConditionResult, List[LapLog]]:
    logs = [deploy(scenario, model, cfg.control, variation, cfg.deploy) for _ in range(cfg.laps_per_condition)]
    n_int = sum(log.n_interferences for log in logs)
    t_lap = sum(log.lap_time_s for log in logs)
    result = ConditionResult(
        label=label,
        value=value,
        eta=autonomy(n_int, t_lap, cfg.interference_seconds),
        lap_time_s=round(t_lap, 6),
        interferences=n_int,
        completed=all(log.completed for log in logs),
    )
    logger.info(f"  {label}: eta {result.eta:.1f}% ({n_int} interference(s), {t_lap:.1f}s)")
    return result, logs


def _sweep_axis(exp_id: str, scenario: TrackScenario, cfg: ExperimentConfig):
    """(base value, step, allowed directions, variation builder) for a sweep experiment"""
    light = scenario.light
    if exp_id == 'light_intensity':
        return (light.intensity, cfg.light_intensity_step, (-1, 1),
                lambda v: ScenarioVariation(light_intensity_delta=v - light.intensity))
    if exp_id == 'light_direction':
        return (light.direction_deg, cfg.light_direction_step_deg, (-1, 1),
                lambda v: ScenarioVariation(light_direction_delta=v - light.direction_deg))
    if exp_id == 'orientation':
        return 0.0, cfg.orientation_step_deg, (-1, 1), lambda v: ScenarioVariation(spawn_yaw_delta=v)
    if exp_id == 'speed_limit':
        return (cfg.speed_limit_start_kmh, cfg.speed_limit_step_kmh, (1,),
                lambda v: ScenarioVariation(speed_limit_kmh=v))
    raise InvalidInputError(f"'{exp_id}' is not a sweep experiment")


def _sweep(exp_id: str, scenario: TrackScenario, model: Policy, cfg: ExperimentConfig) -> ExperimentReport:
    base, step, directions, build = _sweep_axis(exp_id, scenario, cfg)
    report = ExperimentReport(experiment=exp_id, scenario=scenario.id, sweep=True)

    def condition(value: float) -> Optional[ConditionResult]:
        try:
            variation = build(value)
            result, _ = _run_condition(scenario, model, variation, cfg, f"{exp_id}={value:g}", value)
        except InvalidInputError as e:
            logger.info(f"  {exp_id}={value:g} outside the valid range: {e}")
            return None
        return result

    baseline = condition(base)
    if baseline is None:
        raise InvalidInputError(f"{exp_id}: the training value {base:g} is itself invalid")
    report.conditions.append(baseline)
    if not baseline.autonomous:
        logger.warning(f"{exp_id}: not fully autonomous at the training value {base:g}")
        return report

    def walk(direction: int) -> Tuple[List[ConditionResult], float, bool]:
        results, bound = [], base
        for k in range(1, cfg.max_sweep_steps + 1):
            value = round(base + direction * k * step, 9)
            result = condition(value)
            if result is None:
                return results, bound, False
            results.append(result)
            if not result.autonomous:
                return results, bound, False
            bound = value
        return results, bound, True

    if cfg.workers > 1 and len(directions) > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            walks = list(pool.map(walk, directions))
    else:
        walks = [walk(d) for d in directions]

    report.lower, report.upper = base, base
    for direction, (results, bound, capped) in zip(directions, walks):
        report.conditions.extend(results)
        if direction < 0:
            report.lower, report.lower_capped = bound, capped
        else:
            report.upper, report.upper_capped = bound, capped
    report.conditions.sort(key=lambda c: c.value)
    return report


def _point_conditions(exp_id: str, scenario: TrackScenario, cfg: ExperimentConfig) -> List[Tuple[str, Optional[float], ScenarioVariation]]:
    if exp_id == 'no_variation':
        return [('as trained', None, ScenarioVariation())]
    if exp_id == 'heading_inversion':
        return [('heading inverted', None, ScenarioVariation(heading_inverted=True))]
    if exp_id == 'position':
        length = scenario.length
        return [(f"spawn at {f:.2f} lap", round(f * length, 3), ScenarioVariation(spawn_station=f * length))
                for f in (0.25, 0.5, 0.75)]
    if exp_id == 'obstacle_variation':
        if scenario.id != 'collision':
            raise InvalidInputError("obstacle variation applies to the collision scenario only")
        return [(f"{n} obstacles", float(n), ScenarioVariation(obstacle_count=n, obstacle_seed=cfg.seed + n))
                for n in cfg.obstacle_sets]
    raise InvalidInputError(f"unknown experiment '{exp_id}'")


def run_experiment(
    exp_id: str,
    scenario: TrackScenario,
    model: Policy,
    cfg: ExperimentConfig = ExperimentConfig(),
) -> ExperimentReport:
    """
    Run one experiment

    Sweep experiments step outward from the training value until a condition is not
    fully autonomous (capped at max_sweep_steps per direction) and report [lower, upper].
    Point experiments run each condition once and report its autonomy.
    """
    if exp_id not in EXPERIMENT_IDS:
        raise InvalidInputError(f"unknown experiment '{exp_id}', expected one of {', '.join(EXPERIMENT_IDS)}")
    logger.info(f"Experiment {exp_id} on '{scenario.id}'")
    if exp_id in SWEEP_EXPERIMENTS:
        return _sweep(exp_id, scenario, model, cfg)

    conditions = _point_conditions(exp_id, scenario, cfg)

    def run(item):
        label, value, variation = item
        return _run_condition(scenario, model, variation, cfg, label, value)[0]

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, conditions))
    else:
        results = [run(c) for c in conditions]
    return ExperimentReport(experiment=exp_id, scenario=scenario.id, conditions=results)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def format_interval(report: ExperimentReport) -> str:
    """[lower, upper] for sweeps; a side that hit the step cap is open, no bounds is ()"""
    if not report.sweep:
        return '-'
    if report.lower is None or report.upper is None:
        return '()'
    left = '(' if report.lower_capped else '['
    right = ')' if report.upper_capped else ']'
    return f"{left}{report.lower:g}, {report.upper:g}{right}"


def _report_text(bundle: ReportBundle) -> str:
    lines = []
    header = f"{'experiment':<20} {'scenario':<11} {'condition':<28} {'eta %':>7} {'lap s':>8} {'n_int':>6}"
    lines.append(header)
    lines.append('-' * len(header))
    for report in bundle.reports:
        for c in report.conditions:
            lines.append(f"{report.experiment:<20} {report.scenario:<11} {c.label:<28} "
                         f"{c.eta:>7.1f} {c.lap_time_s:>8.1f} {c.interferences:>6d}")
        if report.sweep:
            lines.append(f"{'':<20} {'':<11} {'bounds (eta ~100%)':<28} {format_interval(report):>24}")
    if bundle.training:
        t = bundle.training
        lines.append('')
        lines.append(f"Training: {t.get('epochs')} epochs, {t.get('seconds', 0.0):.1f}s, "
                     f"final loss {t.get('train_loss', [float('nan')])[-1]:.6f}")
        for i, (tl, vl) in enumerate(zip(t.get('train_loss', []), t.get('val_loss', [])), start=1):
            val_text = f"{vl:.6f}" if vl is not None else 'n/a'
            lines.append(f"  epoch {i}: loss {tl:.6f}, val_loss {val_text}")
    if bundle.latency:
        lat = bundle.latency
        lines.append('')
        lines.append(f"Deployment latency: mode {lat['mode_ms']:.1f} ms, mean {lat['mean_ms']:.2f} ms, "
                     f"p95 {lat['p95_ms']:.2f} ms over {lat['count']} frames")
    return '\n'.join(lines) + '\n'


def emit_report(
    reports: Sequence[ExperimentReport],
    path,
    training: Optional[Dict] = None,
    latency: Optional[Dict] = None,
) -> Tuple[Path, Path]:
    """
    Write <path>.json (stable keys) and <path>.txt (plain-text table)

    Args:
        reports: one or more experiment reports
        training: optional epochs / seconds / per-epoch losses
        latency: optional predict latency summary (mode, mean, p50, p95)
    """
    if not reports:
        raise InvalidInputError("at least one report is required")
    base = Path(path)
    if base.suffix in ('.json', '.txt'):
        base = base.with_suffix('')
    base.parent.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(reports=list(reports), training=training, latency=latency)
    payload = {
        'reports': [r.to_dict() for r in bundle.reports],
        'training': training,
        'latency': latency,
    }
    json_path = base.with_suffix('.json')
    txt_path = base.with_suffix('.txt')
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    txt_path.write_text(_report_text(bundle), encoding='utf-8')
    logger.info(f"Wrote report {json_path} and {txt_path}")
    return json_path, txt_path


def parse_report(path) -> ReportBundle:
    """Inverse of emit_report (reads the JSON file)"""
    path = Path(path)
    if path.suffix != '.json':
        path = path.with_suffix('.json')
    payload = json.loads(path.read_text(encoding='utf-8'))
    return ReportBundle(
        reports=[ExperimentReport.from_dict(r) for r in payload['reports']],
        training=payload.get('training'),
        latency=payload.get('latency'),
    )


def compare_robustness(a: ExperimentReport, b: ExperimentReport) -> Dict[str, object]:
    """Whether sweep interval a strictly contains interval b"""
    if a.experiment != b.experiment or not a.sweep or not b.sweep:
        raise InvalidInputError("can only compare sweeps of the same experiment")
    if a.lower is None or a.upper is None:
        contains = False
    elif b.lower is None or b.upper is None:
        contains = True
    else:
        contains = (a.lower <= b.lower and a.upper >= b.upper
                    and (a.lower < b.lower or a.upper > b.upper))
    return {
        'experiment': a.experiment,
        'a': format_interval(a),
        'b': format_interval(b),
        'a_strictly_contains_b': contains,
    }


# ---------------------------------------------------------------------------
# Prediction analysis
# ---------------------------------------------------------------------------

@dataclass
class PredictionTrace:
    t: np.ndarray
    truth: np.ndarray
    prediction: np.ndarray

    @property
    def mae(self) -> float:
        return float(np.mean(np.abs(self.prediction - self.truth)))

    @property
    def correlation(self) -> float:
        if self.truth.std() == 0 or self.prediction.std() == 0:
            return float('nan')
        return float(np.corrcoef(self.truth, self.prediction)[0, 1])

    def summary(self) -> Dict[str, float]:
        return {'frames': int(len(self.t)), 'mae': self.mae, 'correlation': self.correlation}

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({'t': self.t, 'ground_truth': self.truth, 'prediction': self.prediction}).to_csv(
            path, index=False, lineterminator='\n')
        return path


def prediction_analysis(
    spec: NetSpec,
    params: NetParams,
    ds: Dataset,
    loader: Optional[FrameLoader] = None,
    predictor: Optional[Callable[[Dataset], np.ndarray]] = None,
    batch_size: int = 64,
) -> PredictionTrace:
    """
    Predicted vs ground-truth steering for an ordered subset (e.g. about one lap)

    Args:
        predictor: replaces the network, mapping the subset to predictions
    """
    if len(ds) == 0:
        raise InvalidInputError("prediction analysis needs at least one sample")
    t = np.array([s.timestamp for s in ds.samples])
    if np.any(np.diff(t) < 0):
        raise InvalidInputError("samples must be ordered by timestamp")
    truth = ds.steering()
    if predictor is not None:
        prediction = np.asarray(predictor(ds), dtype=np.float64)
    else:
        loader = loader or FrameLoader(ds.root)
        chunks = []
        for start in range(0, len(ds), batch_size):
            frames = [loader(s.center) for s in ds.samples[start:start + batch_size]]
            chunks.append(predict_batch(spec, params, frames))
        prediction = np.concatenate(chunks).astype(np.float64)
    trace = PredictionTrace(t=t, truth=truth, prediction=prediction)
    logger.info(f"Prediction analysis over {len(ds)} frames: MAE {trace.mae:.4f}, "
                f"correlation {trace.correlation:.3f}")
    return trace
