"""
End-to-end behavioral cloning run: collect, split and balance, train, evaluate
"""

import logging
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import COLLECTION_CONFIG, COLLECTION_PRESETS, DATA_ROOT, TRACKING_CONFIG
from .dataset import (
    BatchStream,
    FrameLoader,
    TrainStreamConfig,
    balance_zero_steer,
    histogram_table,
    segregation_summary,
    split,
    steering_histogram,
)
from .errors import InvalidInputError
from .experiments import ExperimentConfig, emit_report, experiment_suite, run_experiment
from .imgproc import AugmentationProbabilities, load_image, make_rng
from .nnet import NetSpec, TrainConfig, measure_latency, save_model, train, weights_checksum
from .simworld import CameraRig, ModelDriver, collect, resolve_scenario
from .tracking_utils import RunTracker, publish_summary

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

BEHAVIORS = tuple(COLLECTION_PRESETS)


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one end-to-end run needs

    Presets give the defaults; a TOML file overrides presets and explicit overrides
    (CLI flags) override the file.
    Without an explicit behavior, a built-in scenario id selects the preset of the same name.
    """
    behavior: str = 'simplistic'
    scenario: Optional[str] = None
    laps: Optional[int] = None
    cameras: Optional[int] = None
    bidirectional: Optional[bool] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    augmentation_loops: Optional[int] = None
    augmentation: Optional[str] = None
    learning_rate: Optional[float] = None
    split_ratio: float = COLLECTION_CONFIG['split_ratio']
    seed: int = 0
    workers: int = 1
    data_root: str = DATA_ROOT
    experiments: List[str] = field(default_factory=list)
    latency_frames: int = 50
    tracking_db: Optional[str] = None
    publish: bool = TRACKING_CONFIG['publish']

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise InvalidInputError(f"unknown behavior '{self.behavior}', expected one of {', '.join(BEHAVIORS)}")
        if not 0.0 < self.split_ratio < 1.0:
            raise InvalidInputError(f"split ratio must lie in (0, 1), got {self.split_ratio}")
        if self.collection['scenario'] == 'collision' and self.collection['cameras'] != 1:
            raise InvalidInputError("the collision scenario is recorded with the center camera only")

    @classmethod
    def load(cls, path=None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Args:
            path: optional TOML file; keys at the top level or under [run]
            overrides: values that win over the file (None values are ignored)
        """
        values: Dict[str, Any] = {}
        if path is not None:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
            values.update(data.get('run', {k: v for k, v in data.items() if not isinstance(v, dict)}))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        if 'behavior' not in values and values.get('scenario') in COLLECTION_PRESETS:
            values['behavior'] = values['scenario']
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidInputError(f"unknown run settings: {', '.join(sorted(unknown))}")
        return cls(**values)

    @property
    def collection(self) -> Dict[str, Any]:
        preset = dict(COLLECTION_PRESETS[self.behavior])
        for key in ('scenario', 'laps', 'cameras', 'bidirectional'):
            if getattr(self, key) is not None:
                preset[key] = getattr(self, key)
        if preset['scenario'] == 'collision' and self.cameras is None:
            preset['cameras'] = 1
        return preset

    @property
    def run_dir(self) -> Path:
        return Path(self.data_root) / self.behavior

    def stream_config(self, input_size) -> TrainStreamConfig:
        overrides = {'input_size': input_size, 'workers': self.workers}
        if self.batch_size is not None:
            overrides['batch_size'] = self.batch_size
        if self.augmentation_loops is not None:
            overrides['augmentation_loops'] = self.augmentation_loops
        cfg = TrainStreamConfig.preset(self.behavior, self.seed, **overrides)
        if self.augmentation is not None:
            cfg = replace(cfg, probs=AugmentationProbabilities.preset(self.augmentation))
        return cfg

    def train_config(self) -> TrainConfig:
        overrides = {k: getattr(self, k) for k in ('epochs', 'batch_size', 'learning_rate')
                     if getattr(self, k) is not None}
        return TrainConfig.preset(self.behavior, self.seed, **overrides)


class BehaviorCloningPipeline:
    """
    Collect demonstrations in the simulator, train the steering network and evaluate it
    """

    def __init__(self, cfg: RunConfig, spec: Optional[NetSpec] = None, tracker: Optional[RunTracker] = None):
        self.cfg = cfg
        self.spec = spec or NetSpec()
        self.tracker = tracker or RunTracker(cfg.tracking_db)
        self.run_ids: Dict[str, str] = {}

    def collect_demonstrations(self):
        col = self.cfg.collection
        scenario = resolve_scenario(col['scenario'])
        logger.info(f"Collecting {col['laps']} lap(s) on '{scenario.id}' with {col['cameras']} camera(s)")
        result = collect(
            scenario,
            laps=col['laps'],
            rig=CameraRig(count=col['cameras']),
            out_dir=self.cfg.run_dir / 'demonstrations',
            seed=self.cfg.seed,
            bidirectional=col['bidirectional'],
            behavior_tag=self.cfg.behavior,
        )
        self.run_ids['collection'] = self.tracker.record_collection(
            scenario.id, self.cfg.behavior, col['laps'], col['cameras'],
            len(result.dataset), result.manifest_path, result.lap_stats)
        return result

    def prepare_datasets(self, dataset):
        """Stratified split, with the balanced-histogram report logged for the training part"""
        train_ds, val_ds = split(dataset, self.cfg.split_ratio, self.cfg.seed)
        summary = segregation_summary(dataset, train_ds, val_ds)
        logger.info(f"Split: {summary}")
        stream_cfg = self.cfg.stream_config(self.spec.input_size)
        balanced = balance_zero_steer(train_ds, stream_cfg.balance, make_rng(self.cfg.seed))
        logger.info("Steering histogram before/after balancing:\n"
                    + histogram_table(steering_histogram(train_ds), steering_histogram(balanced)))
        return train_ds, val_ds, stream_cfg

    def train_model(self, train_ds, val_ds, stream_cfg):
        train_cfg = self.cfg.train_config()
        stream = BatchStream(train_ds, val_ds, stream_cfg, FrameLoader(train_ds.root))
        logger.info(f"Training {train_cfg.epochs} epoch(s) of {stream.steps_per_epoch} steps "
                    f"({stream.validation_steps} validation steps)")
        started = time.perf_counter()
        params, history = train(self.spec, stream, train_cfg)
        seconds = time.perf_counter() - started
        model_path = save_model(self.cfg.run_dir / 'model.bcw', self.spec, params)
        self.run_ids['training'] = self.tracker.record_training(
            self.cfg.behavior, model_path, history, seconds, weights_checksum(params))
        return params, history, seconds, model_path

    def evaluate(self, params, val_ds, model_path):
        frames = [load_image(val_ds.root / s.center) for s in val_ds.samples[:self.cfg.latency_frames]]
        latency = measure_latency(self.spec, params, frames).summary() if frames else None
        if latency:
            self.tracker.record_latency(model_path, latency)
            logger.info(f"Predict latency: mode {latency['mode_ms']:.1f} ms")

        scenario = resolve_scenario(self.cfg.collection['scenario'])
        exp_ids = self.cfg.experiments or ['no_variation']
        if exp_ids == ['all']:
            exp_ids = experiment_suite(scenario.id)
        model = ModelDriver(self.spec, params)
        exp_cfg = ExperimentConfig(seed=self.cfg.seed, workers=self.cfg.workers)
        reports = []
        for exp_id in exp_ids:
            try:
                report = run_experiment(exp_id, scenario, model, exp_cfg)
            except InvalidInputError as e:
                logger.error(f"Experiment {exp_id} skipped: {e}")
                continue
            self.tracker.record_experiment(report)
            reports.append(report)
        return reports, latency

    def run(self) -> Dict[str, Any]:
        logger.info(f"Starting behavioral cloning run for '{self.cfg.behavior}'")
        self.tracker.setup_tables()
        try:
            logger.info("Step 1: collecting demonstrations")
            collection = self.collect_demonstrations()

            logger.info("Step 2: splitting and balancing")
            train_ds, val_ds, stream_cfg = self.prepare_datasets(collection.dataset)

            logger.info("Step 3: training")
            params, history, seconds, model_path = self.train_model(train_ds, val_ds, stream_cfg)

            logger.info("Step 4: evaluating")
            reports, latency = self.evaluate(params, val_ds, model_path)
            report_paths = None
            if reports:
                training = {'epochs': len(history.train_loss), 'seconds': seconds,
                            'train_loss': history.train_loss, 'val_loss': history.val_loss}
                report_paths = emit_report(reports, self.cfg.run_dir / 'report', training, latency)

            if self.cfg.publish:
                logger.info("Step 5: publishing run summaries")
                publish_summary(self.tracker.summary_rows())
        finally:
            self.tracker.disconnect()

        logger.info(f"Run complete: model {model_path}")
        return {
            'run_ids': dict(self.run_ids),
            'samples': len(collection.dataset),
            'model_path': model_path,
            'history': history,
            'reports': reports,
            'report_paths': report_paths,
        }


def run_pipeline(cfg: Optional[RunConfig] = None) -> Dict[str, Any]:
    """
    Entry point for running the pipeline
    """
    return BehaviorCloningPipeline(cfg or RunConfig()).run()
