"""
Command-line entry point: collect, balance, train, evaluate, experiment and inspect
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from .cloning_pipeline import BEHAVIORS, BehaviorCloningPipeline, RunConfig
from .config import AUGMENTATION_PRESETS, COLLECTION_CONFIG, DATA_ROOT, EXPERIMENT_CONFIG
from .dataset import (
    BalanceConfig,
    BatchStream,
    FrameLoader,
    balance_zero_steer,
    deletion_count,
    histogram_table,
    load_manifest,
    segregation_summary,
    split,
    steering_histogram,
    zero_steer_indices,
)
from .errors import DataError, InvalidInputError, NumericError, WorkbenchError
from .experiments import (
    EXPERIMENT_IDS,
    ExperimentConfig,
    autonomy,
    emit_report,
    experiment_suite,
    prediction_analysis,
    run_experiment,
)
from .imgproc import PerspectiveShiftConfig, augmentation_preview, load_image, make_rng, save_image
from .nnet import NetSpec, activation_maps, load_model, measure_latency, save_model, train, weights_checksum
from .simworld import CameraRig, DeployConfig, ModelDriver, Renderer, collect, deploy, resolve_scenario
from .simworld.runner import default_control
from .tracking_utils import RunTracker, publish_summary

logger = logging.getLogger('pipeline.cli')

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _print_counts(summary):
    print(f"{'behavior':<12} {'complete':>10} {'training':>10} {'validation':>11}")
    print(f"{summary['behavior']:<12} {summary['complete']:>10} {summary['training']:>10} {summary['validation']:>11}")


def _run_config(args, **overrides) -> RunConfig:
    values = {
        'behavior': getattr(args, 'behavior', None),
        'seed': getattr(args, 'seed', None),
        'data_root': getattr(args, 'data_root', None),
        'workers': getattr(args, 'workers', None),
        'tracking_db': getattr(args, 'tracking_db', None),
    }
    values.update(overrides)
    return RunConfig.load(getattr(args, 'config', None), values)


def cmd_collect(args) -> int:
    cfg = _run_config(args, scenario=args.scenario, laps=args.laps, cameras=args.cameras,
                      bidirectional=args.bidirectional)
    col = cfg.collection
    scenario = resolve_scenario(col['scenario'])
    out_dir = Path(args.out) if args.out else cfg.run_dir / 'demonstrations'
    result = collect(
        scenario,
        laps=col['laps'],
        rig=CameraRig(count=col['cameras']),
        out_dir=out_dir,
        rate_hz=args.rate_hz,
        seed=cfg.seed,
        bidirectional=col['bidirectional'],
        wander_amplitude_m=args.wander,
        behavior_tag=cfg.behavior,
    )
    train_ds, val_ds = split(result.dataset, cfg.split_ratio, cfg.seed)
    _print_counts(segregation_summary(result.dataset, train_ds, val_ds))
    print(f"Manifest: {result.manifest_path}")
    with RunTracker(cfg.tracking_db) as tracker:
        tracker.record_collection(scenario.id, cfg.behavior, col['laps'], col['cameras'],
                                  len(result.dataset), result.manifest_path, result.lap_stats)
    return 0


def cmd_balance(args) -> int:
    ds = load_manifest(args.manifest, args.behavior)
    cfg = BalanceConfig.preset(args.behavior)
    if args.deletion_rate is not None:
        cfg = BalanceConfig(deletion_rate=args.deletion_rate, zero_epsilon=cfg.zero_epsilon)
    d = len(zero_steer_indices(ds.steering(), cfg))
    balanced = balance_zero_steer(ds, cfg, make_rng(args.seed))
    print(histogram_table(steering_histogram(ds, args.bins), steering_histogram(balanced, args.bins)))
    print(f"zero-steering samples d = {d}, deletion rate = {cfg.deletion_rate}, "
          f"deleted D = {deletion_count(d, cfg)}, kept = {len(balanced)}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, epochs=args.epochs, batch_size=args.batch_size,
                      augmentation_loops=args.augmentation_loops, augmentation=args.augmentation,
                      learning_rate=args.learning_rate, split_ratio=args.split_ratio)
    ds = load_manifest(args.manifest, cfg.behavior)
    spec = NetSpec()
    train_ds, val_ds = split(ds, cfg.split_ratio, cfg.seed)
    _print_counts(segregation_summary(ds, train_ds, val_ds))
    stream = BatchStream(train_ds, val_ds, cfg.stream_config(spec.input_size), FrameLoader(ds.root))
    train_cfg = cfg.train_config()
    started = time.perf_counter()
    params, history = train(spec, stream, train_cfg)
    seconds = time.perf_counter() - started

    out = Path(args.out) if args.out else cfg.run_dir / 'model.bcw'
    save_model(out, spec, params, include_moments=args.keep_moments)
    history_path = out.with_suffix('.history.csv')
    pd.DataFrame(history.to_rows()).to_csv(history_path, index=False, lineterminator='\n')
    checksum = weights_checksum(params)
    print(f"Trained {train_cfg.epochs} epoch(s) x {history.steps_per_epoch} steps in {seconds:.1f}s")
    print(f"Model: {out} (sha256 {checksum})")
    print(f"History: {history_path}")
    with RunTracker(cfg.tracking_db) as tracker:
        tracker.record_training(cfg.behavior, out, history, seconds, checksum)
    return 0


def _deploy_config(args) -> DeployConfig:
    return DeployConfig(control_rate_hz=args.control_rate_hz)


def cmd_evaluate(args) -> int:
    spec, params = load_model(args.model)
    scenario = resolve_scenario(args.scenario)
    log = deploy(scenario, ModelDriver(spec, params), default_control(args.speed_limit), None,
                 _deploy_config(args))
    eta = autonomy(log.n_interferences, log.lap_time_s, EXPERIMENT_CONFIG['interference_seconds'])
    print(f"Scenario {scenario.id}: eta = {eta:.1f}%, interferences = {log.n_interferences}, "
          f"lap time = {log.lap_time_s:.1f}s, completed = {log.completed}")
    if args.lap_log:
        print(f"Lap log: {log.to_csv(args.lap_log)}")
    if log.latencies_ms:
        print(f"Predict latency: mean {np.mean(log.latencies_ms):.2f} ms over {len(log.latencies_ms)} frames")
    return 0


def cmd_experiment(args) -> int:
    spec, params = load_model(args.model)
    scenario = resolve_scenario(args.scenario)
    exp_ids = experiment_suite(scenario.id) if args.name == 'all' else [args.name]
    cfg = ExperimentConfig(
        max_sweep_steps=args.max_steps,
        laps_per_condition=args.laps,
        workers=args.workers,
        seed=args.seed,
        control=default_control(args.speed_limit),
        deploy=_deploy_config(args),
    )
    model = ModelDriver(spec, params)
    reports = [run_experiment(exp_id, scenario, model, cfg) for exp_id in exp_ids]

    latency = None
    if args.latency_frames:
        rig = CameraRig(count=1)
        renderer = Renderer(scenario, rig)
        step = scenario.length / args.latency_frames
        frames = [renderer.render(scenario.pose_at(i * step)) for i in range(args.latency_frames)]
        latency = measure_latency(spec, params, frames).summary()

    out = Path(args.out) if args.out else Path(args.data_root or DATA_ROOT) / 'reports' / f"{scenario.id}_{args.name}"
    json_path, txt_path = emit_report(reports, out, latency=latency)
    print(txt_path.read_text(encoding='utf-8'), end='')
    with RunTracker(args.tracking_db) as tracker:
        for report in reports:
            tracker.record_experiment(report)
        if latency:
            tracker.record_latency(args.model, latency)
    return 0


def cmd_activations(args) -> int:
    spec, params = load_model(args.model)
    frame = load_image(args.frame)
    maps = activation_maps(spec, params, frame)
    if not 1 <= args.layer <= len(maps):
        raise InvalidInputError(f"layer must lie in 1..{len(maps)}, got {args.layer}")
    out_dir = Path(args.out)
    selected = maps[args.layer - 1]
    for c, act in enumerate(selected):
        gray = np.repeat(act[:, :, None], 3, axis=2)
        if args.scale > 1:
            gray = np.kron(gray, np.ones((args.scale, args.scale, 1), dtype=np.uint8))
        save_image(gray, out_dir / f"layer{args.layer}_map{c:02d}.png")
    print(f"Wrote {len(selected)} maps of {selected.shape[1]}x{selected.shape[2]} to {out_dir}")
    return 0


def cmd_predict_analyze(args) -> int:
    spec, params = load_model(args.model)
    ds = load_manifest(args.manifest, args.behavior)
    end = len(ds) if args.count is None else args.start + args.count
    subset = ds.subset(range(args.start, min(end, len(ds))))
    trace = prediction_analysis(spec, params, subset, FrameLoader(ds.root))
    out = trace.to_csv(args.out)
    summary = trace.summary()
    print(f"{summary['frames']} frames, MAE {summary['mae']:.4f}, correlation {summary['correlation']:.3f}")
    print(f"Trace: {out}")
    return 0


def cmd_augment_preview(args) -> int:
    ds = load_manifest(args.manifest, args.behavior)
    if not 0 <= args.index < len(ds):
        raise InvalidInputError(f"index {args.index} outside 0..{len(ds) - 1}")
    sample = ds.samples[args.index]
    loader = FrameLoader(ds.root)
    frames = augmentation_preview(
        loader(sample.center),
        sample.steering,
        make_rng(args.seed),
        PerspectiveShiftConfig(),
        loader(sample.left) if sample.left else None,
        loader(sample.right) if sample.right else None,
    )
    out_dir = Path(args.out)
    for i, (name, img, steering) in enumerate(frames):
        save_image(img, out_dir / f"{i:02d}_{name}.png")
        print(f"{i:02d} {name:<20} steering {steering:+.4f}")
    return 0


def cmd_pipeline(args) -> int:
    experiments = [args.experiment] if args.experiment else []
    cfg = _run_config(args, laps=args.laps, epochs=args.epochs, augmentation_loops=args.augmentation_loops,
                      experiments=experiments or None, publish=args.publish or None)
    result = BehaviorCloningPipeline(cfg).run()
    print(f"Collected {result['samples']} samples; model {result['model_path']}")
    if result['report_paths']:
        print(f"Report: {result['report_paths'][1]}")
    return 0


def cmd_runs(args) -> int:
    with RunTracker(args.tracking_db) as tracker:
        rows = tracker.summary_rows()
    for table, table_rows in rows.items():
        print(f"{table}: {len(table_rows)} rows")
        for row in table_rows[-args.tail:] if args.tail else []:
            print(f"  {json.dumps(row, default=str)}")
    if args.publish:
        publish_summary(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='bcw', description="Behavioral cloning workbench")
    parser.add_argument('--verbose', '-v', action='store_true', help="debug logging")
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, behavior=True):
        if behavior:
            p.add_argument('--behavior', choices=BEHAVIORS, default=None, help="preset (default simplistic)")
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--data-root', default=None, help="defaults to BCW_DATA_ROOT or ./data")
        p.add_argument('--tracking-db', default=None, help="DuckDB run ledger")
        p.add_argument('--workers', type=int, default=None)
        p.add_argument('--config', default=None, help="TOML run configuration (flags win)")

    p = sub.add_parser('collect', help="drive the expert and record a dataset")
    common(p)
    p.add_argument('--scenario', default=None, help="built-in id or scenario file")
    p.add_argument('--laps', type=int, default=None)
    p.add_argument('--cameras', type=int, choices=(1, 3), default=None)
    p.add_argument('--bidirectional', action=argparse.BooleanOptionalAction, default=None)
    p.add_argument('--rate-hz', type=float, default=COLLECTION_CONFIG['rate_hz'])
    p.add_argument('--wander', type=float, default=COLLECTION_CONFIG['wander_amplitude_m'],
                   help="expert lateral drift amplitude in meters")
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser('balance', help="zero-steering histogram before/after balancing")
    p.add_argument('manifest')
    p.add_argument('--behavior', choices=BEHAVIORS, default='simplistic')
    p.add_argument('--deletion-rate', type=float, default=None)
    p.add_argument('--bins', type=int, default=COLLECTION_CONFIG['histogram_bins'])
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser('train', help="split, stream and train a model")
    p.add_argument('manifest')
    common(p)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--augmentation-loops', type=int, default=None)
    p.add_argument('--augmentation', choices=tuple(AUGMENTATION_PRESETS), default=None,
                   help="augmentation probabilities preset (defaults to the behavior's)")
    p.add_argument('--learning-rate', type=float, default=None)
    p.add_argument('--split-ratio', type=float, default=None)
    p.add_argument('--keep-moments', action='store_true', help="store optimizer moments in the model file")
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_train)

    def deploy_flags(p):
        p.add_argument('model')
        p.add_argument('--scenario', default='simplistic')
        p.add_argument('--speed-limit', type=float, default=None, help="km/h, defaults to 25")
        p.add_argument('--control-rate-hz', type=float, default=30.0)

    p = sub.add_parser('evaluate', help="one closed-loop lap and its autonomy")
    deploy_flags(p)
    p.add_argument('--lap-log', default=None, help="write the per-step lap CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('experiment', help="run a named experiment or 'all'")
    p.add_argument('name', choices=EXPERIMENT_IDS + ('all',))
    deploy_flags(p)
    p.add_argument('--laps', type=int, default=EXPERIMENT_CONFIG['laps_per_condition'])
    p.add_argument('--max-steps', type=int, default=EXPERIMENT_CONFIG['max_sweep_steps'])
    p.add_argument('--workers', type=int, default=EXPERIMENT_CONFIG['workers'])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--latency-frames', type=int, default=0, help="also measure predict latency")
    p.add_argument('--data-root', default=None)
    p.add_argument('--tracking-db', default=None)
    p.add_argument('--out', default=None, help="report path without extension")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser('activations', help="per-channel activation maps of one conv layer")
    p.add_argument('model')
    p.add_argument('frame')
    p.add_argument('--layer', type=int, default=1, help="1-based conv layer")
    p.add_argument('--scale', type=int, default=1, help="nearest-neighbour upscaling of the maps")
    p.add_argument('--out', default='activations')
    p.set_defaults(func=cmd_activations)

    p = sub.add_parser('predict-analyze', help="predicted vs ground-truth steering CSV")
    p.add_argument('model')
    p.add_argument('manifest')
    p.add_argument('--behavior', choices=BEHAVIORS, default='simplistic')
    p.add_argument('--start', type=int, default=0)
    p.add_argument('--count', type=int, default=None)
    p.add_argument('--out', default='prediction_analysis.csv')
    p.set_defaults(func=cmd_predict_analyze)

    p = sub.add_parser('augment-preview', help="write each augmentation of one sample as PNG")
    p.add_argument('manifest')
    p.add_argument('--behavior', choices=BEHAVIORS, default='simplistic')
    p.add_argument('--index', type=int, default=0)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default='augment_preview')
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser('pipeline', help="collect, train and evaluate end to end")
    common(p)
    p.add_argument('--laps', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--augmentation-loops', type=int, default=None)
    p.add_argument('--experiment', choices=EXPERIMENT_IDS + ('all',), default=None)
    p.add_argument('--publish', action='store_true', help="publish run summaries through dlt")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser('runs', help="list tracked runs")
    p.add_argument('--tracking-db', default=None)
    p.add_argument('--tail', type=int, default=5)
    p.add_argument('--publish', action='store_true')
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )
    try:
        return args.func(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except (InvalidInputError, WorkbenchError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
