"""
Demonstration datasets: manifest ingestion, 4:1 segregation, zero-steering
balancing and the augmented, preprocessed training batch stream
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import BALANCE_PRESETS, COLLECTION_CONFIG, TRAINING_PRESETS
from .errors import DataError, FrameLoadError, InvalidInputError, ManifestError
from .imgproc import (
    AugmentationProbabilities,
    ImageU8,
    PerspectiveShiftConfig,
    Rng,
    augment_sample,
    load_image,
    make_rng,
    preprocess,
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['timestamp', 'center', 'left', 'right', 'steering', 'throttle', 'brake', 'speed']
BEHAVIOR_TAGS = ('simplistic', 'rigorous', 'collision')
SPLIT_BINS = 25


@dataclass(frozen=True)
class DrivingSample:
    """One timestamped demonstration record"""

    timestamp: float
    center: str
    left: Optional[str]
    right: Optional[str]
    steering: float
    throttle: float = 0.0
    brake: float = 0.0
    speed: float = 0.0

    def __post_init__(self):
        if not self.center:
            raise InvalidInputError("center frame reference is required")
        if not -1.0 <= self.steering <= 1.0:
            raise InvalidInputError(f"steering {self.steering} outside [-1, 1]")
        if not 0.0 <= self.throttle <= 1.0:
            raise InvalidInputError(f"throttle {self.throttle} outside [0, 1]")
        if not 0.0 <= self.brake <= 1.0:
            raise InvalidInputError(f"brake {self.brake} outside [0, 1]")
        if not self.speed >= 0.0:
            raise InvalidInputError(f"speed {self.speed} is negative")

    @property
    def sample_id(self) -> str:
        return self.center


@dataclass(frozen=True)
class Dataset:
    samples: Tuple[DrivingSample, ...]
    behavior_tag: str = 'simplistic'
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.behavior_tag not in BEHAVIOR_TAGS:
            raise InvalidInputError(f"unknown behavior tag '{self.behavior_tag}'")

    def __len__(self) -> int:
        return len(self.samples)

    def steering(self) -> np.ndarray:
        return np.array([s.steering for s in self.samples], dtype=np.float64)

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        return replace(self, samples=tuple(self.samples[i] for i in indices))


@dataclass(frozen=True)
class BalanceConfig:
    deletion_rate: float = 0.0
    zero_epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.deletion_rate <= 1.0:
            raise InvalidInputError(f"deletion rate must lie in [0, 1], got {self.deletion_rate}")
        if self.zero_epsilon < 0:
            raise InvalidInputError("zero_epsilon must be non-negative")

    @classmethod
    def preset(cls, behavior: str) -> 'BalanceConfig':
        return cls(**BALANCE_PRESETS[behavior])


@dataclass(frozen=True)
class TrainStreamConfig:
    batch_size: int = 256
    augmentation_loops: int = 64
    probs: AugmentationProbabilities = field(default_factory=AugmentationProbabilities)
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    seed: int = 0
    perspective: PerspectiveShiftConfig = field(default_factory=PerspectiveShiftConfig)
    input_size: Tuple[int, int] = (64, 64)
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.augmentation_loops < 1:
            raise InvalidInputError("batch size and augmentation loops must be at least 1")
        if self.workers < 1:
            raise InvalidInputError("workers must be at least 1")

    @classmethod
    def preset(cls, behavior: str, seed: int = 0, **overrides) -> 'TrainStreamConfig':
        training = TRAINING_PRESETS[behavior]
        values = dict(
            batch_size=training['batch_size'],
            augmentation_loops=training['augmentation_loops'],
            probs=AugmentationProbabilities.preset(behavior),
            balance=BalanceConfig.preset(behavior),
            seed=seed,
        )
        values.update(overrides)
        return cls(**values)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _parse_float(value: str, column: str, row: int) -> float:
    try:
        parsed = float(value)
    except ValueError:
        raise ManifestError(f"column '{column}' is not a number: {value!r}", row) from None
    if not math.isfinite(parsed):
        raise ManifestError(f"column '{column}' is not finite: {value!r}", row)
    return parsed


def load_manifest(path, behavior_tag: str = 'simplistic') -> Dataset:
    """
    Load a demonstration manifest

    Args:
        path: CSV file with the MANIFEST_COLUMNS header; frame paths relative to its directory
        behavior_tag: simplistic, rigorous or collision

    Returns:
        Dataset with one sample per row
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except FileNotFoundError:
        raise DataError(f"manifest {path} does not exist") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ManifestError(f"could not parse {path}: {e}") from e

    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"{path} is missing column(s): {', '.join(missing)}")

    samples = []
    for row, record in enumerate(frame[MANIFEST_COLUMNS].itertuples(index=False), start=1):
        values = dict(zip(MANIFEST_COLUMNS, record))
        try:
            samples.append(DrivingSample(
                timestamp=_parse_float(values['timestamp'], 'timestamp', row),
                center=values['center'].strip(),
                left=values['left'].strip() or None,
                right=values['right'].strip() or None,
                steering=_parse_float(values['steering'], 'steering', row),
                throttle=_parse_float(values['throttle'], 'throttle', row),
                brake=_parse_float(values['brake'], 'brake', row),
                speed=_parse_float(values['speed'], 'speed', row),
            ))
        except InvalidInputError as e:
            raise ManifestError(str(e), row) from e

    logger.info(f"Loaded {len(samples)} samples from {path}")
    return Dataset(samples=tuple(samples), behavior_tag=behavior_tag, root=path.parent)


def write_manifest(ds: Dataset, path) -> Path:
    """Write a dataset as a manifest (deterministic bytes for identical samples)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{
        'timestamp': f"{s.timestamp:.3f}",
        'center': s.center,
        'left': s.left or '',
        'right': s.right or '',
        'steering': repr(float(s.steering)),
        'throttle': repr(float(s.throttle)),
        'brake': repr(float(s.brake)),
        'speed': repr(float(s.speed)),
    } for s in ds.samples]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, lineterminator='\n')
    return path


# ---------------------------------------------------------------------------
# Segregation and balancing
# ---------------------------------------------------------------------------

def steering_bins(steering: np.ndarray, bins: int) -> np.ndarray:
    """Bin index of each steering value over [-1, 1] (np.histogram edge semantics)"""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges, steering, side='right') - 1, 0, bins - 1)


def split(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """
    Stratified train/validation split over 25 uniform steering bins

    The training share is floor(n * ratio); each bin contributes its proportional
    quota, remainders going to the bins with the largest fractional parts.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(ds)
    if n < 2:
        raise DataError(f"cannot split a dataset of {n} sample(s)")

    n_train = int(math.floor(n * ratio + 1e-9))
    if n_train == 0 or n_train == n:
        raise DataError(f"ratio {ratio} leaves an empty subset for {n} samples")

    bin_of = steering_bins(ds.steering(), SPLIT_BINS)
    counts = np.bincount(bin_of, minlength=SPLIT_BINS)
    quotas = counts * ratio
    take = np.floor(quotas).astype(int)
    remainder = n_train - int(take.sum())
    if remainder > 0:
        fractional = quotas - take
        order = sorted(range(SPLIT_BINS), key=lambda b: (-fractional[b], b))
        for b in order[:remainder]:
            take[b] += 1

    rng = make_rng(seed)
    train_idx: List[int] = []
    for b in range(SPLIT_BINS):
        members = np.flatnonzero(bin_of == b)
        if len(members) == 0:
            continue
        train_idx.extend(rng.permutation(members)[:take[b]].tolist())

    train_set = set(train_idx)
    train_idx = sorted(train_set)
    val_idx = [i for i in range(n) if i not in train_set]
    logger.info(f"Split {n} samples into {len(train_idx)} training / {len(val_idx)} validation")
    return ds.subset(train_idx), ds.subset(val_idx)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def zero_steer_indices(steering: np.ndarray, cfg: BalanceConfig) -> np.ndarray:
    return np.flatnonzero(np.abs(steering) <= cfg.zero_epsilon)


def deletion_count(d: int, cfg: BalanceConfig) -> int:
    """D = [d * lambda], rounded half away from zero"""
    return _round_half_away(d * cfg.deletion_rate)


def balance_indices(steering: np.ndarray, cfg: BalanceConfig, rng: Rng) -> np.ndarray:
    """Indices kept after deleting round(d * lambda) random zero-steer samples"""
    zeros = zero_steer_indices(steering, cfg)
    delete = deletion_count(len(zeros), cfg)
    keep = np.ones(len(steering), dtype=bool)
    if delete:
        keep[rng.choice(zeros, size=delete, replace=False)] = False
    return np.flatnonzero(keep)


def balance_zero_steer(ds: Dataset, cfg: BalanceConfig, rng: Rng) -> Dataset:
    """Remove a random portion of the exactly-zero steering samples"""
    return ds.subset(balance_indices(ds.steering(), cfg, rng).tolist())


def steering_histogram(ds: Dataset, bins: int = SPLIT_BINS) -> np.ndarray:
    """Per-bin sample counts over [-1, 1]"""
    if bins < 1:
        raise InvalidInputError("bins must be at least 1")
    counts, _ = np.histogram(ds.steering(), bins=bins, range=(-1.0, 1.0))
    return counts


def histogram_table(before: np.ndarray, after: np.ndarray) -> str:
    """Plain-text side-by-side rendering of two steering histograms"""
    bins = len(before)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    width = max(1, int(max(before.max(initial=0), after.max(initial=0))))
    lines = [f"{'bin':>17} {'before':>8} {'after':>8}"]
    for b in range(bins):
        bar = '#' * int(round(30 * after[b] / width))
        lines.append(f"[{edges[b]:+.2f}, {edges[b + 1]:+.2f}) {before[b]:>8d} {after[b]:>8d} {bar}")
    lines.append(f"{'total':>17} {int(before.sum()):>8d} {int(after.sum()):>8d}")
    return '\n'.join(lines)


def segregation_summary(full: Dataset, train: Dataset, validation: Dataset) -> Dict[str, object]:
    """Sample counts of a full dataset and its training and validation parts"""
    return {
        'behavior': full.behavior_tag,
        'complete': len(full),
        'training': len(train),
        'validation': len(validation),
    }


# ---------------------------------------------------------------------------
# Steps arithmetic
# ---------------------------------------------------------------------------

def train_steps(n: int, m: int, chi: int) -> int:
    """Training steps per epoch, ceil(n * chi / m)"""
    if n < 1 or m < 1 or chi < 1:
        raise InvalidInputError("n, m and chi must be at least 1")
    return -(-n * chi // m)


def validation_steps(n: int, m: int) -> int:
    """Validation steps per epoch, ceil(n / m)"""
    if n < 1 or m < 1:
        raise InvalidInputError("n and m must be at least 1")
    return -(-n // m)


# ---------------------------------------------------------------------------
# Frame access and batch streams
# ---------------------------------------------------------------------------

class FrameLoader:
    """
    Resolves manifest-relative frame references with a bounded LRU cache

    Cached frames are read-only; every transform returns a new array.
    """

    def __init__(self, root, cache_size: int = 1024):
        self.root = Path(root)
        self._cached = lru_cache(maxsize=cache_size)(self._read)

    def _read(self, ref: str) -> ImageU8:
        img = load_image(self.root / ref)
        img.flags.writeable = False
        return img

    def __call__(self, ref: str) -> ImageU8:
        return self._cached(ref)


def _sample_order(ds: Dataset, cfg: TrainStreamConfig, epoch: int) -> Iterator[int]:
    """Endless sample indices: each pass rebalances and reshuffles"""
    rng = make_rng([cfg.seed, epoch])
    steering = ds.steering()
    while True:
        kept = balance_indices(steering, cfg.balance, rng)
        if len(kept) == 0:
            raise DataError("zero-steering balancing removed every sample")
        yield from rng.permutation(kept).tolist()


def batch_stream(
    ds: Dataset,
    cfg: TrainStreamConfig,
    loader: Optional[FrameLoader] = None,
    epoch: int = 0,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Augmented, preprocessed training batches for one epoch

    Yields exactly train_steps(len(ds), m, chi) batches of (inputs (m, h, w, 3), labels (m,)).
    Each sample draws from its own generator seeded by (seed, epoch, step, slot), so the
    output does not depend on the number of workers.
    """
    if len(ds) == 0:
        raise DataError("cannot stream batches from an empty dataset")
    loader = loader or FrameLoader(ds.root)
    m = cfg.batch_size
    out_w, out_h = cfg.input_size
    steps = train_steps(len(ds), m, cfg.augmentation_loops)
    order = _sample_order(ds, cfg, epoch)

    def render(job: Tuple[int, int, int]) -> Tuple[np.ndarray, float]:
        index, step, slot = job
        sample = ds.samples[index]
        rng = make_rng([cfg.seed, epoch, step, slot])
        try:
            img, steering = augment_sample(sample, cfg.probs, cfg.perspective, rng, loader)
        except FrameLoadError as e:
            raise FrameLoadError(str(e), sample.sample_id) from e
        return preprocess(img, out_w, out_h), steering

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for step in range(steps):
            jobs = [(next(order), step, slot) for slot in range(m)]
            results = list(pool.map(render, jobs)) if pool else [render(j) for j in jobs]
            inputs = np.stack([r[0] for r in results])
            labels = np.array([r[1] for r in results], dtype=np.float32)
            yield inputs, labels
    finally:
        if pool:
            pool.shutdown(wait=True)


def validation_batches(
    ds: Dataset,
    batch_size: int,
    loader: Optional[FrameLoader] = None,
    input_size: Tuple[int, int] = (64, 64),
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Preprocessed, never augmented validation batches in dataset order"""
    loader = loader or FrameLoader(ds.root)
    out_w, out_h = input_size
    for step in range(validation_steps(len(ds), batch_size)):
        chunk = ds.samples[step * batch_size:(step + 1) * batch_size]
        inputs = []
        for sample in chunk:
            try:
                inputs.append(preprocess(loader(sample.center), out_w, out_h))
            except FrameLoadError as e:
                raise FrameLoadError(str(e), sample.sample_id) from e
        yield np.stack(inputs), np.array([s.steering for s in chunk], dtype=np.float32)


class BatchStream:
    """Training and validation data bundled for nnet.train"""

    def __init__(self, train: Dataset, validation: Optional[Dataset], cfg: TrainStreamConfig,
                 loader: Optional[FrameLoader] = None):
        self.train = train
        self.validation = validation
        self.cfg = cfg
        self.loader = loader or FrameLoader(train.root)
        self.validation_loader = (
            self.loader if validation is None or validation.root == train.root
            else FrameLoader(validation.root)
        )

    @property
    def steps_per_epoch(self) -> int:
        return train_steps(len(self.train), self.cfg.batch_size, self.cfg.augmentation_loops)

    @property
    def validation_steps(self) -> int:
        if not self.validation:
            return 0
        return validation_steps(len(self.validation), self.cfg.batch_size)

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        return batch_stream(self.train, self.cfg, self.loader, epoch)

    def validation_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if not self.validation:
            return iter(())
        return validation_batches(self.validation, self.cfg.batch_size,
                                  self.validation_loader, self.cfg.input_size)


def default_split_ratio() -> float:
    return COLLECTION_CONFIG['split_ratio']
