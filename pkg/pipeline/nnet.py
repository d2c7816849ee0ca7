"""
Steering regression network in plain numpy: NHWC strided convolutions, ReLU,
inverted dropout, MSE loss, backpropagation, Adam, model files and activation maps
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import TRAINING_PRESETS
from .errors import InvalidInputError, ModelFormatError, NumericError
from .imgproc import ImageU8, Rng, make_rng, preprocess

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

MODEL_MAGIC = b'BCWM'
MODEL_VERSION = 1
FLAG_MOMENTS = 0x1
_HEADER = struct.Struct('<4sHHI')
_STEP = struct.Struct('<Q')
_DIGEST_SIZE = hashlib.sha256().digest_size


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int
    filters: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.filters < 1:
            raise InvalidInputError(f"invalid conv layer {self}")


DEFAULT_CONV = (
    ConvLayerSpec(kernel=11, stride=5, filters=8),
    ConvLayerSpec(kernel=5, stride=2, filters=16),
    ConvLayerSpec(kernel=3, stride=2, filters=24),
)


@dataclass(frozen=True)
class NetSpec:
    """
    Layer layout of the network

    input_shape is (height, width, channels). dropout[i] masks the ReLU output of
    hidden fc layer i during training. The last fc layer is linear and never dropped,
    so its entry has no effect.
    """

    input_shape: Tuple[int, int, int] = (64, 64, 3)
    conv: Tuple[ConvLayerSpec, ...] = DEFAULT_CONV
    fc_units: Tuple[int, ...] = (64, 32, 1)
    dropout: Tuple[float, ...] = (0.25, 0.25, 0.25)
    activation: str = 'relu'

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidInputError(f"invalid input shape {self.input_shape}")
        if not self.fc_units or self.fc_units[-1] != 1 or min(self.fc_units) < 1:
            raise InvalidInputError("fc layers must be non-empty and end in a single unit")
        if len(self.dropout) != len(self.fc_units):
            raise InvalidInputError("one dropout probability per fc layer is required")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise InvalidInputError(f"dropout probabilities must lie in [0, 1): {self.dropout}")
        if self.activation != 'relu':
            raise InvalidInputError(f"unsupported activation '{self.activation}'")
        self.conv_shapes()

    @property
    def input_size(self) -> Tuple[int, int]:
        """(width, height) expected by preprocess"""
        return self.input_shape[1], self.input_shape[0]

    def conv_shapes(self) -> List[Tuple[int, int, int]]:
        """Output (h, w, c) of every conv layer under valid padding"""
        h, w, c = self.input_shape
        shapes = []
        for layer in self.conv:
            if layer.kernel > h or layer.kernel > w:
                raise InvalidInputError(f"kernel {layer.kernel} larger than its {h}x{w} input")
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
            c = layer.filters
            shapes.append((h, w, c))
        return shapes

    @property
    def flat_features(self) -> int:
        h, w, c = self.conv_shapes()[-1] if self.conv else self.input_shape
        return h * w * c

    def parameter_shapes(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """(weight shape, bias shape) per layer, conv layers first"""
        shapes = []
        c = self.input_shape[2]
        for layer in self.conv:
            shapes.append(((layer.kernel, layer.kernel, c, layer.filters), (layer.filters,)))
            c = layer.filters
        fan_in = self.flat_features
        for units in self.fc_units:
            shapes.append(((fan_in, units), (units,)))
            fan_in = units
        return shapes

    def to_dict(self) -> Dict:
        return {
            'input_shape': list(self.input_shape),
            'conv': [{'kernel': c.kernel, 'stride': c.stride, 'filters': c.filters} for c in self.conv],
            'fc_units': list(self.fc_units),
            'dropout': list(self.dropout),
            'activation': self.activation,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'NetSpec':
        return cls(
            input_shape=tuple(data['input_shape']),
            conv=tuple(ConvLayerSpec(**c) for c in data['conv']),
            fc_units=tuple(data['fc_units']),
            dropout=tuple(data['dropout']),
            activation=data.get('activation', 'relu'),
        )


def pilotnet_spec() -> NetSpec:
    """PilotNet-shaped layout on a 200x66 input (5 conv, 4 fc)"""
    return NetSpec(
        input_shape=(66, 200, 3),
        conv=(
            ConvLayerSpec(5, 2, 24),
            ConvLayerSpec(5, 2, 36),
            ConvLayerSpec(5, 2, 48),
            ConvLayerSpec(3, 1, 64),
            ConvLayerSpec(3, 1, 64),
        ),
        fc_units=(100, 50, 10, 1),
        dropout=(0.0, 0.0, 0.0, 0.0),
    )


def param_count(spec: NetSpec) -> int:
    """Trainable weights plus biases over all layers"""
    return sum(math.prod(w) + math.prod(b) for w, b in spec.parameter_shapes())


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class NetParams:
    """Weights and biases per layer (conv first) plus Adam moments and step counter"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None
    t: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def arrays(self) -> List[np.ndarray]:
        """Flat parameter list in storage order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> 'NetParams':
        return NetParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            m=[a.copy() for a in self.m] if self.m is not None else None,
            v=[a.copy() for a in self.v] if self.v is not None else None,
            t=self.t,
        )

    def astype(self, dtype) -> 'NetParams':
        return NetParams(
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
            t=self.t,
        )


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def glorot_uniform_init(fan_in: int, fan_out: int, rng: Rng, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Samples from U(-L, L) with L = sqrt(6 / (fan_in + fan_out))"""
    if fan_in < 1 or fan_out < 1:
        raise InvalidInputError("fans must be at least 1")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape) if shape is not None else (fan_in, fan_out))


def init_params(spec: NetSpec, rng: Rng, dtype=np.float32) -> NetParams:
    """Glorot-uniform weights, zero biases"""
    weights, biases = [], []
    for w_shape, b_shape in spec.parameter_shapes():
        if len(w_shape) == 4:
            k, _, cin, cout = w_shape
            fan_in, fan_out = k * k * cin, k * k * cout
        else:
            fan_in, fan_out = w_shape
        weights.append(glorot_uniform_init(fan_in, fan_out, rng, w_shape).astype(dtype))
        biases.append(np.zeros(b_shape, dtype=dtype))
    return NetParams(weights=weights, biases=biases)


def zero_params(spec: NetSpec, dtype=np.float32) -> NetParams:
    return NetParams(
        weights=[np.zeros(w, dtype=dtype) for w, _ in spec.parameter_shapes()],
        biases=[np.zeros(b, dtype=dtype) for _, b in spec.parameter_shapes()],
    )


def weights_checksum(params: NetParams) -> str:
    """SHA-256 over the little-endian float32 weights and biases"""
    digest = hashlib.sha256()
    for arr in params.arrays():
        digest.update(np.ascontiguousarray(arr, dtype='<f4').tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (n, oh, ow, c, k, k) view
    return sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """
    Valid-padding strided cross-correlation plus bias

    Args:
        x: (n, h, w, c_in) input
        w: (k, k, c_in, c_out) kernel
        b: (c_out,) bias
        stride: step in both directions

    Returns:
        (n, floor((h - k) / s) + 1, floor((w - k) / s) + 1, c_out)
    """
    k = w.shape[0]
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise InvalidInputError(f"input {x.shape} does not match kernel {w.shape}")
    if k > x.shape[1] or k > x.shape[2]:
        raise InvalidInputError(f"kernel {k}x{k} larger than input {x.shape[1]}x{x.shape[2]}")
    win = _windows(x, k, stride)
    return np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2])) + b


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, dout: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d_forward given the output gradient"""
    k = w.shape[0]
    _, oh, ow, _ = dout.shape
    win = _windows(x, k, stride)
    dw = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dout @ w[i, j].T
    return dx, dw, db


def dropout_mask(shape: Sequence[int], p: float, rng: Rng, dtype=np.float32) -> np.ndarray:
    """Inverted dropout scale: 0 with probability p, otherwise 1 / (1 - p)"""
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / np.asarray(1.0 - p, dtype=dtype)


def dropout(x: np.ndarray, p: float, rng: Rng) -> np.ndarray:
    """Inverted dropout: E[dropout(x)] == x, so inference needs no rescaling"""
    if not 0.0 <= p < 1.0:
        raise InvalidInputError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    return x * dropout_mask(x.shape, p, rng, x.dtype.type)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Per-layer tensors kept by forward for backward and activation_maps"""

    conv_inputs: List[np.ndarray] = field(default_factory=list)
    conv_pre: List[np.ndarray] = field(default_factory=list)
    fc_inputs: List[np.ndarray] = field(default_factory=list)
    fc_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    fc_pre: List[np.ndarray] = field(default_factory=list)
    flat_shape: Tuple[int, ...] = ()

    def conv_activations(self) -> List[np.ndarray]:
        return [relu(z) for z in self.conv_pre]


def forward(
    spec: NetSpec,
    params: NetParams,
    batch: np.ndarray,
    mode: str = 'eval',
    rng: Optional[Rng] = None,
) -> Tuple[np.ndarray, ForwardCache]:
    """
    Run the network on a batch

    Args:
        batch: (n, h, w, c) preprocessed inputs matching spec.input_shape
        mode: 'train' applies inverted dropout with rng; 'eval' is deterministic

    Returns:
        (predictions of shape (n,), cache)
    """
    if mode not in ('train', 'eval'):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got '{mode}'")
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise InvalidInputError(f"batch shape {batch.shape} does not match input {spec.input_shape}")
    training = mode == 'train'
    if training and rng is None and any(spec.dropout[:-1]):
        raise InvalidInputError("train mode with dropout requires an rng")

    cache = ForwardCache()
    x = np.asarray(batch, dtype=params.dtype)
    n_conv = len(spec.conv)
    for layer, w, b in zip(spec.conv, params.weights[:n_conv], params.biases[:n_conv]):
        z = conv2d_forward(x, w, b, layer.stride)
        cache.conv_inputs.append(x)
        cache.conv_pre.append(z)
        x = relu(z)

    cache.flat_shape = x.shape
    x = x.reshape(x.shape[0], -1)
    last = len(spec.fc_units) - 1
    for i, (w, b, p) in enumerate(zip(params.weights[n_conv:], params.biases[n_conv:], spec.dropout)):
        cache.fc_inputs.append(x)
        z = x @ w + b
        cache.fc_pre.append(z)
        mask = None
        if i == last:
            x = z
        else:
            x = relu(z)
            if training and p > 0.0:
                mask = dropout_mask(x.shape, p, rng, x.dtype.type)
                x = x * mask
        cache.fc_masks.append(mask)

    return x[:, 0], cache


def backward(spec: NetSpec, params: NetParams, cache: ForwardCache, grad_pred: np.ndarray) -> Gradients:
    """Backpropagate dLoss/dPrediction through the cached forward pass"""
    n_conv = len(spec.conv)
    n_fc = len(spec.fc_units)
    dws: List[np.ndarray] = [None] * (n_conv + n_fc)
    dbs: List[np.ndarray] = [None] * (n_conv + n_fc)

    g = np.asarray(grad_pred, dtype=params.dtype).reshape(-1, 1)
    for i in reversed(range(n_fc)):
        if i != n_fc - 1:
            if cache.fc_masks[i] is not None:
                g = g * cache.fc_masks[i]
            g = g * (cache.fc_pre[i] > 0)
        w = params.weights[n_conv + i]
        dws[n_conv + i] = cache.fc_inputs[i].T @ g
        dbs[n_conv + i] = g.sum(axis=0)
        g = g @ w.T

    g = g.reshape(cache.flat_shape)
    for i in reversed(range(n_conv)):
        g = g * (cache.conv_pre[i] > 0)
        dx, dw, db = conv2d_backward(cache.conv_inputs[i], params.weights[i], spec.conv[i].stride, g)
        dws[i], dbs[i] = dw, db
        g = dx

    return Gradients(weights=dws, biases=dbs)


def mse_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """(1/n) * sum of squared residuals"""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction and truth lengths differ: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise InvalidInputError("MSE of an empty batch")
    return float(np.mean((pred - truth) ** 2))


def mse_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    return 2.0 * (pred - np.asarray(truth, dtype=pred.dtype).ravel()) / pred.size


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def adam_step(params: NetParams, grads: Gradients, lr: float = 1e-3, t: Optional[int] = None) -> NetParams:
    """
    One bias-corrected Adam update (beta1 0.9, beta2 0.999, eps 1e-8)

    Args:
        t: 1-based step number; defaults to params.t + 1

    Returns:
        New NetParams carrying the updated moments and step counter
    """
    t = params.t + 1 if t is None else t
    if t < 1:
        raise InvalidInputError(f"Adam step must be >= 1, got {t}")
    flat_g = grads.arrays()
    for g in flat_g:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")

    flat_p = params.arrays()
    m = params.m if params.m is not None else [np.zeros_like(p) for p in flat_p]
    v = params.v if params.v is not None else [np.zeros_like(p) for p in flat_p]
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t

    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(flat_p, flat_g, m, v):
        mi = ADAM_BETA1 * mi + (1.0 - ADAM_BETA1) * g
        vi = ADAM_BETA2 * vi + (1.0 - ADAM_BETA2) * g * g
        update = lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPSILON)
        new_p.append((p - update).astype(p.dtype))
        new_m.append(mi.astype(p.dtype))
        new_v.append(vi.astype(p.dtype))

    return NetParams(weights=new_p[0::2], biases=new_p[1::2], m=new_m, v=new_v, t=t)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 256
    loss: str = 'mse'
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise InvalidInputError(f"learning rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch size must be at least 1")
        if self.loss != 'mse':
            raise InvalidInputError(f"unsupported loss '{self.loss}'")

    @classmethod
    def preset(cls, behavior: str, seed: int = 0, **overrides) -> 'TrainConfig':
        values = dict(TRAINING_PRESETS[behavior])
        values.pop('augmentation_loops', None)
        values.update(seed=seed, **overrides)
        return cls(**values)


class TrainingStream(Protocol):
    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]: ...

    def validation_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]: ...


class ArrayStream:
    """In-memory stream over preprocessed arrays, reshuffled per epoch"""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, batch_size: int, steps: int,
                 seed: int = 0, validation: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        self.inputs = inputs
        self.labels = np.asarray(labels, dtype=np.float32)
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.validation = validation

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        rng = make_rng([self.seed, epoch])
        n = len(self.labels)
        order = np.concatenate([rng.permutation(n) for _ in range(-(-self.steps * self.batch_size // n))])
        for step in range(self.steps):
            idx = order[step * self.batch_size:(step + 1) * self.batch_size]
            yield self.inputs[idx], self.labels[idx]

    def validation_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        if self.validation is None:
            return
        x, y = self.validation
        for start in range(0, len(y), self.batch_size):
            yield x[start:start + self.batch_size], np.asarray(y[start:start + self.batch_size], dtype=np.float32)


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def to_rows(self) -> List[Dict]:
        return [
            {'epoch': i + 1, 'train_loss': tl, 'val_loss': vl, 'seconds': s}
            for i, (tl, vl, s) in enumerate(zip(self.train_loss, self.val_loss, self.epoch_seconds))
        ]


def evaluate_loss(spec: NetSpec, params: NetParams, batches: Iterable[Tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
    """Sample-weighted eval-mode MSE over batches (None when there are none)"""
    total, count = 0.0, 0
    for x, y in batches:
        pred, _ = forward(spec, params, x, 'eval')
        total += mse_loss(pred, y) * len(y)
        count += len(y)
    return total / count if count else None


def train(
    spec: NetSpec,
    stream: TrainingStream,
    cfg: TrainConfig,
    params: Optional[NetParams] = None,
    on_epoch: Optional[Callable[[int, float, Optional[float]], None]] = None,
) -> Tuple[NetParams, TrainingHistory]:
    """
    Fit the network with Adam on MSE

    Args:
        spec: network layout
        stream: per-epoch training batches plus validation batches
        cfg: learning rate, epochs and seed
        params: starting point; Glorot initialisation from cfg.seed when omitted
        on_epoch: callback (epoch, train loss, validation loss)

    Returns:
        (final params, loss history with wall-clock seconds per epoch)
    """
    params = params if params is not None else init_params(spec, make_rng([cfg.seed, 0]))
    dropout_rng = make_rng([cfg.seed, 1])
    history = TrainingHistory()

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        total, count, steps = 0.0, 0, 0
        for step, (x, y) in enumerate(stream.epoch(epoch - 1), start=1):
            pred, cache = forward(spec, params, x, 'train', dropout_rng)
            loss = mse_loss(pred, y)
            if not math.isfinite(loss):
                raise NumericError(f"loss became {loss}", epoch, step)
            grads = backward(spec, params, cache, mse_grad(pred, y))
            try:
                params = adam_step(params, grads, cfg.learning_rate)
            except NumericError as e:
                raise NumericError(str(e), epoch, step) from e
            total += loss * len(y)
            count += len(y)
            steps += 1
            logger.debug(f"epoch {epoch} step {step}: loss {loss:.6f}")

        train_loss = total / count if count else float('nan')
        val_loss = evaluate_loss(spec, params, stream.validation_batches())
        if val_loss is not None and not math.isfinite(val_loss):
            raise NumericError(f"validation loss became {val_loss}", epoch)
        seconds = time.perf_counter() - started
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.epoch_seconds.append(seconds)
        history.steps_per_epoch = steps
        val_text = f"{val_loss:.6f}" if val_loss is not None else "n/a"
        logger.info(f"Epoch {epoch}/{cfg.epochs}: {steps} steps, loss {train_loss:.6f}, "
                    f"val_loss {val_text}, {seconds:.1f}s")
        if on_epoch:
            on_epoch(epoch, train_loss, val_loss)

    return params, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_batch(spec: NetSpec, params: NetParams, frames: Sequence[ImageU8]) -> np.ndarray:
    w, h = spec.input_size
    batch = np.stack([preprocess(f, w, h) for f in frames])
    pred, _ = forward(spec, params, batch, 'eval')
    return np.clip(pred, -1.0, 1.0)


def predict(spec: NetSpec, params: NetParams, frame: ImageU8) -> float:
    """Deployment preprocessing, eval-mode forward, output clamped to [-1, 1]"""
    return float(predict_batch(spec, params, [frame])[0])


def activation_maps(spec: NetSpec, params: NetParams, frame: ImageU8) -> List[np.ndarray]:
    """
    Post-ReLU feature maps of every conv layer

    Returns:
        One (channels, h, w) uint8 stack per conv layer, each channel min-max scaled to [0, 255]
    """
    w, h = spec.input_size
    _, cache = forward(spec, params, preprocess(frame, w, h)[None], 'eval')
    maps = []
    for act in cache.conv_activations():
        chans = np.moveaxis(act[0].astype(np.float64), -1, 0)
        lo = chans.min(axis=(1, 2), keepdims=True)
        span = chans.max(axis=(1, 2), keepdims=True) - lo
        scaled = np.where(span > 0, (chans - lo) / np.where(span > 0, span, 1.0), 0.0)
        maps.append(np.rint(scaled * 255.0).astype(np.uint8))
    return maps


@dataclass
class LatencyStats:
    samples_ms: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def mode(self) -> float:
        """Most frequent latency at 0.1 ms resolution"""
        bins = np.round(np.asarray(self.samples_ms) * 10).astype(np.int64)
        values, counts = np.unique(bins, return_counts=True)
        return float(values[np.argmax(counts)] / 10.0)

    def summary(self) -> Dict[str, float]:
        return {'count': len(self.samples_ms), 'mode_ms': self.mode, 'mean_ms': self.mean,
                'p50_ms': self.p50, 'p95_ms': self.p95}


def measure_latency(spec: NetSpec, params: NetParams, frames: Sequence[ImageU8], repeats: int = 1) -> LatencyStats:
    """Wall-clock milliseconds of single-frame predict calls"""
    if not frames or repeats < 1:
        raise InvalidInputError("latency measurement needs frames and repeats >= 1")
    samples = []
    for _ in range(repeats):
        for frame in frames:
            started = time.perf_counter()
            predict(spec, params, frame)
            samples.append((time.perf_counter() - started) * 1000.0)
    return LatencyStats(samples)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_model(path, spec: NetSpec, params: NetParams, include_moments: bool = False) -> Path:
    """
    Write a self-describing model file

    Layout: magic, version, flags, spec JSON length, spec JSON, little-endian float32
    blobs per layer (weights then bias; optionally Adam moments), step counter, SHA-256 trailer.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode('utf-8')
    moments = include_moments and params.m is not None and params.v is not None
    flags = FLAG_MOMENTS if moments else 0

    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, flags, len(spec_json)), spec_json]
    blobs = params.arrays() + (params.m + params.v if moments else [])
    parts.extend(np.ascontiguousarray(a, dtype='<f4').tobytes() for a in blobs)
    parts.append(_STEP.pack(params.t))
    body = b''.join(parts)
    path.write_bytes(body + hashlib.sha256(body).digest())
    logger.info(f"Saved model ({param_count(spec)} parameters) to {path}")
    return path


def load_model(path) -> Tuple[NetSpec, NetParams]:
    """Read a file written by save_model; nothing is returned unless it verifies"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from e
    if len(data) < _HEADER.size + _STEP.size + _DIGEST_SIZE or data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path} is not a model file")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"checksum mismatch in {path} (truncated or corrupted)")

    _, version, flags, spec_len = _HEADER.unpack_from(body, 0)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} (expected {MODEL_VERSION})")
    offset = _HEADER.size
    try:
        spec = NetSpec.from_dict(json.loads(body[offset:offset + spec_len].decode('utf-8')))
    except (ValueError, KeyError, TypeError) as e:
        raise ModelFormatError(f"invalid network description in {path}: {e}") from e
    offset += spec_len

    shapes = []
    for w_shape, b_shape in spec.parameter_shapes():
        shapes.extend((w_shape, b_shape))
    if flags & FLAG_MOMENTS:
        shapes = shapes * 3

    arrays = []
    for shape in shapes:
        size = math.prod(shape) * 4
        if offset + size > len(body) - _STEP.size:
            raise ModelFormatError(f"{path} is shorter than its network description")
        arrays.append(np.frombuffer(body, dtype='<f4', count=math.prod(shape), offset=offset)
                      .astype(np.float32).reshape(shape))
        offset += size
    if offset + _STEP.size != len(body):
        raise ModelFormatError(f"{path} has trailing bytes after the weights")
    (t,) = _STEP.unpack_from(body, offset)

    n = 2 * len(spec.parameter_shapes())
    flat = arrays[:n]
    params = NetParams(weights=flat[0::2], biases=flat[1::2], t=t)
    if flags & FLAG_MOMENTS:
        params.m = arrays[n:2 * n]
        params.v = arrays[2 * n:3 * n]
    return spec, params
