import math

import numpy as np
import pytest

from pipeline.errors import InvalidInputError, ModelFormatError, NumericError
from pipeline.imgproc import make_rng
from pipeline.nnet import (
    ArrayStream,
    ConvLayerSpec,
    Gradients,
    LatencyStats,
    NetSpec,
    TrainConfig,
    activation_maps,
    adam_step,
    backward,
    conv2d_forward,
    dropout,
    forward,
    glorot_uniform_init,
    init_params,
    load_model,
    measure_latency,
    mse_grad,
    mse_loss,
    param_count,
    pilotnet_spec,
    predict,
    save_model,
    train,
    weights_checksum,
    zero_params,
)


def naive_conv(x, w, b, stride):
    """Loop-based valid cross-correlation"""
    n, h, wd, _ = x.shape
    k, _, _, cout = w.shape
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


def test_default_architecture_dimensions():
    spec = NetSpec()
    assert spec.conv_shapes() == [(11, 11, 8), (4, 4, 16), (1, 1, 24)]
    assert spec.flat_features == 24
    assert param_count(spec) == 13321


def test_pilotnet_layout_is_valid():
    spec = pilotnet_spec()
    assert spec.conv_shapes()[-1] == (1, 18, 64)
    assert param_count(spec) > param_count(NetSpec())


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        NetSpec(fc_units=(64, 2), dropout=(0.0, 0.0))
    with pytest.raises(InvalidInputError):
        NetSpec(dropout=(0.25, 0.25))
    with pytest.raises(InvalidInputError):
        NetSpec(input_shape=(8, 8, 3), conv=(ConvLayerSpec(11, 5, 8),), fc_units=(1,), dropout=(0.0,))
    with pytest.raises(InvalidInputError):
        NetSpec(activation='tanh')


def test_spec_dict_round_trip(small_spec):
    assert NetSpec.from_dict(small_spec.to_dict()) == small_spec


def test_glorot_limit_and_init():
    limit = math.sqrt(6.0 / 1331)
    assert limit == pytest.approx(0.06714, abs=1e-5)
    w = glorot_uniform_init(363, 968, make_rng(0), (11, 11, 3, 8))
    assert w.shape == (11, 11, 3, 8)
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > 0.9 * limit

    params = init_params(NetSpec(), make_rng(0))
    assert np.abs(params.weights[0]).max() <= limit
    assert all(np.all(b == 0) for b in params.biases)
    assert params.dtype == np.float32


def test_conv_matches_naive_loop():
    rng = make_rng(3)
    x = rng.normal(size=(2, 9, 11, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    for stride in (1, 2, 3):
        assert np.allclose(conv2d_forward(x, w, b, stride), naive_conv(x, w, b, stride))


def test_conv_rejects_bad_shapes():
    with pytest.raises(InvalidInputError):
        conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((5, 5, 3, 2)), np.zeros(2), 1)
    with pytest.raises(InvalidInputError):
        conv2d_forward(np.zeros((1, 8, 8, 2)), np.zeros((3, 3, 3, 2)), np.zeros(2), 1)


def test_mse_examples():
    assert mse_loss(np.array([0.1, -0.2]), np.array([0.0, 0.0])) == pytest.approx(0.025)
    assert mse_loss(np.array([0.3]), np.array([0.3])) == 0.0
    with pytest.raises(InvalidInputError):
        mse_loss(np.array([]), np.array([]))
    with pytest.raises(InvalidInputError):
        mse_loss(np.array([0.1, 0.2]), np.array([0.1]))


def test_dropout_expectation_and_identity():
    x = np.ones((2000, 50), dtype=np.float32)
    out = dropout(x, 0.25, make_rng(0))
    assert np.all(np.isclose(out, 0.0) | np.isclose(out, 4.0 / 3.0))
    assert out.mean() == pytest.approx(1.0, abs=0.02)
    assert dropout(x, 0.0, make_rng(0)) is x


def test_eval_forward_is_deterministic(small_spec):
    params = init_params(small_spec, make_rng(1))
    batch = make_rng(2).uniform(-0.5, 0.5, size=(5, 16, 16, 3)).astype(np.float32)
    a, _ = forward(small_spec, params, batch, 'eval')
    b, _ = forward(small_spec, params, batch, 'eval')
    assert a.shape == (5,)
    assert np.array_equal(a, b)
    with pytest.raises(InvalidInputError):
        forward(small_spec, params, batch, 'train')
    with pytest.raises(InvalidInputError):
        forward(small_spec, params, batch[:, :8], 'eval')


def _numeric_gradient_check(spec, params, x, y, run):
    """Compare backward against central differences for every parameter entry"""
    pred, cache = run(params)
    grads = backward(spec, params, cache, mse_grad(pred, y))
    eps = 1e-6
    for arr, grad in zip(params.arrays(), grads.arrays()):
        assert grad.shape == arr.shape
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + eps
            plus = mse_loss(run(params)[0], y)
            arr[idx] = saved - eps
            minus = mse_loss(run(params)[0], y)
            arr[idx] = saved
            numeric = (plus - minus) / (2 * eps)
            assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def _offset_params(spec, seed):
    params = init_params(spec, make_rng(seed)).astype(np.float64)
    # positive biases move pre-activations off the ReLU kink
    for b in params.biases:
        b += make_rng(seed + 1).uniform(0.05, 0.1, size=b.shape)
    return params


@pytest.mark.parametrize('seed', [5, 11, 23])
def test_backward_matches_finite_differences(tiny_spec, seed):
    params = _offset_params(tiny_spec, seed)
    x = make_rng(seed + 2).uniform(-0.5, 0.5, size=(3, 8, 8, 3))
    y = make_rng(seed + 3).uniform(-0.5, 0.5, size=3)
    _numeric_gradient_check(tiny_spec, params, x, y, lambda p: forward(tiny_spec, p, x, 'eval'))


@pytest.mark.parametrize('seed', [5, 11])
def test_backward_through_dropout_matches_finite_differences(tiny_spec, seed):
    spec = NetSpec(input_shape=tiny_spec.input_shape, conv=tiny_spec.conv, fc_units=(6, 1), dropout=(0.5, 0.0))
    params = _offset_params(spec, seed)
    x = make_rng(seed + 2).uniform(-0.5, 0.5, size=(4, 8, 8, 3))
    y = make_rng(seed + 3).uniform(-0.5, 0.5, size=4)
    # a fresh generator per call keeps the masks fixed while parameters move
    _numeric_gradient_check(spec, params, x, y, lambda p: forward(spec, p, x, 'train', make_rng(seed)))


def test_dropout_only_masks_hidden_fc_outputs(small_spec):
    params = init_params(small_spec, make_rng(1))
    batch = make_rng(2).uniform(-0.5, 0.5, size=(6, 16, 16, 3)).astype(np.float32)
    _, eval_cache = forward(small_spec, params, batch, 'eval')
    _, train_cache = forward(small_spec, params, batch, 'train', make_rng(3))
    # flattened conv features reach the first fc layer unmasked
    assert np.array_equal(train_cache.fc_inputs[0], eval_cache.fc_inputs[0])
    assert train_cache.fc_masks[0] is not None
    assert train_cache.fc_masks[-1] is None


def test_train_mode_averages_to_eval_mode(small_spec):
    params = init_params(small_spec, make_rng(4))
    params.biases[len(small_spec.conv)] += np.float32(0.2)
    frame = make_rng(5).uniform(-0.5, 0.5, size=(1, 16, 16, 3)).astype(np.float32)
    batch = np.repeat(frame, 10_000, axis=0)
    _, eval_cache = forward(small_spec, params, frame, 'eval')
    expected = eval_cache.fc_inputs[1][0]
    total = np.zeros_like(expected, dtype=np.float64)
    for seed in range(4):
        _, train_cache = forward(small_spec, params, batch, 'train', make_rng(seed))
        total += train_cache.fc_inputs[1].sum(axis=0)
    assert expected.max() > 0
    assert np.allclose(total / 40_000, expected, rtol=0.02, atol=1e-6)


def test_zero_params_predict_zero(small_spec, frame):
    assert predict(small_spec, zero_params(small_spec), frame) == 0.0


def test_adam_first_step_moves_by_learning_rate(tiny_spec):
    params = init_params(tiny_spec, make_rng(0))
    grads = Gradients(weights=[np.full_like(w, 0.5) for w in params.weights],
                      biases=[np.full_like(b, -2.0) for b in params.biases])
    new = adam_step(params, grads, lr=1e-3)
    assert new.t == 1
    assert np.allclose(new.weights[0], params.weights[0] - 1e-3, atol=1e-7)
    assert np.allclose(new.biases[0], params.biases[0] + 1e-3, atol=1e-7)
    assert adam_step(new, grads, lr=1e-3).t == 2


def test_adam_zero_gradient_is_noop(tiny_spec):
    params = init_params(tiny_spec, make_rng(0))
    grads = Gradients(weights=[np.zeros_like(w) for w in params.weights],
                      biases=[np.zeros_like(b) for b in params.biases])
    new = adam_step(params, grads)
    for a, b in zip(params.arrays(), new.arrays()):
        assert np.array_equal(a, b)


def test_adam_rejects_non_finite(tiny_spec):
    params = init_params(tiny_spec, make_rng(0))
    grads = Gradients(weights=[np.full_like(w, np.nan) for w in params.weights],
                      biases=[np.zeros_like(b) for b in params.biases])
    with pytest.raises(NumericError):
        adam_step(params, grads)
    with pytest.raises(InvalidInputError):
        adam_step(params, grads, t=0)


def _linear_problem(spec, n=64, seed=0):
    """Frames whose overall brightness determines the label"""
    rng = make_rng(seed)
    level = rng.uniform(-0.4, 0.4, size=n)
    noise = rng.normal(0.0, 0.05, size=(n,) + spec.input_shape)
    x = (level[:, None, None, None] + noise).astype(np.float32)
    return x, (2.0 * level).astype(np.float32)


def test_training_reduces_loss(small_spec):
    x, y = _linear_problem(small_spec)
    stream = ArrayStream(x, y, batch_size=16, steps=8, seed=1, validation=(x[:16], y[:16]))
    epochs = []
    params, history = train(small_spec, stream, TrainConfig(learning_rate=3e-3, epochs=4, batch_size=16),
                            on_epoch=lambda e, tl, vl: epochs.append(e))
    assert epochs == [1, 2, 3, 4]
    assert history.steps_per_epoch == 8
    assert history.train_loss[-1] < history.train_loss[0]
    assert all(v is not None for v in history.val_loss)
    assert [r['epoch'] for r in history.to_rows()] == [1, 2, 3, 4]
    assert params.t == 32


def test_training_is_reproducible(small_spec):
    x, y = _linear_problem(small_spec)
    cfg = TrainConfig(epochs=1, batch_size=8, seed=3)
    a, _ = train(small_spec, ArrayStream(x, y, 8, 4, seed=2), cfg)
    b, _ = train(small_spec, ArrayStream(x, y, 8, 4, seed=2), cfg)
    assert weights_checksum(a) == weights_checksum(b)


def test_zero_learning_rate_keeps_weights(small_spec):
    x, y = _linear_problem(small_spec)
    start = init_params(small_spec, make_rng(0))
    params, _ = train(small_spec, ArrayStream(x, y, 8, 2), TrainConfig(learning_rate=0.0, epochs=1),
                      params=start)
    assert weights_checksum(params) == weights_checksum(start)


def test_training_diverges_with_numeric_error(small_spec):
    x, y = _linear_problem(small_spec)
    x = x * np.float32(1e30)
    with pytest.raises(NumericError) as e:
        train(small_spec, ArrayStream(x, y, 8, 2), TrainConfig(learning_rate=1e-3, epochs=1))
    assert e.value.epoch == 1


def test_activation_maps_shapes(frame):
    spec = NetSpec()
    maps = activation_maps(spec, init_params(spec, make_rng(0)), frame)
    assert [m.shape for m in maps] == [(8, 11, 11), (16, 4, 4), (24, 1, 1)]
    assert all(m.dtype == np.uint8 for m in maps)
    assert all(m.max() in (0, 255) for m in maps[:2])


def test_predict_is_clamped(tiny_spec, frame):
    params = zero_params(tiny_spec)
    params.biases[-1][:] = 5.0
    assert predict(tiny_spec, params, frame) == 1.0
    params.biases[-1][:] = -5.0
    assert predict(tiny_spec, params, frame) == -1.0


def test_latency_stats():
    stats = LatencyStats([1.0, 1.02, 1.04, 2.0, 5.0])
    assert stats.mode == 1.0
    assert stats.p50 == pytest.approx(1.04)
    summary = stats.summary()
    assert summary['count'] == 5
    assert summary['mean_ms'] == pytest.approx(2.012)


def test_measure_latency(tiny_spec, frame):
    stats = measure_latency(tiny_spec, init_params(tiny_spec, make_rng(0)), [frame, frame], repeats=2)
    assert len(stats.samples_ms) == 4
    assert all(s >= 0 for s in stats.samples_ms)
    with pytest.raises(InvalidInputError):
        measure_latency(tiny_spec, init_params(tiny_spec, make_rng(0)), [])


def test_model_file_round_trip(tmp_path, small_spec, frame):
    params = init_params(small_spec, make_rng(9))
    path = save_model(tmp_path / 'model.bcw', small_spec, params)
    spec, loaded = load_model(path)
    assert spec == small_spec
    assert weights_checksum(loaded) == weights_checksum(params)
    assert predict(spec, loaded, frame) == predict(small_spec, params, frame)


def test_model_file_keeps_adam_moments(tmp_path, tiny_spec):
    params = init_params(tiny_spec, make_rng(0))
    grads = Gradients(weights=[np.full_like(w, 0.1) for w in params.weights],
                      biases=[np.full_like(b, 0.1) for b in params.biases])
    stepped = adam_step(params, grads)
    _, loaded = load_model(save_model(tmp_path / 'm.bcw', tiny_spec, stepped, include_moments=True))
    assert loaded.t == 1
    assert loaded.m is not None
    assert np.allclose(loaded.m[0], stepped.m[0])


def test_model_file_rejects_damage(tmp_path, tiny_spec):
    path = save_model(tmp_path / 'model.bcw', tiny_spec, init_params(tiny_spec, make_rng(0)))
    data = path.read_bytes()

    truncated = tmp_path / 'truncated.bcw'
    truncated.write_bytes(data[:-40])
    with pytest.raises(ModelFormatError):
        load_model(truncated)

    flipped = bytearray(data)
    flipped[len(flipped) // 2] ^= 0xFF
    corrupt = tmp_path / 'corrupt.bcw'
    corrupt.write_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError):
        load_model(corrupt)

    wrong_magic = tmp_path / 'magic.bcw'
    wrong_magic.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(ModelFormatError):
        load_model(wrong_magic)

    with pytest.raises(ModelFormatError):
        load_model(tmp_path / 'missing.bcw')
