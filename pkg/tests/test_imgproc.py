import math

import numpy as np
import pytest

from pipeline.dataset import DrivingSample
from pipeline.errors import DataError, InvalidInputError
from pipeline.imgproc import (
    AugmentationProbabilities,
    PerspectiveShiftConfig,
    adjust_brightness,
    apply_shadows,
    augment_sample,
    augmentation_preview,
    flip_horizontal,
    load_image,
    make_rng,
    max_axis_aligned_crop,
    normalize_center,
    pan,
    perspective_correction,
    preprocess,
    resize,
    save_image,
    shift_steering,
    tilt,
)


def bearing_from_side_camera(theta, gamma, side):
    """Bearing of the aim point (range 1, along heading theta) seen from a camera gamma to the side"""
    lateral = math.tan(theta) + (gamma if side == 'left' else -gamma)
    return math.atan(lateral)


def best_crop(w, h, phi, samples=20001):
    """Brute-force largest centered axis-aligned rectangle inside the rotated (w, h) image"""
    half_w, half_h = w / 2.0, h / 2.0
    c, s = math.cos(abs(phi)), math.sin(abs(phi))
    a = np.linspace(0.0, half_w, samples)
    b = np.minimum((half_w - a * c) / s, (half_h - a * s) / c)
    area = np.where(b > 0, a * b, 0.0)
    k = int(np.argmax(area))
    return 2 * a[k], 2 * b[k]


def test_perspective_zero_heading_left():
    assert perspective_correction(0.0, 0.095, 'left') == pytest.approx(math.atan(0.095), abs=1e-9)
    assert math.atan(0.095) == pytest.approx(0.094716, abs=2e-6)


def test_perspective_zero_gamma_keeps_theta():
    for side in ('left', 'right'):
        assert perspective_correction(0.2, 0.0, side) == pytest.approx(0.2)


def test_perspective_published_pair():
    theta = 0.1
    delta = perspective_correction(theta, 0.095, 'left') - theta
    phi = theta - perspective_correction(theta, 0.095, 'right')
    assert delta == pytest.approx(0.092904, abs=1e-5)
    assert phi == pytest.approx(0.094666, abs=1e-5)


@pytest.mark.parametrize('gamma', [0.0, 0.05, 0.095, 0.2])
@pytest.mark.parametrize('side', ['left', 'right'])
def test_perspective_matches_ray_geometry(side, gamma):
    for theta in np.linspace(-0.45, 0.45, 19):
        expected = bearing_from_side_camera(theta, gamma, side)
        assert perspective_correction(float(theta), gamma, side) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize('gamma', [0.05, 0.095, 0.2])
def test_left_and_right_corrections_mirror(gamma):
    for theta in np.linspace(-1.2, 1.2, 241):
        delta = perspective_correction(float(theta), gamma, 'left') - theta
        phi = -theta - perspective_correction(float(-theta), gamma, 'right')
        assert delta == pytest.approx(phi, abs=1e-12)
        assert delta > 0.0


def test_perspective_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        perspective_correction(float('nan'), 0.095, 'left')
    with pytest.raises(InvalidInputError):
        perspective_correction(0.0, 0.095, 'center')
    with pytest.raises(InvalidInputError):
        perspective_correction(math.pi / 2, 0.095, 'left')


def test_shift_steering_is_clamped():
    cfg = PerspectiveShiftConfig()
    assert shift_steering(1.0, 'left', cfg) == 1.0
    assert shift_steering(-1.0, 'right', cfg) == -1.0
    assert shift_steering(0.0, 'left', cfg) > 0.0 > shift_steering(0.0, 'right', cfg)


def test_shadows_on_white_and_black(white):
    out = apply_shadows(white, make_rng(0))
    values = set(np.unique(out).tolist())
    assert values <= {166, 255}
    assert 166 in values
    assert np.all(out[:80] == 255)

    black = np.zeros_like(white)
    assert np.array_equal(apply_shadows(black, make_rng(0)), black)


def test_shadows_deterministic(frame):
    a = apply_shadows(frame, make_rng(7))
    b = apply_shadows(frame, make_rng(7))
    assert np.array_equal(a, b)
    assert np.array_equal(frame[:80], a[:80])


def test_brightness_clamps():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = 200
    img[0, 1] = 0
    img[1, 0] = 100
    up = adjust_brightness(img, 100)
    down = adjust_brightness(img, -100)
    assert up[0, 0, 0] == 255
    assert down[0, 1, 0] == 0
    assert adjust_brightness(img, -30)[1, 0, 0] == 70


def test_flip_negates_and_is_involution(frame):
    flipped, steering = flip_horizontal(frame, 0.3)
    assert steering == -0.3
    assert np.array_equal(flipped[:, 0], frame[:, -1])
    back, again = flip_horizontal(flipped, steering)
    assert np.array_equal(back, frame)
    assert again == 0.3
    assert flip_horizontal(frame, 0.0)[1] == 0.0


def test_flip_rejects_side_frames(frame):
    with pytest.raises(InvalidInputError):
        flip_horizontal(frame, 0.1, 'left')


def test_pan_identity(frame):
    assert np.array_equal(pan(frame, 0.0, 0.0), frame)


def test_pan_shifts_by_relative_magnitude():
    cols = np.round(np.arange(320) * 0.75).astype(np.uint8)
    img = np.repeat(np.repeat(cols[None, :, None], 160, axis=0), 3, axis=2)
    out = pan(img, 0.05, 0.0)
    assert out.shape == img.shape
    # 16 px shift: the cropped content starts at original column 0 and ends at column 303
    assert abs(float(out[80, 0, 0]) - float(img[80, 0, 0])) <= 1.5
    assert abs(float(out[80, 319, 0]) - float(img[80, 303, 0])) <= 1.5


def test_crop_no_rotation():
    assert max_axis_aligned_crop(320, 160, 0.0) == (320.0, 160.0)


def test_crop_one_degree_published_values():
    w_roi, h_roi = max_axis_aligned_crop(320, 160, math.radians(1.0))
    assert w_roi == pytest.approx(317.35, abs=0.01)
    assert h_roi == pytest.approx(154.49, abs=0.01)


@pytest.mark.parametrize('w, h, deg', [(320, 160, 1.0), (320, 160, -0.7), (200, 66, 5.0), (320, 40, 30.0), (64, 128, 12.0)])
def test_crop_matches_brute_force(w, h, deg):
    phi = math.radians(deg)
    expected_w, expected_h = best_crop(w, h, phi)
    w_roi, h_roi = max_axis_aligned_crop(w, h, phi)
    assert w_roi * h_roi == pytest.approx(expected_w * expected_h, rel=1e-3)
    assert abs(w_roi - expected_w) <= 1.0
    assert abs(h_roi - expected_h) <= 1.0


@pytest.mark.parametrize('seed', range(4))
def test_crop_matches_brute_force_small_angles(seed):
    rng = make_rng(seed)
    for _ in range(500):
        w, h = (int(v) for v in rng.integers(16, 401, size=2))
        phi = math.radians(float(rng.uniform(-1.0, 1.0)))
        expected_w, expected_h = best_crop(w, h, phi)
        w_roi, h_roi = max_axis_aligned_crop(w, h, phi)
        assert w_roi * h_roi == pytest.approx(expected_w * expected_h, rel=1e-3)
        assert w_roi <= w + 1e-9 and h_roi <= h + 1e-9


def test_tilt_keeps_size_and_drops_border(white, frame):
    assert np.array_equal(tilt(frame, 0.0), frame)
    out = tilt(white, 1.0)
    assert out.shape == white.shape
    assert out[5:-5, 5:-5].min() == 255


def test_tilt_turns_positive_angles_counterclockwise():
    img = np.zeros((160, 320, 3), dtype=np.uint8)
    img[78:83, 198:203] = 255  # spot 40 px right of center
    for phi, sign in [(10.0, -1), (-10.0, 1)]:
        ys, xs = np.nonzero(tilt(img, phi)[..., 0] > 128)
        assert xs.mean() > 200
        assert sign * (ys.mean() - 80) > 3


def test_resize_and_normalize(frame):
    small = resize(frame, 64, 64)
    assert small.shape == (64, 64, 3)
    assert np.array_equal(resize(frame, 320, 160), frame)
    constant = np.full((160, 320, 3), 77, dtype=np.uint8)
    assert np.all(resize(constant, 64, 64) == 77)

    values = np.array([[[255, 0, 128]]], dtype=np.uint8)
    norm = normalize_center(values)
    assert norm.dtype == np.float32
    assert norm[0, 0, 0] == pytest.approx(0.5)
    assert norm[0, 0, 1] == pytest.approx(-0.5)
    assert norm[0, 0, 2] == pytest.approx(0.0019608, abs=1e-6)
    assert preprocess(frame).shape == (64, 64, 3)


def _sample(steering=0.2, sides=True):
    return DrivingSample(0.0, 'c.png', 'l.png' if sides else None, 'r.png' if sides else None, steering)


def _loader(frames, loaded=None):
    def load(ref):
        if loaded is not None:
            loaded.append(ref)
        return frames[ref]
    return load


def test_augment_noop_returns_center(frame):
    frames = {'c.png': frame, 'l.png': frame[::-1].copy(), 'r.png': frame[:, ::-1].copy()}
    img, steering = augment_sample(_sample(), AugmentationProbabilities(), PerspectiveShiftConfig(),
                                   make_rng(0), _loader(frames))
    assert np.array_equal(img, frame)
    assert steering == 0.2


def test_augment_side_selection_frequencies(frame):
    frames = {'c.png': frame, 'l.png': frame, 'r.png': frame}
    loaded = []
    probs = AugmentationProbabilities(perspective=0.5)
    rng = make_rng(11)
    n = 4000
    for _ in range(n):
        augment_sample(_sample(), probs, PerspectiveShiftConfig(), rng, _loader(frames, loaded))
    counts = {ref: loaded.count(ref) / n for ref in frames}
    assert counts['l.png'] == pytest.approx(0.25, abs=0.03)
    assert counts['r.png'] == pytest.approx(0.25, abs=0.03)
    assert counts['c.png'] == pytest.approx(0.5, abs=0.03)


def test_augment_never_flips_a_shifted_frame(frame):
    frames = {'c.png': frame, 'l.png': frame, 'r.png': frame}
    cfg = PerspectiveShiftConfig()
    probs = AugmentationProbabilities(perspective=1.0, flip=1.0)
    for seed in range(20):
        _, steering = augment_sample(_sample(0.2), probs, cfg, make_rng(seed), _loader(frames))
        assert steering in (shift_steering(0.2, 'left', cfg), shift_steering(0.2, 'right', cfg))


def test_augment_perspective_needs_side_frames(frame):
    probs = AugmentationProbabilities(perspective=1.0)
    with pytest.raises(DataError):
        augment_sample(_sample(sides=False), probs, PerspectiveShiftConfig(), make_rng(0),
                       _loader({'c.png': frame}))


def test_augment_deterministic(frame):
    frames = {'c.png': frame, 'l.png': frame[::-1].copy(), 'r.png': frame[:, ::-1].copy()}
    probs = AugmentationProbabilities.preset('simplistic')
    a = augment_sample(_sample(), probs, PerspectiveShiftConfig(), make_rng([3, 1, 4]), _loader(frames))
    b = augment_sample(_sample(), probs, PerspectiveShiftConfig(), make_rng([3, 1, 4]), _loader(frames))
    assert np.array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_probabilities_validated():
    with pytest.raises(InvalidInputError):
        AugmentationProbabilities(flip=1.5)
    assert AugmentationProbabilities.preset('rigorous').flip == 0.0
    assert AugmentationProbabilities.preset('collision').perspective == 0.0


def test_augmentation_preview_names(frame):
    previews = augmentation_preview(frame, 0.2, make_rng(0), left=frame, right=frame)
    names = [name for name, _, _ in previews]
    assert names[0] == 'original'
    assert names[1:3] == ['perspective_left', 'perspective_right']
    assert names[-2:] == ['resized', 'normalized']
    assert any(name.startswith('brightness_') for name in names)
    flip = dict((name, steering) for name, _, steering in previews)['flip']
    assert flip == -0.2


def test_png_round_trip(tmp_path, frame):
    path = tmp_path / 'frames' / 'x.png'
    save_image(frame, path)
    assert np.array_equal(load_image(path), frame)
