import math

import numpy as np
import pytest

from pipeline.dataset import Dataset, DrivingSample, write_manifest
from pipeline.imgproc import make_rng, save_image
from pipeline.nnet import ConvLayerSpec, NetSpec
from pipeline.simworld.scenario import Obstacle, TrackScenario, TrackVertex


def stadium_vertices(straight=60.0, radius=20.0, width=8.0, step=10.0):
    """Counter-clockwise stadium: bottom straight along +x from the origin"""
    pts = []
    for x in np.arange(0.0, straight + step / 2, step):
        pts.append((x, 0.0))
    for a in np.radians(np.arange(-60.0, 90.0, 30.0)):
        pts.append((straight + radius * math.cos(a), radius + radius * math.sin(a)))
    for x in np.arange(straight, -step / 2, -step):
        pts.append((x, 2 * radius))
    for a in np.radians(np.arange(120.0, 270.0, 30.0)):
        pts.append((radius * math.cos(a), radius + radius * math.sin(a)))
    return tuple(TrackVertex(float(x), float(y), width) for x, y in pts)


@pytest.fixture(scope='session')
def oval():
    return TrackScenario(id='oval', vertices=stadium_vertices()).validate()


@pytest.fixture(scope='session')
def long_oval():
    return TrackScenario(id='long_oval', vertices=stadium_vertices(straight=200.0, radius=30.0)).validate()


@pytest.fixture(scope='session')
def coned_oval():
    return TrackScenario(
        id='coned_oval',
        vertices=stadium_vertices(straight=200.0, radius=30.0),
        obstacles=(Obstacle(station=60.0, offset=1.0), Obstacle(station=120.0, offset=-1.0)),
    ).validate()


@pytest.fixture
def frame():
    """320x160 frame with a gray road-like lower half and texture noise"""
    rng = make_rng(123)
    img = np.empty((160, 320, 3), dtype=np.uint8)
    img[:80] = (150, 195, 235)
    img[80:] = (95, 95, 100)
    noise = rng.integers(0, 40, size=(80, 320, 3))
    img[80:] = np.clip(img[80:].astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return img


@pytest.fixture
def white():
    return np.full((160, 320, 3), 255, dtype=np.uint8)


@pytest.fixture(scope='session')
def tiny_spec():
    """8x8 input, two conv layers, two fc layers; small enough for finite differences"""
    return NetSpec(
        input_shape=(8, 8, 3),
        conv=(ConvLayerSpec(kernel=3, stride=2, filters=2), ConvLayerSpec(kernel=2, stride=1, filters=3)),
        fc_units=(4, 1),
        dropout=(0.0, 0.0),
    )


@pytest.fixture(scope='session')
def small_spec():
    """16x16 input with dropout, used for training and model-file tests"""
    return NetSpec(
        input_shape=(16, 16, 3),
        conv=(ConvLayerSpec(kernel=3, stride=2, filters=4), ConvLayerSpec(kernel=3, stride=2, filters=6)),
        fc_units=(8, 1),
        dropout=(0.25, 0.25),
    )


def make_dataset(root, steering, sides=True, size=(32, 16)):
    """Write synthetic frames plus a manifest under root; returns (Dataset, manifest path)"""
    w, h = size
    samples = []
    for i, s in enumerate(steering):
        refs = {}
        for slot in (('center', 'left', 'right') if sides else ('center',)):
            value = (i * 7 + {'center': 0, 'left': 60, 'right': 120}[slot]) % 256
            img = np.full((h, w, 3), value, dtype=np.uint8)
            ref = f"IMG/{slot}_{i:05d}.png"
            save_image(img, root / ref)
            refs[slot] = ref
        samples.append(DrivingSample(
            timestamp=round(0.5 * i, 3),
            center=refs['center'],
            left=refs.get('left'),
            right=refs.get('right'),
            steering=float(s),
            throttle=0.5,
            brake=0.0,
            speed=20.0,
        ))
    ds = Dataset(samples=tuple(samples), behavior_tag='simplistic', root=root)
    path = write_manifest(ds, root / 'driving_log.csv')
    return ds, path


@pytest.fixture
def small_dataset(tmp_path):
    steering = [0.0, 0.0, 0.0, 0.0, 0.1, -0.1, 0.3, -0.3, 0.6, -0.6, 0.9, -0.9]
    return make_dataset(tmp_path, steering)
