import numpy as np
import pytest

from weightstego.builder import GraphBuilder, image_classifier, detector_mini
from weightstego.datasets import (
    SyntheticDatasetConfig,
    generate_synthetic,
    train_test_split,
)
from weightstego.training import TrainConfig, train


def minimal_archive():
    """Input -> Dense(2x2 zeros) chain, the smallest well-formed archive."""
    g = GraphBuilder(seed=0)
    x = g.input((2,), name="in")
    x = g.dense(x, 2, 2, name="fc",
                weights=np.zeros((2, 2), dtype=np.float32))
    return g.build(x)


def random_archive(rng, max_layers=3):
    """Small random conv/dense classifier for property tests."""
    size = int(rng.integers(6, 12))
    channels = int(rng.integers(1, 3))
    g = GraphBuilder(seed=int(rng.integers(0, 2**31)))
    x = g.input((size, size, channels))
    c = channels
    for _ in range(int(rng.integers(1, max_layers + 1))):
        filters = int(rng.integers(2, 6))
        stride = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        if padding == "valid" and size < 3:
            padding = "same"
        x = g.conv2d(x, c, filters, 3, stride=stride, padding=padding)
        x = g.relu(x)
        c = filters
        if padding == "same":
            size = -(-size // stride)
        else:
            size = (size - 3) // stride + 1
    x = g.global_maxpool(x)
    classes = int(rng.integers(2, 5))
    x = g.dense(x, c, classes)
    x = g.softmax(x)
    return g.build(x)


@pytest.fixture(scope="session")
def shapes_4c():
    cfg = SyntheticDatasetConfig(classes=4, image_size=28, samples_per_class=250,
                                 noise=0.08, seed=7)
    images, labels = generate_synthetic(cfg)
    return train_test_split(images, labels, 0.2, seed=7)


@pytest.fixture(scope="session")
def trained_host(shapes_4c):
    """image_classifier trained on the 4-class shape set (seed 7)."""
    (xtr, ytr), _ = shapes_4c
    return train(image_classifier(seed=7), xtr, ytr,
                 TrainConfig(0.08, 10, 32, seed=7))


@pytest.fixture(scope="session")
def trained_patch_detector():
    """Mini detector trained to spot the top-left patch on 28x28 shapes."""
    from weightstego.backdoor import TriggerConfig, synthesize_trigger_dataset, train_detector

    cfg = SyntheticDatasetConfig(classes=4, image_size=28, samples_per_class=60,
                                 noise=0.05, seed=11)
    base, _ = generate_synthetic(cfg)
    imgs, labels = synthesize_trigger_dataset(
        base, TriggerConfig(kind="patch", side_fraction=0.25, fill=1.0))
    detector, metrics = train_detector("mini", imgs, labels,
                                       TrainConfig(0.5, 20, 32, seed=11))
    assert metrics.accuracy > 0.9, metrics
    return detector
