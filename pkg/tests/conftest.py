import numpy as np
import pytest

from disco.data import synthetic_dataset
from disco.latency import PRESETS, SystemConfig
from disco.model import LayerSpec, ModelSpec, resnet50_shapes, toy_cnn_shapes
from disco.weights import init_weights


@pytest.fixture(scope="session")
def toy_model():
    return toy_cnn_shapes()


@pytest.fixture(scope="session")
def toy_weights(toy_model):
    return init_weights(toy_model, seed=7)


@pytest.fixture(scope="session")
def resnet():
    return resnet50_shapes()


@pytest.fixture(scope="session")
def dong2022():
    return PRESETS["dong2022"]


@pytest.fixture(scope="session")
def tiny_model():
    """Small enough for finite differences and exhaustive checks."""
    layers = (
        LayerSpec(0, "conv2d", 1, 4, 3, 3, 12, 12, 1, 1),
        LayerSpec(1, "conv2d", 4, 4, 3, 3, 12, 12, 1, 1, sparsifiable=True),
        LayerSpec(2, "elementwise_add", 4, 4, 1, 1, 12, 12, 1, 0, residual_from=0),
        LayerSpec(3, "pool", 4, 4, 2, 2, 12, 12, 2, 0),
        LayerSpec(4, "dense", 144, 6, sparsifiable=True),
    )
    return ModelSpec("tiny", layers, (1, 12, 12), 6)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_dataset(train_per_class=8, test_per_class=4, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_system(bandwidth=1e8, compute=1e11, nodes=2, mode="pipeline"):
    return SystemConfig("test", bandwidth, compute, nodes=nodes, mode=mode)
