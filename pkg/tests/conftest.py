import numpy as np
import pytest

from moesim import ModelShape, generate_trace


@pytest.fixture(scope="session")
def small_shape():
    return ModelShape(num_layers=2, experts_per_layer=4, d_model=8, batch_size=16)


@pytest.fixture(scope="session")
def small_trace(small_shape):
    return generate_trace(small_shape, num_batches=5, skew=1.0, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
