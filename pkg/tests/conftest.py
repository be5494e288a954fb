import numpy as np
import pytest

from esd.data import gen_synthetic, blob_spec
from esd.model import init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model(feature_dim=16, K=3, rng=0, hidden=6)


@pytest.fixture
def small_split():
    return gen_synthetic(blob_spec(K=3, d=16, n_per_class=20, seed=3))
