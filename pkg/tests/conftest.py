import numpy as np
import pytest

from xai_kit.model import ModelConfig, build_model

TINY = ModelConfig(16, 16, 3, (2, 3), 3, 4, 0.25, 2)


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0, dtype=np.float64)


@pytest.fixture
def tiny_image():
    return np.random.default_rng(42).uniform(size=(3, 16, 16))
