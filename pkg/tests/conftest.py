import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gtta.config import ModelConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small geometry so finite differences over every parameter stay cheap."""
    return ModelConfig(image_size=8, patch=4, feat_dim=4, node_dim=3, out_dim=3)
