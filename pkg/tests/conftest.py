import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from phgcn.cohort import CohortSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def small_spec():
    """Cheap raw shapes; phantoms may touch the border, which is fine for unit checks."""
    return CohortSpec(n_per_class=(2, 2, 2), seed=3, sax_raw_shape=(72, 72, 4), ch4_raw_shape=(80, 80))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
