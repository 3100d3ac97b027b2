import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
warnings.filterwarnings("ignore", category=UserWarning, module="numba")

settings.register_profile(
    "stochlag",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("stochlag")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel(a, b) -> float:
    """Relative L2 distance between arrays."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
