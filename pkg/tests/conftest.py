import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_blobs(n_per_task, m=1, d=2, gap=6.0, seed=0):
    """m tasks of two well separated blobs, balanced."""
    r = np.random.default_rng(seed)
    Xs, ys = [], []
    for _ in range(m):
        y = np.repeat([0, 1], n_per_task // 2)
        X = r.normal(scale=0.3, size=(n_per_task, d)) + gap * y[:, None]
        Xs.append(X)
        ys.append(y)
    return Xs, ys
