import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bump(grid, width=0.2, center=None):
    x = grid.coords()
    c = center if center is not None else [0.0] * grid.dim
    return np.exp(-sum((xj - cj) ** 2 for xj, cj in zip(x, c)) / (2 * width ** 2))
