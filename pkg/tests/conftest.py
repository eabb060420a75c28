import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from homoscale.torus_field import AnalyticCoefficient, GridSpec, build_field

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=10, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def one_d(const, amps, kind="sin"):
    """const + sum_i amps[i] * kind(2 pi y_i) as a scalar 1-D coefficient."""
    n = len(amps)
    terms = []
    for i, a in enumerate(amps):
        freq = tuple((1,) if j == i else (0,) for j in range(n))
        terms.append((freq, a, kind))
    return AnalyticCoefficient.isotropic(1, n, const, terms)


@pytest.fixture(scope="session")
def two_scale_coef():
    return one_d(3.0, (1.0, 1.0))


@pytest.fixture(scope="session")
def two_scale_field(two_scale_coef):
    return build_field(two_scale_coef, GridSpec.uniform(1, 2, 64))


@pytest.fixture(scope="session")
def sqrt8():
    return float(np.sqrt(8.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
