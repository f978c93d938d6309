import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from bayes_triplet import GaussianEmbedding, Triplet

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gauss(mean, var):
    return GaussianEmbedding(np.atleast_1d(np.asarray(mean, dtype=float)), var)


def triplet_from(mus, variances):
    return Triplet(*(GaussianEmbedding(m, v, exact=True) for m, v in zip(mus, variances)))


@st.composite
def triplets(draw, min_dim=1, max_dim=12, min_var=1e-3, max_var=4.0):
    dim = draw(st.integers(min_dim, max_dim))
    coord = st.floats(-3.0, 3.0, allow_nan=False)
    mus = [np.array(draw(st.lists(coord, min_size=dim, max_size=dim))) for _ in range(3)]
    variances = [draw(st.floats(min_var, max_var)) for _ in range(3)]
    return triplet_from(mus, variances)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
