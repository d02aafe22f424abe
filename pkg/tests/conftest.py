import numpy as np
import pytest

from behavtensor.cp import CPModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, dims, rank, nonneg=True):
    draw = rng.random if nonneg else rng.standard_normal
    return CPModel(rng.random(rank) + 0.5, [draw((d, rank)) for d in dims])
