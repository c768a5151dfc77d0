import numpy as np
import pytest

from ssmlab import zoo
from ssmlab.core import simulate


@pytest.fixture
def toy():
    """Toy NDLM with alpha, beta and z0 fixed; sigma_p and sigma_o free."""
    return zoo.make_ndlm(alpha=1.0, beta=1.0, sigma_p=0.1, sigma_o=0.1, fixed=("alpha", "beta", "z0"))


@pytest.fixture
def toy_data(toy):
    _, data = simulate(toy, None, np.arange(1, 101, dtype=float), seed=11)
    return data


@pytest.fixture
def toy50(toy):
    _, data = simulate(toy, None, np.arange(1, 51, dtype=float), seed=5)
    return data
