import numpy as np
import pytest

from sfbdlab.analytic import GaussianSpec, GaussianDenoiser
from sfbdlab.net import DenoiserNet, NetConfig
from sfbdlab.schedule_sde import NoiseSchedule


@pytest.fixture
def schedule():
    return NoiseSchedule(sigma_max=10.0, T=10.0)


@pytest.fixture
def std_gaussian():
    return GaussianSpec.iso(0.0, 1.0)


@pytest.fixture
def gaussian_oracle(schedule, std_gaussian):
    return GaussianDenoiser(std_gaussian, schedule)


@pytest.fixture
def small_random_net(schedule):
    """A 1-d net with perturbed weights (the zero final layer undone), for
    gradient and equivalence tests on nontrivial functions."""
    net = DenoiserNet.create(NetConfig(input_dim=1, hidden_widths=(16, 16)), schedule, seed=3)
    rng = np.random.default_rng(17)
    return net.with_params(net.params + 0.05 * rng.standard_normal(net.params.size))
