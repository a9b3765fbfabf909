import numpy as np
import pytest

from data_generation import simulate
from estimation.ekf import ObservationSetup
from estimation.model import EiBrainModel, NetworkModel, Nonlinearity


def random_network(rng, n, trainable=("B.free",), nonlinearity=Nonlinearity.TANH, density=0.6):
    mask = rng.random((n, n)) < density
    mask.flat[:2] = True
    return NetworkModel(
        a_matrix=0.5 * np.eye(n) + 0.1 * rng.standard_normal((n, n)),
        b_matrix=rng.normal(0.0, 0.5, size=(n, n)) * mask,
        offset=rng.normal(0.0, 0.3, size=n),
        gain=rng.uniform(0.5, 1.5, size=n),
        nonlinearity=nonlinearity,
        free_mask=mask,
        bias=rng.normal(0.0, 0.2, size=n),
        trainable=trainable,
    )


def random_ei(rng, n_regions, trainable=("Wp", "Wr", "Jp", "Jr", "c")):
    return EiBrainModel(
        w_p=rng.normal(0.0, 0.4, size=(n_regions, n_regions)),
        w_r=rng.normal(0.0, 0.4, size=(n_regions, n_regions)),
        j_p=rng.uniform(0.2, 0.8, size=n_regions),
        j_r=rng.uniform(0.2, 0.8, size=n_regions),
        tau_p=rng.uniform(1.5, 3.0, size=n_regions),
        tau_r=rng.uniform(1.5, 3.0, size=n_regions),
        gain=rng.uniform(0.5, 1.5, size=2 * n_regions),
        offset=rng.normal(0.0, 0.3, size=2 * n_regions),
        trainable=trainable,
    )


def random_obs(rng, n, p=None, q_var=0.01, r_var=0.04):
    p = max(1, n // 2) if p is None else p
    return ObservationSetup(
        h=rng.standard_normal((p, n)),
        q=q_var * np.eye(n),
        r=r_var * np.eye(p),
    )


def segment(rng, model, obs, k):
    x0 = rng.normal(0.0, 0.1, size=model.n_states)
    return simulate(model, obs, k, x0, rng).measurements


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def make_network():
    return random_network


@pytest.fixture
def make_ei():
    return random_ei


@pytest.fixture
def make_obs():
    return random_obs


@pytest.fixture
def make_segment():
    return segment
