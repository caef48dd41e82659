import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from models.linear_gaussian import LinearGaussianSpec, lg_simulate, linear_gaussian_model  # noqa: E402
from pomp_core import ParamTransform, PompModel, TimeSeriesData  # noqa: E402

LOG_2PI = np.log(2.0 * np.pi)


def make_scalar_model(x0: float = 1.0, process_sd: float = 0.0, obs_sd: float = 1.0,
                      bad_time: float = None, bad_value: float = -np.inf) -> PompModel:
    """
    X_n = alpha X_{n-1} + process_sd eps_n from X_0 = x0, Y_n ~ N(X_n, obs_sd^2).
    The measurement density returns `bad_value` at time `bad_time`.
    """
    def init_sim(theta, rng):
        return np.full((theta.shape[0], 1), x0)

    def trans_sim(x, theta, t0, t1, rng, covariates=None):
        return theta[:, :1] * x + process_sd * rng.standard_normal(x.shape)

    def meas_logpdf(y, x, theta, t):
        if bad_time is not None and t == bad_time:
            return np.full(x.shape[0], bad_value)
        z = (y[0] - x[:, 0]) / obs_sd
        return -0.5 * z * z - 0.5 * LOG_2PI - np.log(obs_sd)

    return PompModel("scalar_ar", ("alpha",), 1, 1, init_sim, trans_sim, meas_logpdf,
                     ParamTransform.identity(("alpha",)))


@pytest.fixture
def scalar_model():
    return make_scalar_model


@pytest.fixture
def scalar_data():
    def build(y, t0=0.0):
        y = np.asarray(y, dtype=float)
        return TimeSeriesData(np.arange(1.0, len(y) + 1.0), y.reshape(-1, 1), None, t0)
    return build


@pytest.fixture(scope="session")
def toy_spec():
    return LinearGaussianSpec.toy()


@pytest.fixture(scope="session")
def toy_data(toy_spec):
    return lg_simulate(toy_spec, 100, 42)


@pytest.fixture(scope="session")
def toy_model(toy_spec):
    return linear_gaussian_model(toy_spec)
