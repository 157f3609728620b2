import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust_sim.core import PiecewiseLinearActivation
from robust_sim.synth import (MarginalSpec, NoiseModel, ScenarioSpec, TargetModel,
                              named_activation)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_activation(rng, a, b, n=6, span=3.0):
    """Random member of U_(a,b) with n knots, one of them the anchor."""
    z = np.sort(rng.uniform(-span, span, size=n - 1))
    z = np.unique(np.append(z, 0.0))
    lower = np.where(z[:-1] >= 0, a, 0.0)
    slopes = rng.uniform(lower, b)
    return PiecewiseLinearActivation(z, slopes, a, b)


def gaussian_scenario(d=10, kind="relu", c=None, a=0.5, b=1.0, wstar_norm=1.0,
                      noise=None, seed=0):
    wstar = np.zeros(d)
    wstar[0] = wstar_norm
    return ScenarioSpec(MarginalSpec("gaussian_isotropic", d),
                        TargetModel(wstar, named_activation(kind, a, b, c)),
                        noise or NoiseModel(), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
