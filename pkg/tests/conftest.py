"""Shared model fixtures for the test suite."""

import pytest

from transdens.coeffs import make_coefficient
from transdens.innovations import make_family
from transdens.model import ModelSpec


def build_spec(drift=("constant", {"c": 0.0}),
               cov=("constant", {"c": 1.0}),
               family=("gaussian", {}),
               horizon=1.0, steps=8, ellipticity=(0.3, 2.0)):
    m = make_coefficient(drift[0], **drift[1])
    sig = make_coefficient(cov[0], **cov[1])
    fam = make_family(family[0], sig, **family[1])
    return ModelSpec(m, sig, fam, horizon=horizon, steps=steps,
                     ellipticity=ellipticity)


@pytest.fixture
def gauss_spec():
    """Standard-normal increments, zero drift: everything is closed form."""
    return build_spec()


@pytest.fixture
def exp_spec():
    """x-independent skewed chain (centered exponential innovations)."""
    return build_spec(drift=("constant", {"c": 0.15}),
                      cov=("constant", {"c": 0.6}),
                      family=("centered_exponential", {}),
                      steps=16, ellipticity=(0.3, 1.2))


@pytest.fixture
def mix_spec():
    """State-dependent coefficients and state-modulated skewness."""
    return build_spec(drift=("sine_x", {"base": 0.1, "amp": 0.2, "freq": 1.0}),
                      cov=("tanh_x", {"base": 0.5, "amp": 0.15, "scale": 1.0}),
                      family=("state_modulated_mixture", {}),
                      steps=8, ellipticity=(0.3, 0.7))
