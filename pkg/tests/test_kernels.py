import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transdens.kernels import (FrozenGaussianKernel, apply_operator,
                               frozen_density, frozen_density_deriv, kernel_H,
                               operator_square_diff)

from conftest import build_spec

STD_NORMAL_AT_0 = 1.0 / math.sqrt(2.0 * math.pi)  # 0.3989422804...


def fd_deriv(f, x, order, h=1e-2):
    """Central finite difference of scalar f, up to fourth order."""
    if order == 0:
        return f(x)
    if order == 1:
        return (f(x + h) - f(x - h)) / (2 * h)
    if order == 2:
        return (f(x + h) - 2 * f(x) + f(x - h)) / h ** 2
    if order == 3:
        return (f(x + 2 * h) - 2 * f(x + h) + 2 * f(x - h)
                - f(x - 2 * h)) / (2 * h ** 3)
    if order == 4:
        return (f(x + 2 * h) - 4 * f(x + h) + 6 * f(x) - 4 * f(x - h)
                + f(x - 2 * h)) / h ** 4
    raise ValueError(order)


def test_frozen_density_standard_normal(gauss_spec):
    assert frozen_density(gauss_spec, 0.0, 1.0, 0.0, 0.0) == pytest.approx(
        STD_NORMAL_AT_0, abs=1e-7)
    val = frozen_density(gauss_spec, 0.0, 0.25, 0.0, 0.5)
    assert val == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi * 0.25),
                                abs=1e-7)


def test_frozen_density_normalizes(mix_spec):
    y = 0.4
    x = np.linspace(-6, 6, 4001)
    vals = np.array([frozen_density(mix_spec, 0.0, 1.0, xi, y) for xi in x])
    # as a density in y for fixed x it integrates to 1; by the symmetric
    # Gaussian form the x-integral at fixed y equals 1 too
    assert np.trapezoid(vals, x) == pytest.approx(1.0, abs=1e-6)


def test_frozen_density_deriv_second_at_center(gauss_spec):
    # phi''(0) = -phi(0) for unit variance
    d2 = frozen_density_deriv(gauss_spec, 2, 0.0, 1.0, 0.0, 0.0)
    assert d2 == pytest.approx(-STD_NORMAL_AT_0, abs=1e-7)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_frozen_density_deriv_vs_fd(mix_spec, order):
    s, t, y = 0.1, 0.9, 0.3

    def f(x):
        return frozen_density(mix_spec, s, t, x, y)

    for x0 in (-0.5, 0.2, 0.8):
        ana = frozen_density_deriv(mix_spec, order, s, t, x0, y)
        num = fd_deriv(f, x0, order, h=2e-2 if order >= 3 else 1e-3)
        assert ana == pytest.approx(num, rel=2e-3, abs=1e-6)


def test_frozen_density_deriv_order6_available(mix_spec):
    v = frozen_density_deriv(mix_spec, 6, 0.0, 1.0, 0.2, -0.1)
    assert np.isfinite(v)


def test_deriv_order_zero_is_eval(mix_spec):
    k = FrozenGaussianKernel(mix_spec)
    assert k.deriv(0, 0.1, 0.8, 0.3, -0.2) == pytest.approx(
        k.eval(0.1, 0.8, 0.3, -0.2), rel=1e-14)


def test_apply_L_constant_coefficients(gauss_spec):
    # L = 1/2 d^2/dx^2 for sigma=1, m=0; at x=y=0, s=0, t=1
    Lp = apply_operator("L", gauss_spec, FrozenGaussianKernel(gauss_spec))
    assert Lp.eval(0.0, 1.0, 0.0, 0.0) == pytest.approx(
        -0.5 * STD_NORMAL_AT_0, abs=1e-7)


def test_L_equals_L_tilde_when_x_independent(exp_spec):
    pt = FrozenGaussianKernel(exp_spec)
    L = apply_operator("L", exp_spec, pt)
    Lt = apply_operator("L_tilde", exp_spec, pt)
    for (x, y) in ((-0.3, 0.4), (0.0, 0.0), (0.7, -0.6)):
        assert L.eval(0.0, 1.0, x, y) == pytest.approx(
            Lt.eval(0.0, 1.0, x, y), rel=1e-12, abs=1e-12)


def test_kernel_H_is_L_minus_L_tilde(mix_spec):
    pt = FrozenGaussianKernel(mix_spec)
    H = kernel_H(mix_spec)
    L = apply_operator("L", mix_spec, pt)
    Lt = apply_operator("L_tilde", mix_spec, pt)
    for (s, t, x, y) in ((0.0, 1.0, 0.3, -0.2), (0.2, 0.7, -0.5, 0.6)):
        assert H.eval(s, t, x, y) == pytest.approx(
            L.eval(s, t, x, y) - Lt.eval(s, t, x, y), rel=1e-9, abs=1e-12)


def test_kernel_H_vanishes_on_diagonal(mix_spec):
    H = kernel_H(mix_spec)
    for y in (-0.8, 0.0, 0.9):
        assert abs(H.eval(0.1, 0.9, y, y)) < 1e-13


def test_kernel_H_zero_for_x_independent(exp_spec):
    H = kernel_H(exp_spec)
    for (x, y) in ((-0.3, 0.4), (0.5, -0.1)):
        assert abs(H.eval(0.0, 1.0, x, y)) < 1e-13


def test_operator_square_diff_zero_for_x_independent(exp_spec):
    pt = FrozenGaussianKernel(exp_spec)
    K = operator_square_diff(exp_spec, pt)
    for (x, y) in ((-0.4, 0.2), (0.3, 0.8)):
        assert abs(K.eval(0.0, 1.0, x, y)) < 1e-12


def test_operator_square_diff_nonzero_for_state_dependent(mix_spec):
    pt = FrozenGaussianKernel(mix_spec)
    K = operator_square_diff(mix_spec, pt)
    vals = [abs(K.eval(0.0, 1.0, x, 0.2)) for x in (-0.6, 0.4, 1.0)]
    assert max(vals) > 1e-4


@settings(max_examples=20, deadline=None)
@given(x=st.floats(-1.5, 1.5), y=st.floats(-1.5, 1.5),
       s=st.floats(0.0, 0.5), gap=st.floats(0.2, 0.5))
def test_frozen_density_positive(x, y, s, gap):
    spec = build_spec(cov=("tanh_x", {"base": 0.5, "amp": 0.15}))
    assert frozen_density(spec, s, s + gap, x, y) > 0.0
