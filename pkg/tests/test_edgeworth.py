import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from transdens.edgeworth import (apply_F1, apply_F2, expansion_terms,
                                 expansion_weight, pi_1, pi_2, pi_2_terms,
                                 pi_tilde_1, pi_tilde_2)
from transdens.kernels import FrozenGaussianKernel, frozen_density
from transdens.model import averaged_cumulant
from transdens.quadrature import QuadratureSpec

from conftest import build_spec


# -- classical Edgeworth terms -------------------------------------------------

def test_pi_tilde_vanishes_for_gaussian(gauss_spec):
    for (x, y) in ((0.0, 0.3), (-0.5, 0.8)):
        assert pi_tilde_1(gauss_spec, 0.0, 1.0, x, y) == 0.0
        assert pi_tilde_2(gauss_spec, 0.0, 1.0, x, y) == 0.0


def test_pi_tilde_1_zero_at_forward_center(exp_spec):
    # D^3 of a Gaussian vanishes at its center (odd Hermite factor)
    x = 0.0
    y = x + 0.15  # drift 0.15 over unit time
    assert abs(pi_tilde_1(exp_spec, 0.0, 1.0, x, y)) < 1e-12


def test_pi_tilde_1_vs_fd_oracle(exp_spec):
    s, t = 0.0, 1.0
    for (x, y) in ((0.0, 0.4), (0.3, -0.2)):
        chi3 = averaged_cumulant(exp_spec, 3, s, t, y)
        d3 = _fd_high(lambda u: frozen_density(exp_spec, s, t, u, y), x, 3)
        want = (t - s) * chi3 / 6.0 * d3
        assert pi_tilde_1(exp_spec, s, t, x, y) == pytest.approx(
            want, rel=1e-6, abs=1e-10)


def test_pi_tilde_2_order4_term(exp_spec):
    # the chi_4 part alone, via FD; the order-6 squared term is isolated by
    # subtracting a family with the same chi_4 but chi_3 = 0 is not
    # available, so check the full value against the symbolic pieces
    s, t, x, y = 0.0, 1.0, 0.1, 0.5
    chi3 = averaged_cumulant(exp_spec, 3, s, t, y)
    chi4 = averaged_cumulant(exp_spec, 4, s, t, y)
    d4 = _fd_high(lambda u: frozen_density(exp_spec, s, t, u, y), x, 4)
    sig = 0.6

    def true_d6(u):
        # sixth Hermite-weighted derivative of N(y - u; sig)
        z = (y - u) / math.sqrt(sig)
        he6 = z**6 - 15 * z**4 + 45 * z**2 - 15
        return he6 / sig**3 * norm.pdf(y - u, scale=math.sqrt(sig))

    want = ((t - s) * chi4 / 24.0 * d4
            + 0.5 * (t - s) ** 2 * (chi3 / 6.0) ** 2 * true_d6(x))
    assert pi_tilde_2(exp_spec, s, t, x, y) == pytest.approx(want, rel=1e-6)


def test_pi_tilde_requires_ordered_times(gauss_spec):
    with pytest.raises(ValueError):
        pi_tilde_1(gauss_spec, 1.0, 1.0, 0.0, 0.0)


# -- F_1 / F_2 -----------------------------------------------------------------

def test_F_operators_vanish_for_gaussian(gauss_spec):
    pt = FrozenGaussianKernel(gauss_spec)
    F1 = apply_F1(gauss_spec, pt)
    F2 = apply_F2(gauss_spec, pt)
    for (x, y) in ((0.0, 0.3), (0.6, -0.4)):
        assert abs(float(F1.eval(0.0, 1.0, x, y))) < 1e-14
        assert abs(float(F2.eval(0.0, 1.0, x, y))) < 1e-14


def test_F1_is_cumulant_times_third_derivative(mix_spec):
    pt = FrozenGaussianKernel(mix_spec)
    F1 = apply_F1(mix_spec, pt)
    s, t, y = 0.1, 0.9, 0.2
    for x in (-0.4, 0.5):
        chi3 = float(mix_spec.innovations.cumulant(3, s, x))
        d3 = _fd_high(lambda u: frozen_density(mix_spec, s, t, u, y), x, 3)
        assert float(F1.eval(s, t, x, y)) == pytest.approx(
            chi3 / 6.0 * d3, rel=1e-6, abs=1e-10)


# -- Lemma-4-style change of basis --------------------------------------------

@pytest.mark.parametrize("order", [3, 4])
def test_cumulant_change_of_basis(order, exp_spec, mix_spec):
    """chi_s(AX) D_z^s phi at z=Ax equals chi_s(X) D_x^s phi(Ax), A = sigma^(-1/2).

    Left side: scaled cumulant times the analytic Hermite form of the
    normal derivative.  Right side: unscaled cumulant times a high-order
    finite difference of the composed map x -> phi(Ax).
    """
    for spec, t0 in ((exp_spec, 0.2), (mix_spec, 0.4)):
        for x in (-0.9, -0.3, 0.0, 0.4, 1.1):
            sig = float(spec.covariance.value(t0, x))
            A = sig ** -0.5
            chi = float(spec.innovations.cumulant(order, t0, x))
            z = A * x
            if order == 3:
                he = z**3 - 3 * z
            else:
                he = z**4 - 6 * z**2 + 3
            sign = -1.0 if order % 2 else 1.0
            lhs = (A**order * chi) * sign * he * norm.pdf(z)
            rhs = chi * _fd_high(lambda u: norm.pdf(A * u), x, order)
            assert lhs == pytest.approx(rhs, abs=1e-8)


def _fd_high(f, x, order, h=0.05):
    """High-order central difference on an 11-point stencil."""
    k = np.arange(-5, 6)
    c = _fd_weights(k, order) / h**order
    vals = np.array([f(x + j * h) for j in k])
    return float(np.dot(c, vals))


def _fd_weights(k, order):
    """Solve the Taylor-moment system for FD weights on offsets k."""
    n = len(k)
    M = np.vander(k, n, increasing=True).T.astype(float)
    b = np.zeros(n)
    b[order] = math.factorial(order)
    return np.linalg.solve(M, b)


# -- Theorem-1 terms -----------------------------------------------------------

def test_pi_1_matches_pi_tilde_1_when_x_independent(exp_spec):
    T = exp_spec.horizon
    for (x, y) in ((0.0, 0.4), (0.2, -0.2)):
        assert pi_1(exp_spec, T, x, y) == pytest.approx(
            pi_tilde_1(exp_spec, 0.0, T, x, y), abs=1e-4)


def test_pi_2_terms_structure(exp_spec):
    parts = pi_2_terms(exp_spec, 1.0, 0.0, 0.4)
    assert set(parts) == {"F2", "nested", "square_diff", "time_deriv"}
    # x-independent coefficients: L = L~ and L' = L~', so both operator
    # difference terms vanish
    assert abs(parts["square_diff"]) < 1e-10
    assert abs(parts["time_deriv"]) < 1e-10
    assert pi_2(exp_spec, 1.0, 0.0, 0.4) == pytest.approx(
        sum(parts.values()), rel=1e-12)


def test_pi_terms_stable_under_rmax_doubling(exp_spec):
    q = QuadratureSpec()
    q2 = replace(q, series_rmax=2 * q.series_rmax)
    a1 = pi_1(exp_spec, 1.0, 0.0, 0.4, q)
    a2 = pi_1(exp_spec, 1.0, 0.0, 0.4, q2)
    assert a1 == pytest.approx(a2, abs=10 * q.tol_quad)
    b1 = pi_2(exp_spec, 1.0, 0.0, 0.4, q)
    b2 = pi_2(exp_spec, 1.0, 0.0, 0.4, q2)
    assert b1 == pytest.approx(b2, abs=10 * q.tol_quad)


def test_expansion_terms_identity(exp_spec):
    terms = expansion_terms(exp_spec, 0.0, 0.4)
    h = exp_spec.step
    assert terms.corrected == terms.p_value + math.sqrt(h) * terms.pi1 \
        + h * terms.pi2
    assert terms.provenance["series_r_used"] >= 0
    assert set(terms.provenance["pi2_terms"]) == {
        "F2", "nested", "square_diff", "time_deriv"}


def test_expansion_weight(gauss_spec):
    # T = 1, S' = 2: weight = 1 + |y - x|^2
    assert expansion_weight(gauss_spec, 0.0, 0.0) == pytest.approx(1.0)
    assert expansion_weight(gauss_spec, 0.0, 2.0) == pytest.approx(5.0)
