import math

import numpy as np
import pytest

from transdens.kernels import FrozenGaussianKernel, frozen_density
from transdens.oracle import ck_chain_density, ck_default_grid, ou_exact_density
from transdens.parametrix import (ChainEngine, GridKernel, discrete_convolve,
                                  dump_grid_csv, frozen_chain_density,
                                  parametrix_p, parametrix_p_h,
                                  time_space_convolve)
from transdens.quadrature import QuadratureSpec

from conftest import build_spec

STD_NORMAL_AT_0 = 1.0 / math.sqrt(2.0 * math.pi)


# -- continuous-time convolution ---------------------------------------------

def test_convolve_gaussian_semigroup(gauss_spec):
    # integrand at each u is the N(0,1) density at 0 (semigroup identity),
    # so the time integral over (0, 1) equals 0.3989423
    pt = FrozenGaussianKernel(gauss_spec)
    val = time_space_convolve(pt, pt, 0.0, 1.0, 0.0, 0.0)
    assert val == pytest.approx(STD_NORMAL_AT_0, abs=1e-6)


def test_convolve_bilinear(gauss_spec):
    pt = FrozenGaussianKernel(gauss_spec)

    class Scaled(FrozenGaussianKernel):
        def __init__(self, spec, c):
            super().__init__(spec)
            self.c = c

        def eval(self, s, t, x, y):
            return self.c * FrozenGaussianKernel.eval(self, s, t, x, y)

    a = time_space_convolve(Scaled(gauss_spec, 2.0), pt, 0.0, 1.0, 0.1, -0.2)
    b = time_space_convolve(pt, pt, 0.0, 1.0, 0.1, -0.2)
    assert a == pytest.approx(2.0 * b, rel=1e-9)


# -- diffusion series ----------------------------------------------------------

def test_parametrix_constant_coefficients(gauss_spec):
    res = parametrix_p(gauss_spec, 0.0, 1.0, 0.0, 0.4)
    assert res.value == pytest.approx(
        frozen_density(gauss_spec, 0.0, 1.0, 0.0, 0.4), abs=1e-10)
    assert all(abs(t) < 1e-12 for t in res.terms[1:])


def test_parametrix_rmax_zero_is_frozen(mix_spec):
    q = QuadratureSpec(series_rmax=0)
    res = parametrix_p(mix_spec, 0.0, 1.0, 0.3, -0.2, q)
    assert res.value == pytest.approx(
        frozen_density(mix_spec, 0.0, 1.0, 0.3, -0.2), rel=1e-12)
    assert res.r_used == 0


def test_parametrix_matches_ou_closed_form():
    # OU as a local oracle: m(x) = -x, sigma = 1
    spec = build_spec(drift=("linear_x", {"slope": -1.0}),
                      ellipticity=(0.5, 2.0))
    for (x, y, dt) in ((0.0, 0.0, 0.5), (0.5, -0.5, 0.5), (-1.0, 1.0, 0.25)):
        got = parametrix_p(spec, 0.0, dt, x, y).value
        want = ou_exact_density(1.0, 0.0, dt, x, y)
        assert got == pytest.approx(want, abs=5e-3)


def test_parametrix_series_reports_tail(mix_spec):
    res = parametrix_p(mix_spec, 0.0, 1.0, 0.2, -0.4)
    assert res.r_used >= 1
    assert res.tail_bound >= 0.0
    assert len(res.terms) == res.r_used + 1


# -- frozen chain density -------------------------------------------------------

def test_frozen_chain_gaussian_equals_frozen_density(gauss_spec):
    for (x, y) in ((0.0, 0.0), (0.3, -0.5), (-0.7, 0.9)):
        ph = frozen_chain_density(gauss_spec, 0, 8, x, y)
        p = frozen_density(gauss_spec, 0.0, 1.0, x, y)
        assert ph == pytest.approx(p, rel=1e-8)


def test_frozen_chain_single_step(exp_spec):
    h = exp_spec.step
    x, y = 0.1, 0.3
    m = float(exp_spec.drift.value(0.0, y))
    want = float(exp_spec.innovations.density(
        0.0, y, (y - x - m * h) / math.sqrt(h))) / math.sqrt(h)
    assert frozen_chain_density(exp_spec, 0, 1, x, y) == pytest.approx(
        want, rel=1e-12)


def test_frozen_chain_methods_agree(exp_spec):
    # cf inversion vs repeated grid self-convolution: two independent
    # algorithms for the same increment-sum density
    for (x, y) in ((0.0, -0.4), (0.2, 0.6)):
        a = frozen_chain_density(exp_spec, 0, 2, x, y, method="char_fn")
        b = frozen_chain_density(exp_spec, 0, 2, x, y, method="grid")
        c = frozen_chain_density(exp_spec, 0, 2, x, y)  # gamma closed form
        assert a == pytest.approx(b, abs=1e-3)   # grid method is coarser
        assert c == pytest.approx(a, abs=1e-6)


def test_frozen_chain_exponential_deep(exp_spec):
    # closed form vs inversion across a longer window
    for y in (-0.5, 0.4):
        a = frozen_chain_density(exp_spec, 0, 16, 0.0, y)
        b = frozen_chain_density(exp_spec, 0, 16, 0.0, y, method="char_fn")
        assert a == pytest.approx(b, abs=1e-6)


# -- discrete convolution and chain series --------------------------------------

class _GaussianChainKernel:
    """Closed form of p~_h for the constant sigma=1, m=0 model: N(0, t-s).

    Vanishes at zero elapsed time, matching the convention for iterated
    correction terms.
    """

    max_deriv_order = 0
    dirac_at_zero = False
    short_time_singular = False
    width_scale = 1.0

    def eval(self, s, t, x, y):
        if t <= s:
            return np.zeros_like(np.asarray(y, dtype=float))
        from scipy.stats import norm
        return norm.pdf(np.asarray(y, dtype=float), loc=x,
                        scale=math.sqrt(t - s))

    def forward_center(self, s, t, x):
        return x

    def backward_center(self, s, t, y):
        return y

    def width(self, s, t, at=None):
        return math.sqrt(max(t - s, 1e-12))


def test_discrete_convolve_gaussian():
    pt_h = _GaussianChainKernel()
    val = discrete_convolve(pt_h, pt_h, 0, 2, 0.0, 0.0, step=0.5)
    # only the i=1 summand survives: h * int N(0,h)(z) N(0,h)(-z) dz
    # = h * N(0,2h) at 0 = 0.5 * 0.3989423
    assert val == pytest.approx(0.1994711, abs=1e-6)


def test_discrete_convolve_single_step_constant():
    # k = j+1 with f a true density, g constant: h * c
    pt_h = _GaussianChainKernel()

    class Const(_GaussianChainKernel):
        def eval(self, s, t, x, y):
            return 3.0 * np.ones_like(np.asarray(y, dtype=float))

    val = discrete_convolve(Const(), pt_h, 1, 2, 0.2, 0.0, step=0.25)
    # i = j only; left factor at zero elapsed time vanishes... the constant
    # kernel does not, so the plain-evaluation branch integrates
    # 3 * N(., 0.25) over z = 3, times h
    assert val == pytest.approx(3.0 * 0.25, rel=1e-6)


def test_chain_series_constant_gaussian(gauss_spec):
    res = parametrix_p_h(gauss_spec, 0, 8, 0.0, 0.3)
    want = frozen_chain_density(gauss_spec, 0, 8, 0.0, 0.3)
    assert res.value == pytest.approx(want, rel=1e-8)
    assert all(abs(t) < 1e-10 for t in res.terms[1:])


def test_chain_series_single_step(exp_spec):
    res = parametrix_p_h(exp_spec, 0, 1, 0.1, 0.3)
    assert res.value == pytest.approx(
        frozen_chain_density(exp_spec, 0, 1, 0.1, 0.3), rel=1e-12)


def test_chain_series_vs_ck_oracle(exp_spec):
    spec = exp_spec.with_steps(8)
    grid = ck_default_grid(spec, 0.0, extra_points=(-0.5, 0.4))
    dg = ck_chain_density(spec, 8, 0.0, grid)
    for y in (-0.5, 0.4):
        res = parametrix_p_h(spec, 0, 8, 0.0, y)
        assert res.value == pytest.approx(dg.interp(y), abs=1e-5)


def test_chain_correction_closed_form_vs_quadrature(exp_spec):
    # the Gamma closed form for H_h must agree with the generic
    # panel-quadrature path
    eng = ChainEngine(exp_spec)
    xs = np.array([-0.6, 0.0, 0.8])
    for (i, i2, ztar) in ((2, 3, -0.5), (1, 4, 0.7), (0, 9, 0.0)):
        c = eng._exp_common_scale(i, i2)
        assert c is not None
        fast = eng._gamma_correction(i, i2, xs, np.array([ztar]), c)[:, 0]
        save = eng._exp_common_scale
        eng._exp_common_scale = lambda a, b: None
        try:
            slow = eng.correction(i, i2, xs, ztar)
        finally:
            eng._exp_common_scale = save
        assert np.allclose(fast, slow, atol=1e-7)


# -- grid dumps -----------------------------------------------------------------

def test_dump_grid_csv(tmp_path, mix_spec):
    times = np.array([0.5, 1.0])
    z = np.linspace(-1, 1, 5)
    vals = np.vstack([np.exp(-z ** 2 / t) for t in times])
    grid = GridKernel(mix_spec, 0.0, 0.0, times, z, vals)
    out = tmp_path / "grid.csv"
    dump_grid_csv(grid, str(out))
    lines = out.read_text().splitlines()
    assert lines[0] == "s,t,x,y,value"
    assert len(lines) == 1 + 2 * 5
    # interpolation hits the stored nodes exactly
    assert float(grid.eval(0.0, 0.5, 0.0, 0.0)) == pytest.approx(1.0)
