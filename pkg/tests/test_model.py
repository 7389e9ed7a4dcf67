import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transdens.errors import ConfigError, UnsupportedOrderError
from transdens.model import (ModelSpec, averaged_cumulant, integrated_coeffs,
                             is_state_independent, load_model_config,
                             parse_config_text, validate_assumptions)

from conftest import build_spec


# -- integrated coefficients -------------------------------------------------

def test_integrated_coeffs_constant(gauss_spec):
    m, sig = integrated_coeffs(gauss_spec, 0.0, 0.5, 0.3)
    assert sig == pytest.approx(0.5, abs=1e-12)
    assert m == pytest.approx(0.0, abs=1e-12)


def test_integrated_coeffs_affine_drift():
    spec = build_spec(drift=("affine_t", {"a": 0.0, "b": 1.0}))
    m, _ = integrated_coeffs(spec, 0.0, 1.0, 0.0)
    assert m == pytest.approx(0.5, abs=1e-12)  # integral of t over [0, 1]


def test_integrated_coeffs_tanh_at_origin():
    spec = build_spec(cov=("tanh_x", {"base": 1.0, "amp": 0.1}))
    _, sig = integrated_coeffs(spec, 0.2, 0.7, 0.0)
    assert sig == pytest.approx(0.5, abs=1e-12)  # tanh(0) = 0


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.0, 0.4), gap1=st.floats(0.05, 0.3),
       gap2=st.floats(0.05, 0.3), y=st.floats(-2.0, 2.0))
def test_integrated_coeffs_time_additive(s, gap1, gap2, y):
    spec = build_spec(drift=("sine_x", {"base": 0.1, "amp": 0.2}),
                      cov=("tanh_x", {"base": 0.5, "amp": 0.15}))
    u, t = s + gap1, s + gap1 + gap2
    m_st, s_st = integrated_coeffs(spec, s, t, y)
    m_a, s_a = integrated_coeffs(spec, s, u, y)
    m_b, s_b = integrated_coeffs(spec, u, t, y)
    assert m_st == pytest.approx(m_a + m_b, abs=1e-10)
    assert s_st == pytest.approx(s_a + s_b, abs=1e-10)


# -- cumulants ----------------------------------------------------------------

def test_averaged_cumulant_constant(exp_spec):
    s = math.sqrt(0.6)
    chi3 = averaged_cumulant(exp_spec, 3, 0.0, 1.0, 0.2)
    assert chi3 == pytest.approx(2.0 * s ** 3, rel=1e-12)


def test_averaged_cumulant_gaussian_zero(gauss_spec):
    assert averaged_cumulant(gauss_spec, 3, 0.0, 1.0, 0.0) == 0.0
    assert averaged_cumulant(gauss_spec, 4, 0.0, 1.0, 0.0) == 0.0


def test_averaged_cumulant_order_guard(gauss_spec):
    with pytest.raises(UnsupportedOrderError):
        averaged_cumulant(gauss_spec, 5, 0.0, 1.0, 0.0)


def test_second_cumulant_matches_covariance(mix_spec):
    for t, x in ((0.0, -0.7), (0.5, 0.0), (0.9, 1.2)):
        chi2 = mix_spec.innovations.cumulant(2, t, x)
        assert chi2 == pytest.approx(
            float(mix_spec.covariance.value(t, x)), rel=1e-10)


def test_declared_cumulants_match_moment_quadrature(exp_spec, mix_spec):
    # quadrature oracle: moments of the innovation density
    for spec in (exp_spec, mix_spec):
        t, x = 0.3, 0.4
        s = math.sqrt(float(spec.covariance.value(t, x)))
        z = np.linspace(-60 * s, 60 * s, 400001)
        q = np.asarray(spec.innovations.density(t, x, z), dtype=float)
        m3 = np.trapezoid(z ** 3 * q, z)
        m2 = np.trapezoid(z ** 2 * q, z)
        m4 = np.trapezoid(z ** 4 * q, z)
        assert spec.innovations.cumulant(3, t, x) == pytest.approx(
            m3, abs=5e-5)
        assert spec.innovations.cumulant(4, t, x) == pytest.approx(
            m4 - 3 * m2 * m2, abs=5e-4)


# -- assumption validation ----------------------------------------------------

def test_validate_assumptions_pass(gauss_spec, exp_spec, mix_spec):
    for spec in (gauss_spec, exp_spec, mix_spec):
        report = validate_assumptions(spec)
        assert report.passed, [c for c in report.checks if not c.passed]


def test_validate_assumptions_ellipticity_violation():
    spec = build_spec(cov=("constant", {"c": 5.0}), ellipticity=(0.3, 2.0))
    report = validate_assumptions(spec)
    names = {c.name: c for c in report.checks}
    assert not names["ellipticity_window"].passed
    assert not report.passed


def test_validation_report_serializes(gauss_spec):
    d = validate_assumptions(gauss_spec).to_dict()
    assert d["passed"] is True
    assert {"name", "passed", "worst", "detail"} <= set(d["checks"][0])


def test_is_state_independent(exp_spec, mix_spec):
    assert is_state_independent(exp_spec)
    assert not is_state_independent(mix_spec)


# -- config loader ------------------------------------------------------------

CONFIG = """\
# comment line
horizon = 1.0
steps = 16
ellipticity.lower = 0.3
ellipticity.upper = 1.2
drift.preset = constant
drift.c = 0.15
covariance.preset = constant
covariance.c = 0.6
innovation.family = centered_exponential
"""


def test_load_config_text():
    spec = load_model_config(CONFIG)
    assert isinstance(spec, ModelSpec)
    assert spec.steps == 16
    assert spec.horizon == 1.0
    assert spec.ellipticity == (0.3, 1.2)
    assert spec.innovations.name == "centered_exponential"


def test_load_config_from_file(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text(CONFIG)
    spec = load_model_config(str(path))
    assert spec.steps == 16


def test_parse_config_nested_keys():
    tree = parse_config_text("a.b = 1\na.c = x\n")
    assert tree == {"a": {"b": "1", "c": "x"}}


@pytest.mark.parametrize("mutation", [
    ("horizon = 1.0", ""),                          # missing required key
    ("steps = 16", "steps = 16\nbogus = 1"),        # unknown top key
    ("drift.preset = constant", "drift.nope = 1"),  # preset missing
    ("innovation.family = centered_exponential",
     "innovation.family = no_such_family"),
])
def test_load_config_rejects(mutation):
    old, new = mutation
    with pytest.raises(ConfigError):
        load_model_config(CONFIG.replace(old, new))


def test_with_steps_and_grid(gauss_spec):
    sp = gauss_spec.with_steps(32)
    assert sp.steps == 32
    assert sp.step == pytest.approx(sp.horizon / 32)
    assert sp.grid_time(4) == pytest.approx(4 * sp.step)
    assert gauss_spec.steps == 8  # original untouched
