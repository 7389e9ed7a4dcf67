"""Frozen Gaussian densities, differential operators and the kernel H.

All kernels are pure value objects evaluable as f(s, t, x, y) with spatial
derivative access in x.  Evaluation broadcasts over numpy arrays in x and y
(s, t are scalars).
"""

import numpy as np
from numpy.polynomial import hermite_e

from .errors import CapabilityError, ConditioningError
from .model import integrated_coeffs
from .multiindex import scalar_order

_SQRT2PI = np.sqrt(2.0 * np.pi)

# Central finite-difference stencils (offset -> coefficient, unit step).
_FD_STENCILS = {
    1: ((-1, -0.5), (1, 0.5)),
    2: ((-1, 1.0), (0, -2.0), (1, 1.0)),
    3: ((-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)),
    4: ((-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)),
    5: ((-3, -0.5), (-2, 2.0), (-1, -2.5), (1, 2.5), (2, -2.0), (3, 0.5)),
    6: ((-3, 1.0), (-2, -6.0), (-1, 15.0), (0, -20.0), (1, 15.0), (2, -6.0),
        (3, 1.0)),
}
_FD_STEP_SCALE = {1: 1e-4, 2: 1e-4, 3: 1e-3, 4: 3e-3, 5: 6e-3, 6: 1e-2}


def gaussian_deriv(k, u, var):
    """k-th derivative in u of the N(0, var) density at u.

    Uses the probabilists' Hermite recursion:
    phi^(k)(u) = (-1)^k var^(-k/2) He_k(u/sqrt(var)) phi(u).
    """
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0.0):
        raise ConditioningError("non-positive variance in gaussian_deriv")
    sd = np.sqrt(var)
    z = np.asarray(u, dtype=float) / sd
    phi = np.exp(-0.5 * z * z) / sd / _SQRT2PI
    if k == 0:
        return phi
    coeffs = np.zeros(k + 1)
    coeffs[k] = 1.0
    return (-1.0) ** k * sd ** (-k) * hermite_e.hermeval(z, coeffs) * phi


class SpaceTimeKernel:
    """Evaluable kernel f(s, t, x, y) with spatial derivatives in x.

    Subclasses override ``eval``; the default ``deriv`` is a central finite
    difference of ``eval`` with step proportional to sqrt(t - s).  The
    ``forward_center``/``backward_center``/``width`` hints tell the
    convolution engine where the kernel's mass sits.
    """

    max_deriv_order = 2
    #: multiplies sqrt(t - s) to give the spatial mass width
    width_scale = 1.0
    #: left factor behaves as a Dirac at zero elapsed time
    dirac_at_zero = False
    #: magnitude blows up like a power of (t - s)^(-1/2) as t -> s; the
    #: convolution engine clusters time nodes toward the singular endpoint
    short_time_singular = False

    def eval(self, s, t, x, y):
        raise NotImplementedError

    def deriv(self, nu, s, t, x, y):
        k = scalar_order(nu)
        if k == 0:
            return self.eval(s, t, x, y)
        if k > self.max_deriv_order:
            raise CapabilityError(
                "derivative order %d exceeds kernel capability %d"
                % (k, self.max_deriv_order))
        return self._fd_deriv(k, s, t, x, y)

    def _fd_deriv(self, k, s, t, x, y):
        hh = max(np.sqrt(max(t - s, 0.0)), 1e-3) * _FD_STEP_SCALE[k]
        x = np.asarray(x, dtype=float)
        out = 0.0
        for off, c in _FD_STENCILS[k]:
            out = out + c * self.eval(s, t, x + off * hh, y)
        return out / hh ** k

    def __call__(self, s, t, x, y):
        return self.eval(s, t, x, y)

    # -- mass-location hints ----------------------------------------------

    def forward_center(self, s, t, x):
        """Approximate center in y of f(s, t, x, .)."""
        return np.asarray(x, dtype=float)

    def backward_center(self, s, t, y):
        """Approximate center in x of f(s, t, ., y)."""
        return np.asarray(y, dtype=float)

    def width(self, s, t, at=None):
        """Spatial mass scale of the kernel over the window (s, t).

        ``at`` is an optional location hint; kernels with state-dependent
        variance use it to report the true local width instead of the
        conservative ellipticity-bound scale.
        """
        return self.width_scale * np.sqrt(max(t - s, 0.0))


class FunctionKernel(SpaceTimeKernel):
    """Kernel defined by a plain function (s, t, x, y) -> value."""

    def __init__(self, fn, max_deriv_order=2, width_scale=1.0):
        self._fn = fn
        self.max_deriv_order = max_deriv_order
        self.width_scale = width_scale

    def eval(self, s, t, x, y):
        return self._fn(s, t, x, y)


class FrozenGaussianKernel(SpaceTimeKernel):
    """The frozen transition density p~(s, t, x, y).

    Gaussian in x with mean shift m(s, t, y) and variance sigma(s, t, y),
    both frozen at the terminal point y ("the argument acts twice").
    Derivatives in x are analytic via the Hermite recursion since x enters
    only through the quadratic form.
    """

    max_deriv_order = 6
    dirac_at_zero = True

    def __init__(self, spec):
        self.spec = spec
        self.width_scale = np.sqrt(spec.ellipticity[1])

    def _params(self, s, t, y):
        m_int, var = integrated_coeffs(self.spec, s, t, y)
        if np.any(var <= 0.0) or np.any(~np.isfinite(var)):
            raise ConditioningError("degenerate integrated covariance")
        return m_int, var

    def eval(self, s, t, x, y):
        m_int, var = self._params(s, t, y)
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float) - m_int
        return gaussian_deriv(0, u, var)

    def deriv(self, nu, s, t, x, y):
        k = scalar_order(nu)
        if k == 0:
            return self.eval(s, t, x, y)
        if k > self.max_deriv_order:
            raise CapabilityError("derivative order %d exceeds 6" % k)
        m_int, var = self._params(s, t, y)
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float) - m_int
        # d/dx = -d/du, so the signs cancel against the Hermite (-1)^k
        return (-1.0) ** k * gaussian_deriv(k, u, var)

    def forward_center(self, s, t, x):
        x = np.asarray(x, dtype=float)
        m_int = self.spec.drift.integral(s, t, x)
        return x + m_int

    def backward_center(self, s, t, y):
        y = np.asarray(y, dtype=float)
        m_int = self.spec.drift.integral(s, t, y)
        return y - m_int

    def width(self, s, t, at=None):
        if at is None or t <= s:
            return super().width(s, t)
        return float(np.sqrt(max(float(
            np.asarray(self.spec.covariance.integral(s, t, at))), 1e-300)))


def frozen_density(spec, s, t, x, y):
    """Frozen Gaussian transition density p~(s, t, x, y)."""
    return FrozenGaussianKernel(spec).eval(s, t, x, y)


def frozen_density_deriv(spec, nu, s, t, x, y):
    """Analytic spatial derivative D_x^nu of the frozen density."""
    return FrozenGaussianKernel(spec).deriv(nu, s, t, x, y)


class _OperatorKernel(SpaceTimeKernel):
    """Second-order differential operator applied to a kernel in x."""

    short_time_singular = True

    def __init__(self, spec, f, second_coeff, first_coeff):
        if f.max_deriv_order < 2:
            raise CapabilityError("operator needs derivative order >= 2")
        self.spec = spec
        self.f = f
        self._second = second_coeff  # (s, x, y) -> coefficient of f_xx
        self._first = first_coeff  # (s, x, y) -> coefficient of f_x
        self.max_deriv_order = f.max_deriv_order - 2
        self.width_scale = f.width_scale

    def eval(self, s, t, x, y):
        fxx = self.f.deriv(2, s, t, x, y)
        fx = self.f.deriv(1, s, t, x, y)
        return self._second(s, x, y) * fxx + self._first(s, x, y) * fx

    def forward_center(self, s, t, x):
        return self.f.forward_center(s, t, x)

    def backward_center(self, s, t, y):
        return self.f.backward_center(s, t, y)

    def width(self, s, t, at=None):
        return self.f.width(s, t, at)


_OPERATOR_KINDS = ("L", "L_tilde", "L_star", "L_prime", "L_tilde_prime")


def apply_operator(kind, spec, f):
    """Apply one of the model's differential operators to a kernel.

    ``L`` uses coefficients at (s, x); ``L_tilde`` at (s, y); the primed
    variants use the coefficients' time derivatives.  A single application
    of ``L_star`` coincides with ``L`` (the frozen-coefficient distinction
    only shows up in the squared difference, see operator_square_diff).
    """
    sig, m = spec.covariance, spec.drift
    if kind in ("L", "L_star"):
        return _OperatorKernel(
            spec, f,
            lambda s, x, y: 0.5 * sig.value(s, x),
            lambda s, x, y: m.value(s, x))
    if kind == "L_tilde":
        return _OperatorKernel(
            spec, f,
            lambda s, x, y: 0.5 * sig.value(s, y),
            lambda s, x, y: m.value(s, y))
    if kind == "L_prime":
        return _OperatorKernel(
            spec, f,
            lambda s, x, y: 0.5 * sig.dt(s, x),
            lambda s, x, y: m.dt(s, x))
    if kind == "L_tilde_prime":
        return _OperatorKernel(
            spec, f,
            lambda s, x, y: 0.5 * sig.dt(s, y),
            lambda s, x, y: m.dt(s, y))
    raise ValueError("unknown operator kind %r (expected one of %s)"
                     % (kind, ", ".join(_OPERATOR_KINDS)))


class _SquareDiffKernel(SpaceTimeKernel):
    """(L_star^2 - L^2) f, expanded symbolically.

    With a = sigma/2 and b = m (evaluated at (s, x)), the fourth-order
    terms cancel and

        (L*^2 - L^2) f = -2 a a' f''' - (a a'' + 2 a b' + a' b) f''
                         - (a b'' + b b') f'.

    The expanded form avoids the catastrophic cancellation of subtracting
    two O(rho^-4) double applications.
    """

    short_time_singular = True

    def __init__(self, spec, f):
        if f.max_deriv_order < 4:
            raise CapabilityError("squared operator needs derivative order >= 4")
        self.spec = spec
        self.f = f
        self.max_deriv_order = max(f.max_deriv_order - 3, 0)
        self.width_scale = f.width_scale

    def eval(self, s, t, x, y):
        sig, m = self.spec.covariance, self.spec.drift
        a = 0.5 * sig.value(s, x)
        ap = 0.5 * sig.dx(s, x)
        app = 0.5 * sig.dxx(s, x)
        b = m.value(s, x)
        bp = m.dx(s, x)
        bpp = m.dxx(s, x)
        f3 = self.f.deriv(3, s, t, x, y)
        f2 = self.f.deriv(2, s, t, x, y)
        f1 = self.f.deriv(1, s, t, x, y)
        return (-2.0 * a * ap * f3
                - (a * app + 2.0 * a * bp + ap * b) * f2
                - (a * bpp + b * bp) * f1)

    def forward_center(self, s, t, x):
        return self.f.forward_center(s, t, x)

    def backward_center(self, s, t, y):
        return self.f.backward_center(s, t, y)

    def width(self, s, t, at=None):
        return self.f.width(s, t, at)


def operator_square_diff(spec, f):
    """Kernel (L_star^2 - L^2) f with coefficient freezing at (s, x)."""
    return _SquareDiffKernel(spec, f)


class CorrectionKernel(SpaceTimeKernel):
    """H(s, t, x, y) = (L - L_tilde) p~, the parametrix correction kernel.

    H = 1/2 (sigma(s,x) - sigma(s,y)) d^2 p~/dx^2
        + (m(s,x) - m(s,y)) d p~/dx.

    Vanishes identically at x = y and whenever the coefficients are
    x-independent.  Blows up like (t - s)^(-1/2) as t -> s.
    """

    max_deriv_order = 4
    short_time_singular = True

    def __init__(self, spec):
        self.spec = spec
        self.ptilde = FrozenGaussianKernel(spec)
        self.width_scale = self.ptilde.width_scale

    def eval(self, s, t, x, y):
        sig, m = self.spec.covariance, self.spec.drift
        d2 = self.ptilde.deriv(2, s, t, x, y)
        d1 = self.ptilde.deriv(1, s, t, x, y)
        return (0.5 * (sig.value(s, x) - sig.value(s, y)) * d2
                + (m.value(s, x) - m.value(s, y)) * d1)

    def forward_center(self, s, t, x):
        return self.ptilde.forward_center(s, t, x)

    def backward_center(self, s, t, y):
        return self.ptilde.backward_center(s, t, y)

    def width(self, s, t, at=None):
        return self.ptilde.width(s, t, at)


def kernel_H(spec):
    """The parametrix correction kernel H = (L - L_tilde) p~."""
    return CorrectionKernel(spec)
