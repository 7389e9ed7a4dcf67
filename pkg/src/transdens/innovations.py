"""Innovation families: densities q(t, x, .) with analytic cumulants.

Each family is tied to a covariance coefficient so that the innovation
variance equals sigma(t, x) at every (t, x).  Families expose the density,
the characteristic function (where available in closed form), a sampler
and cumulants of order 1..4.
"""

import numpy as np

from .coeffs import Coefficient
from .errors import UnsupportedOrderError
from .multiindex import scalar_order

_SQRT2PI = np.sqrt(2.0 * np.pi)


def _norm_pdf(z, var):
    return np.exp(-0.5 * z * z / var) / np.sqrt(var) / _SQRT2PI


class InnovationFamily:
    """Family of zero-mean innovation densities q(t, x, .) in d = 1.

    Parameters
    ----------
    cov : Coefficient
        Variance sigma(t, x) of the innovations.
    envelope_order : int
        Moment/decay order of the polynomial envelope assumption.
    """

    name = "base"
    has_char_fn = True
    #: tail decay class, used to size quadrature windows:
    #: "gaussian" | "exponential" | "polynomial"
    tail_kind = "gaussian"

    def __init__(self, cov, envelope_order=2):
        if not isinstance(cov, Coefficient):
            raise TypeError("cov must be a Coefficient")
        if envelope_order < 1:
            raise ValueError("envelope_order must be >= 1")
        self.cov = cov
        self.envelope_order = int(envelope_order)

    # -- family-specific pieces -------------------------------------------

    def density(self, t, x, z):
        raise NotImplementedError

    def char_fn(self, t, x, theta):
        """Characteristic function E[exp(i*theta*Z)]; None if unavailable."""
        raise NotImplementedError

    def sample(self, t, x, rng, size=None):
        raise NotImplementedError

    def _chi3(self, t, x):
        raise NotImplementedError

    def _chi4(self, t, x):
        raise NotImplementedError

    # -- shared surface ----------------------------------------------------

    def variance(self, t, x):
        return self.cov.value(t, x)

    def cumulant(self, nu, t, x):
        """Cumulant chi_nu(t, x) for 1 <= |nu| <= 4."""
        k = scalar_order(nu)
        if not 1 <= k <= 4:
            raise UnsupportedOrderError("cumulant order %d outside [1, 4]" % k)
        if k == 1:
            return np.zeros_like(np.asarray(x, dtype=float))
        if k == 2:
            return self.variance(t, x)
        if k == 3:
            return self._chi3(t, x)
        return self._chi4(t, x)

    def moment_envelope_order(self):
        """Derived moment order S = (S' + 2) d + 4 with d = 1."""
        return (self.envelope_order + 2) + 4

    def params(self):
        return {"envelope_order": self.envelope_order}


class GaussianFamily(InnovationFamily):
    """Z ~ N(0, sigma(t, x))."""

    name = "gaussian"

    def density(self, t, x, z):
        return _norm_pdf(np.asarray(z, dtype=float), self.variance(t, x))

    def char_fn(self, t, x, theta):
        return np.exp(-0.5 * np.asarray(theta) ** 2 * self.variance(t, x))

    def sample(self, t, x, rng, size=None):
        return rng.normal(0.0, np.sqrt(self.variance(t, x)), size=size)

    def _chi3(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    _chi4 = _chi3


class CenteredExponentialFamily(InnovationFamily):
    """Z = s * (E - 1) with E standard exponential, s = sqrt(sigma(t, x)).

    Skewed with chi3 = 2 s^3 and chi4 = 6 s^4.
    """

    name = "centered_exponential"
    tail_kind = "exponential"

    def _scale(self, t, x):
        return np.sqrt(self.variance(t, x))

    def support_edges(self, t, x):
        """Density kink locations in increment units (left support edge)."""
        return [-float(self._scale(t, x))]

    def density(self, t, x, z):
        s = self._scale(t, x)
        z = np.asarray(z, dtype=float)
        u = z / s + 1.0
        return np.where(u > 0.0, np.exp(-np.clip(u, 0.0, None)) / s, 0.0)

    def char_fn(self, t, x, theta):
        s = self._scale(t, x)
        theta = np.asarray(theta)
        return np.exp(-1j * theta * s) / (1.0 - 1j * theta * s)

    def sample(self, t, x, rng, size=None):
        s = self._scale(t, x)
        return s * (rng.exponential(1.0, size=size) - 1.0)

    def _chi3(self, t, x):
        return 2.0 * self._scale(t, x) ** 3

    def _chi4(self, t, x):
        return 6.0 * self._scale(t, x) ** 4


class GaussianMixtureFamily(InnovationFamily):
    """Two-component Gaussian mixture, centered and scaled to variance sigma.

    The base variable U is N(mu1, tau^2) with probability w and
    N(mu2, tau^2) with probability 1 - w, where mu2 = -w*mu1/(1-w) so that
    E U = 0.  Z = s(t, x) * U with s chosen so Var Z = sigma(t, x).  The
    asymmetry parameter mu1 may depend on x (state-modulated subclass),
    which makes the third cumulant genuinely state dependent.
    """

    name = "two_point_mixture"

    def __init__(self, cov, envelope_order=2, weight=0.3, mu1=1.0, comp_std=0.5):
        super().__init__(cov, envelope_order)
        if not 0.0 < weight < 1.0:
            raise ValueError("mixture weight must be in (0, 1)")
        if comp_std <= 0.0:
            raise ValueError("component std must be positive")
        self.weight = float(weight)
        self.mu1 = float(mu1)
        self.comp_std = float(comp_std)

    def _asym(self, x):
        """First component mean of the base variable (may depend on x)."""
        return self.mu1 + np.zeros_like(np.asarray(x, dtype=float))

    def _base_moments(self, x):
        w, tau = self.weight, self.comp_std
        m1 = self._asym(x)
        m2 = -w * m1 / (1.0 - w)
        t2 = tau * tau
        M2 = t2 + w * m1 * m1 + (1.0 - w) * m2 * m2
        M3 = w * (m1 ** 3 + 3.0 * m1 * t2) + (1.0 - w) * (m2 ** 3 + 3.0 * m2 * t2)
        M4 = w * (m1 ** 4 + 6.0 * m1 * m1 * t2 + 3.0 * t2 * t2) + (1.0 - w) * (
            m2 ** 4 + 6.0 * m2 * m2 * t2 + 3.0 * t2 * t2
        )
        return m1, m2, M2, M3, M4

    def _scale(self, t, x):
        _, _, M2, _, _ = self._base_moments(x)
        return np.sqrt(self.variance(t, x) / M2)

    def density(self, t, x, z):
        m1, m2, _, _, _ = self._base_moments(x)
        s = self._scale(t, x)
        z = np.asarray(z, dtype=float)
        v = (s * self.comp_std) ** 2
        return self.weight * _norm_pdf(z - s * m1, v) + (1.0 - self.weight) * _norm_pdf(
            z - s * m2, v
        )

    def char_fn(self, t, x, theta):
        m1, m2, _, _, _ = self._base_moments(x)
        s = self._scale(t, x)
        theta = np.asarray(theta)
        damp = np.exp(-0.5 * theta ** 2 * (s * self.comp_std) ** 2)
        return damp * (
            self.weight * np.exp(1j * theta * s * m1)
            + (1.0 - self.weight) * np.exp(1j * theta * s * m2)
        )

    def sample(self, t, x, rng, size=None):
        m1, m2, _, _, _ = self._base_moments(x)
        s = self._scale(t, x)
        pick = rng.random(size=size) < self.weight
        mean = np.where(pick, s * m1, s * m2)
        return mean + rng.normal(0.0, 1.0, size=size) * (s * self.comp_std)

    def _scale_pow(self, t, x, k):
        return self._scale(t, x) ** k

    def _chi3(self, t, x):
        _, _, _, M3, _ = self._base_moments(x)
        return M3 * self._scale_pow(t, x, 3)

    def _chi4(self, t, x):
        _, _, M2, _, M4 = self._base_moments(x)
        kappa4 = M4 - 3.0 * M2 * M2
        return kappa4 * self._scale_pow(t, x, 4)


class StateModulatedMixtureFamily(GaussianMixtureFamily):
    """Mixture whose skewness depends on the state x.

    The first component mean is mu1 + skew_amp * tanh(x), so the third
    cumulant chi3(t, x) varies genuinely with x.
    """

    name = "state_modulated_mixture"

    def __init__(
        self, cov, envelope_order=2, weight=0.3, mu1=1.0, comp_std=0.5, skew_amp=0.5
    ):
        super().__init__(cov, envelope_order, weight, mu1, comp_std)
        self.skew_amp = float(skew_amp)

    def _asym(self, x):
        return self.mu1 + self.skew_amp * np.tanh(np.asarray(x, dtype=float))


class StudentFamily(InnovationFamily):
    """Scaled Student-t innovations (heavy tails, envelope stress tests).

    Requires df > 4 so that the fourth cumulant exists.  No closed-form
    characteristic function is exposed; consumers fall back to the
    grid-convolution path.
    """

    name = "student"
    has_char_fn = False
    tail_kind = "polynomial"

    def __init__(self, cov, envelope_order=2, df=8.0):
        super().__init__(cov, envelope_order)
        if df <= 4.0:
            raise ValueError("df must exceed 4 so that chi4 exists")
        self.df = float(df)

    def _scale(self, t, x):
        # t_df has variance df/(df-2); rescale to sigma(t, x)
        return np.sqrt(self.variance(t, x) * (self.df - 2.0) / self.df)

    def density(self, t, x, z):
        from scipy.stats import t as student_t

        s = self._scale(t, x)
        return student_t.pdf(np.asarray(z, dtype=float) / s, self.df) / s

    def char_fn(self, t, x, theta):
        return None

    def sample(self, t, x, rng, size=None):
        return self._scale(t, x) * rng.standard_t(self.df, size=size)

    def _chi3(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def _chi4(self, t, x):
        return 6.0 * self.variance(t, x) ** 2 / (self.df - 4.0)


_FAMILIES = {
    cls.name: cls
    for cls in (
        GaussianFamily,
        CenteredExponentialFamily,
        GaussianMixtureFamily,
        StateModulatedMixtureFamily,
        StudentFamily,
    )
}


def make_family(name, cov, **params):
    """Build an innovation family by name."""
    try:
        cls = _FAMILIES[name]
    except KeyError:
        raise ValueError(
            "unknown innovation family %r (available: %s)"
            % (name, ", ".join(sorted(_FAMILIES)))
        ) from None
    return cls(cov, **params)
