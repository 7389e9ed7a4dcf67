"""Parametric drift/covariance coefficients with analytic derivatives.

Coefficients are supplied as named presets rather than parsed expressions,
so spatial derivatives (to order 2), the time derivative and the exact
time integral are all available in closed form.
"""

import numpy as np


class Coefficient:
    """Scalar coefficient c(t, x) with analytic derivative access.

    Subclasses implement ``value``, ``dx``, ``dxx``, ``dt`` and the exact
    time integral ``integral(s, t, x)`` = int_s^t c(u, x) du.  All methods
    broadcast over numpy arrays in ``x``.
    """

    preset = "base"

    def value(self, t, x):
        raise NotImplementedError

    def dx(self, t, x):
        raise NotImplementedError

    def dxx(self, t, x):
        raise NotImplementedError

    def dt(self, t, x):
        raise NotImplementedError

    def integral(self, s, t, x):
        raise NotImplementedError

    def __call__(self, t, x):
        return self.value(t, x)

    def params(self):
        """Serializable parameter dict (used by the config round-trip)."""
        return dict(self.__dict__)


class Constant(Coefficient):
    preset = "constant"

    def __init__(self, c):
        self.c = float(c)

    def value(self, t, x):
        return self.c + np.zeros_like(np.asarray(x, dtype=float))

    def dx(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    dxx = dx
    dt = dx

    def integral(self, s, t, x):
        return self.c * (t - s) + np.zeros_like(np.asarray(x, dtype=float))


class AffineInTime(Coefficient):
    """c(t, x) = a + b*t."""

    preset = "affine_t"

    def __init__(self, a, b):
        self.a = float(a)
        self.b = float(b)

    def value(self, t, x):
        return self.a + self.b * t + np.zeros_like(np.asarray(x, dtype=float))

    def dx(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    dxx = dx

    def dt(self, t, x):
        return self.b + np.zeros_like(np.asarray(x, dtype=float))

    def integral(self, s, t, x):
        val = self.a * (t - s) + 0.5 * self.b * (t * t - s * s)
        return val + np.zeros_like(np.asarray(x, dtype=float))


class TanhInX(Coefficient):
    """c(t, x) = base + amp * tanh(scale * x).

    Bounded with bounded derivatives of all orders, so it satisfies the
    smoothness requirements of the model assumptions by construction.
    """

    preset = "tanh_x"

    def __init__(self, base, amp, scale=1.0):
        self.base = float(base)
        self.amp = float(amp)
        self.scale = float(scale)

    def value(self, t, x):
        return self.base + self.amp * np.tanh(self.scale * np.asarray(x, dtype=float))

    def dx(self, t, x):
        th = np.tanh(self.scale * np.asarray(x, dtype=float))
        return self.amp * self.scale * (1.0 - th * th)

    def dxx(self, t, x):
        th = np.tanh(self.scale * np.asarray(x, dtype=float))
        return -2.0 * self.amp * self.scale ** 2 * th * (1.0 - th * th)

    def dt(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def integral(self, s, t, x):
        return (t - s) * self.value(0.0, x)


class SineInX(Coefficient):
    """c(t, x) = base + amp * sin(freq * x)."""

    preset = "sine_x"

    def __init__(self, base, amp, freq=1.0):
        self.base = float(base)
        self.amp = float(amp)
        self.freq = float(freq)

    def value(self, t, x):
        return self.base + self.amp * np.sin(self.freq * np.asarray(x, dtype=float))

    def dx(self, t, x):
        return self.amp * self.freq * np.cos(self.freq * np.asarray(x, dtype=float))

    def dxx(self, t, x):
        return -self.amp * self.freq ** 2 * np.sin(self.freq * np.asarray(x, dtype=float))

    def dt(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def integral(self, s, t, x):
        return (t - s) * self.value(0.0, x)


class LinearInX(Coefficient):
    """c(t, x) = intercept + slope * x.

    Unbounded; used only for Ornstein-Uhlenbeck style validation probes on
    compact regions (the drift -theta*x violates the global boundedness
    assumption, which is fine for a local oracle).
    """

    preset = "linear_x"

    def __init__(self, slope, intercept=0.0):
        self.slope = float(slope)
        self.intercept = float(intercept)

    def value(self, t, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def dx(self, t, x):
        return self.slope + np.zeros_like(np.asarray(x, dtype=float))

    def dxx(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    dt = dxx

    def integral(self, s, t, x):
        return (t - s) * self.value(0.0, x)


_PRESETS = {
    cls.preset: cls for cls in (Constant, AffineInTime, TanhInX, SineInX, LinearInX)
}


def make_coefficient(preset, **params):
    """Build a coefficient from a preset name and keyword parameters."""
    try:
        cls = _PRESETS[preset]
    except KeyError:
        raise ValueError(
            "unknown coefficient preset %r (available: %s)"
            % (preset, ", ".join(sorted(_PRESETS)))
        ) from None
    return cls(**params)
