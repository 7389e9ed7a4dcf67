"""Quadrature configuration and node/weight helpers."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class QuadratureSpec:
    """Tuning knobs for the convolution and series engines.

    space_radius_mult is in units of the local standard deviation; the
    default 7 keeps the neglected Gaussian tail mass below 1e-12.  The
    time rule "sqrt_sub" substitutes u = t - v^2 to regularize the
    (t - u)^(-1/2) blow-up of correction kernels near the right endpoint;
    "midpoint" is the plain endpoint-avoiding composite midpoint rule.
    """

    space_radius_mult: float = 7.0
    space_nodes: int = 48
    time_rule: str = "sqrt_sub"
    time_nodes: int = 12
    tol_quad: float = 1e-6
    series_rmax: int = 4
    series_tail_tol: float = 1e-6

    def __post_init__(self):
        if self.space_nodes < 16:
            raise ValueError("space_nodes must be >= 16")
        if self.time_nodes < 8:
            raise ValueError("time_nodes must be >= 8")
        if self.tol_quad <= 0.0:
            raise ValueError("tol_quad must be positive")
        if self.time_rule not in ("sqrt_sub", "midpoint"):
            raise ValueError("time_rule must be 'sqrt_sub' or 'midpoint'")

    def refined(self, factor=2):
        """Copy with space and time node counts multiplied by ``factor``."""
        return QuadratureSpec(
            self.space_radius_mult, self.space_nodes * factor, self.time_rule,
            self.time_nodes * factor, self.tol_quad, self.series_rmax,
            self.series_tail_tol)


@lru_cache(maxsize=64)
def _leggauss(n):
    return np.polynomial.legendre.leggauss(n)


def space_rule(center, radius, n):
    """Gauss-Legendre nodes/weights on [center - radius, center + radius].

    ``center`` may be an array; nodes then broadcast to shape
    center.shape + (n,).
    """
    nodes, weights = _leggauss(n)
    center = np.asarray(center, dtype=float)
    z = center[..., None] + radius * nodes
    w = radius * weights * np.ones_like(center)[..., None]
    return z, w


def time_rule(s, t, rule, n):
    """Nodes/weights for int_s^t F(u) du, avoiding both endpoints.

    "sqrt_sub": u = t - v^2 with composite midpoint in v, which absorbs an
    integrable (t - u)^(-1/2) singularity at u = t.
    """
    if t <= s:
        raise ValueError("need s < t")
    if rule == "midpoint":
        dt = (t - s) / n
        u = s + (np.arange(n) + 0.5) * dt
        w = np.full(n, dt)
        return u, w
    if rule == "sqrt_sub":
        vmax = np.sqrt(t - s)
        dv = vmax / n
        v = (np.arange(n) + 0.5) * dv
        u = t - v * v
        w = 2.0 * v * dv
        return u, w
    if rule == "sqrt_sub_left":
        vmax = np.sqrt(t - s)
        dv = vmax / n
        v = (np.arange(n) + 0.5) * dv
        u = s + v * v
        w = 2.0 * v * dv
        return u, w
    if rule == "trig_sub":
        # u = s + (t-s) sin^2(theta/2) regularizes ((u-s)(t-u))^(-1/2)
        dtheta = np.pi / n
        theta = (np.arange(n) + 0.5) * dtheta
        u = s + (t - s) * np.sin(0.5 * theta) ** 2
        w = (t - s) * 0.5 * np.sin(theta) * dtheta
        return u, w
    raise ValueError("unknown time rule %r" % rule)
