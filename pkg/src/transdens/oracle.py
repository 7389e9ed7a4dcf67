"""Brute-force reference densities, independent of the series machinery.

Chapman-Kolmogorov iteration of the one-step transition density (the
artifact's ground truth for the chain density p_h), Monte Carlo simulation
with kernel density estimation, and the Ornstein-Uhlenbeck closed form.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridExtentError
from .model import is_state_independent as _is_x_independent

_SQRT2PI = math.sqrt(2.0 * math.pi)

#: spatial half-span of CK grids, in units of sqrt(sigma* T), by tail class
_SPAN_MULT = {"gaussian": 12.0, "exponential": 40.0, "polynomial": 60.0}


@dataclass
class DensityGrid:
    """A density sampled on a uniform spatial axis at one time index."""

    axis: np.ndarray
    values: np.ndarray
    step_index: int
    mass: float = field(init=False)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mass = float(np.trapezoid(self.values, self.axis)
                          if hasattr(np, "trapezoid")
                          else np.trapz(self.values, self.axis))

    def interp(self, y):
        """Cubic-spline interpolation of the density at y."""
        from scipy.interpolate import CubicSpline

        return float(CubicSpline(self.axis, self.values)(y))

    @property
    def min_value(self):
        """Most negative sampled value (interpolation overshoot monitor)."""
        return float(np.min(self.values))

    def to_csv(self, path):
        """Write (node, value) rows."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "value"])
            for z, v in zip(self.axis, self.values):
                writer.writerow([repr(float(z)), repr(float(v))])


# ---------------------------------------------------------------------------
# Chapman-Kolmogorov recursion


def _edge_offset(spec, i):
    """One-step density edge location in y - z units, or None if smooth."""
    fam = spec.innovations
    if not hasattr(fam, "support_edges"):
        return None
    h = spec.step
    t = spec.grid_time(i)
    edges = fam.support_edges(t, 0.0)
    # d = 1 families carry a single support edge
    return float(spec.drift.value(t, 0.0)) * h + math.sqrt(h) * float(edges[0])


def ck_default_grid(spec, x, extra_points=(), dz=None, span=None):
    """Uniform spatial axis for ck_chain_density, anchored at x.

    For innovation families with a density support edge the spacing is
    snapped so that the edge offset is an exact lattice multiple; combined
    with mean-value sampling at the edge node this keeps the trapezoid
    recursion second-order accurate despite the jump.
    """
    h = spec.step
    lo_e, hi_e = spec.ellipticity
    fam = spec.innovations
    step_w = math.sqrt(h * lo_e)
    if dz is None:
        if hasattr(fam, "support_edges"):
            dz = step_w / 200.0
        else:
            factor = min(1.0, 1.2 * getattr(fam, "comp_std", 1.0))
            if _is_x_independent(spec):
                dz = 0.10 * factor * step_w
            else:
                dz = 0.15 * factor * step_w
    offset = _edge_offset(spec, 0)
    if offset is not None and offset != 0.0:
        a = abs(offset)
        dz = a / max(1, round(a / dz))
    if span is None:
        mult = _SPAN_MULT[fam.tail_kind]
        shift = float(spec.drift.integral(0.0, spec.horizon, x))
        span = mult * math.sqrt(hi_e * spec.horizon) + abs(shift) + 1.0
    pts = [float(x)] + [float(p) for p in extra_points]
    n_lo = int(math.ceil((x - (min(pts) - span)) / dz))
    n_hi = int(math.ceil(((max(pts) + span) - x) / dz))
    return float(x) + np.arange(-n_lo, n_hi + 1) * dz


def _onestep_values(spec, i, frm, u, dz):
    """One-step density from ``frm`` sampled at offsets u (uniform, step dz).

    When the density has a support edge landing exactly on a sample, that
    sample is replaced by the mean of the one-sided limits, which restores
    O(dz^2) trapezoid accuracy across the jump.
    """
    h = spec.step
    t = spec.grid_time(i)
    sqh = math.sqrt(h)
    m = float(spec.drift.value(t, frm))

    def g(uu):
        return np.asarray(spec.innovations.density(
            t, frm, (np.asarray(uu, dtype=float) - m * h) / sqh)) / sqh

    vals = g(u)
    fam = spec.innovations
    if hasattr(fam, "support_edges"):
        delta = 1e-7 * math.sqrt(h * spec.ellipticity[0])
        for e in fam.support_edges(t, frm):
            a = m * h + sqh * float(e)
            j = int(round((a - u[0]) / dz))
            # alignment check: lattice noise is well below 1e-3 dz, a
            # genuinely unaligned edge sits ~0.5 dz from the nearest node
            if 0 <= j < len(u) and abs(u[j] - a) < 1e-3 * dz:
                vals[j] = 0.5 * (float(g(a - delta)) + float(g(a + delta)))
    return vals


def _edge_jump_correction(spec, i, f, dz):
    """Second-order Euler-Maclaurin correction at an on-lattice kink.

    For a one-step density with value jump [g] and slope jump [g'] at the
    edge offset A, the trapezoid convolution misses dz^2/12 * (f'(y-A)[g]
    - f(y-A)[g']) per output point; f and f' are shifted on-lattice.
    """
    offset = _edge_offset(spec, i)
    if offset is None:
        return 0.0
    h = spec.step
    t = spec.grid_time(i)
    sqh = math.sqrt(h)
    m = float(spec.drift.value(t, 0.0))

    def g(uu):
        return float(spec.innovations.density(t, 0.0, (uu - m * h) / sqh)) / sqh

    delta = 1e-6 * math.sqrt(h * spec.ellipticity[0])
    g_jump = g(offset + delta) - g(offset - delta)
    gp_above = (g(offset + 2 * delta) - g(offset + delta)) / delta
    gp_below = (g(offset - delta) - g(offset - 2 * delta)) / delta
    gp_jump = gp_above - gp_below

    j = int(round(offset / dz))
    fp = np.gradient(f, dz)
    f_shift = np.zeros_like(f)
    fp_shift = np.zeros_like(f)
    if j >= 0:
        f_shift[j:] = f[:len(f) - j] if j else f
        fp_shift[j:] = fp[:len(f) - j] if j else fp
    else:
        f_shift[:j] = f[-j:]
        fp_shift[:j] = fp[-j:]
    return dz * dz / 12.0 * (f_shift * gp_jump - fp_shift * g_jump)


def _ck_translation_invariant(spec, k, x, grid, dz):
    """FFT-convolution CK recursion for x-independent models."""
    from scipy.signal import fftconvolve

    n_off = len(grid) - 1 if len(grid) % 2 == 0 else len(grid)
    u = (np.arange(2 * (n_off // 2) + 1) - n_off // 2) * dz
    f = _onestep_values(spec, 0, float(x), grid - float(x), dz)
    for i in range(1, k):
        kern = _onestep_values(spec, i, 0.0, u, dz)
        f = fftconvolve(f, kern, mode="same") * dz
        f = f + _edge_jump_correction(spec, i, f, dz)
    return f


def _ck_matrix(spec, k, x, grid, dz):
    """Dense-matrix CK recursion for state-dependent models."""
    h = spec.step
    sqh = math.sqrt(h)
    w = np.full(len(grid), dz)
    w[0] = w[-1] = 0.5 * dz

    def step_matrix(i):
        t = spec.grid_time(i)
        m = np.asarray(spec.drift.value(t, grid), dtype=float)
        uu = (grid[:, None] - grid[None, :] - m[None, :] * h) / sqh
        return np.asarray(spec.innovations.density(
            t, grid[None, :], uu)) / sqh

    zs = grid[:: max(1, len(grid) // 5)]
    time_const = bool(
        np.all(np.asarray(spec.drift.dt(0.3 * spec.horizon, zs)) == 0.0)
        and np.all(np.asarray(spec.covariance.dt(0.3 * spec.horizon, zs)) == 0.0))

    t0 = spec.grid_time(0)
    m0 = float(spec.drift.value(t0, x))
    f = np.asarray(spec.innovations.density(
        t0, float(x), (grid - float(x) - m0 * h) / sqh)) / sqh
    mat = None
    for i in range(1, k):
        if mat is None or not time_const:
            mat = step_matrix(i)
        f = mat @ (w * f)
    return f


def ck_chain_density(spec, k, x, grid, tol_mass=1e-5):
    """Exact chain density p_h(0, kh, x, .) by k-fold trapezoid iteration.

    ``grid`` must be uniform (see ck_default_grid); raises GridExtentError
    when mass leaks through the boundary or fails to normalize.
    """
    if not 1 <= k <= spec.steps:
        raise ValueError("need 1 <= k <= n")
    grid = np.asarray(grid, dtype=float)
    dz = float((grid[-1] - grid[0]) / (len(grid) - 1))
    if not np.allclose(np.diff(grid), dz, rtol=1e-9, atol=0.0):
        raise ValueError("ck_chain_density needs a uniform grid")

    if k == 1:
        f = _onestep_values(spec, 0, float(x), grid - float(x), dz)
    elif _is_x_independent(spec):
        f = _ck_translation_invariant(spec, k, x, grid, dz)
    else:
        f = _ck_matrix(spec, k, x, grid, dz)

    out = DensityGrid(axis=grid, values=f, step_index=k)
    edge = (abs(f[0]) + abs(f[-1])) * dz * 20.0
    if edge > tol_mass:
        raise GridExtentError(
            "boundary mass %.3g exceeds tol_mass %.3g; widen the grid"
            % (edge, tol_mass))
    if abs(out.mass - 1.0) > tol_mass:
        raise GridExtentError(
            "mass defect %.3g exceeds tol_mass %.3g (grid too coarse or "
            "too narrow)" % (abs(out.mass - 1.0), tol_mass))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo + kernel density estimation


@dataclass
class MCDensityResult:
    """KDE estimates with plug-in standard errors at the evaluation points."""

    eval_points: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    bandwidth: float
    paths: int
    seed: int


def mc_chain_density(spec, k, x, eval_points, paths=10000, bandwidth=None,
                     seed=0):
    """Simulate the chain and estimate the density at eval_points.

    Each path draws from its own counter-based stream keyed by
    (seed, path index), so results do not depend on scheduling or worker
    count.  The default bandwidth is Silverman's rule scaled by 0.8.
    """
    if paths < 1:
        raise ValueError("paths must be positive")
    h = spec.step
    sqh = math.sqrt(h)
    fam = spec.innovations
    drift = spec.drift
    seed = int(seed)
    final = np.empty(paths)
    for idx in range(paths):
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, idx], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        xi = float(x)
        for i in range(k):
            t = spec.grid_time(i)
            xi = xi + float(drift.value(t, xi)) * h \
                + sqh * float(fam.sample(t, xi, rng))
        final[idx] = xi

    if bandwidth is None:
        sd = float(np.std(final, ddof=1))
        iqr = float(np.subtract(*np.percentile(final, [75, 25])))
        a = min(sd, iqr / 1.34) if iqr > 0.0 else sd
        bandwidth = 0.8 * 0.9 * a * paths ** (-0.2)
    bandwidth = float(bandwidth)

    eval_points = np.asarray(eval_points, dtype=float)
    est = np.empty_like(eval_points)
    se = np.empty_like(eval_points)
    for i, y in enumerate(eval_points.ravel()):
        kern = np.exp(-0.5 * ((y - final) / bandwidth) ** 2) \
            / (bandwidth * _SQRT2PI)
        est.flat[i] = float(np.mean(kern))
        se.flat[i] = float(np.std(kern, ddof=1) / math.sqrt(paths))
    return MCDensityResult(eval_points=eval_points, estimates=est,
                           std_errors=se, bandwidth=bandwidth, paths=paths,
                           seed=seed)


# ---------------------------------------------------------------------------
# closed forms


def ou_exact_density(theta, s, t, x, y):
    """Transition density of dY = -theta Y dt + dW.

    Gaussian with mean x e^{-theta(t-s)} and variance
    (1 - e^{-2 theta(t-s)}) / (2 theta).
    """
    if t <= s:
        raise ValueError("need t > s")
    if theta <= 0.0:
        raise ValueError("theta must be positive")
    dt = t - s
    mean = x * math.exp(-theta * dt)
    var = (1.0 - math.exp(-2.0 * theta * dt)) / (2.0 * theta)
    u = y - mean
    return math.exp(-0.5 * u * u / var) / math.sqrt(2.0 * math.pi * var)
