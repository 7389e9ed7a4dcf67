"""Problem instances: chain + limiting diffusion, and assumption checks."""

import numpy as np
from dataclasses import dataclass, field

from .coeffs import Coefficient, make_coefficient
from .errors import ConfigError, ModelEvaluationError
from .innovations import InnovationFamily, make_family
from .multiindex import scalar_order

# Fixed Gauss-Legendre rule for time averages (exact for affine-in-t presets).
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class ModelSpec:
    """Immutable problem instance: Markov chain and its diffusion limit.

    Parameters
    ----------
    drift, covariance : Coefficient
        m(t, x) and sigma(t, x) with analytic derivatives.
    innovations : InnovationFamily
        Innovation density family; its variance must equal ``covariance``.
    horizon : float
        T in (0, 1].
    steps : int
        n >= 2; the step is h = T/n, always stored as the ratio.
    ellipticity : tuple
        Declared (sigma_*, sigma^*) bounds on the covariance.
    """

    def __init__(self, drift, covariance, innovations, horizon, steps,
                 ellipticity=(0.1, 10.0), dim=1):
        if dim != 1:
            raise NotImplementedError("numerical engine targets d = 1")
        if not isinstance(drift, Coefficient) or not isinstance(covariance, Coefficient):
            raise TypeError("drift and covariance must be Coefficient instances")
        if not isinstance(innovations, InnovationFamily):
            raise TypeError("innovations must be an InnovationFamily")
        if not 0.0 < horizon <= 1.0:
            raise ValueError("horizon must lie in (0, 1]")
        if steps < 2:
            raise ValueError("steps must be >= 2")
        lo, hi = ellipticity
        if not 0.0 < lo <= hi:
            raise ValueError("ellipticity bounds must satisfy 0 < lower <= upper")
        self.dim = 1
        self.drift = drift
        self.covariance = covariance
        self.innovations = innovations
        self.horizon = float(horizon)
        self.steps = int(steps)
        self.ellipticity = (float(lo), float(hi))

    @property
    def step(self):
        """h = T/n, derived, never stored independently."""
        return self.horizon / self.steps

    def with_steps(self, steps):
        """Copy of this spec with a different step count (same horizon)."""
        return ModelSpec(self.drift, self.covariance, self.innovations,
                         self.horizon, steps, self.ellipticity)

    def grid_time(self, i):
        return i * self.step


def integrated_coeffs(spec, s, t, y):
    """Time integrals (m(s,t,y), sigma(s,t,y)) of drift and covariance.

    Exact per coefficient preset.  Raises on t <= s or non-finite values.
    """
    if not (0.0 <= s < t <= spec.horizon + 1e-12):
        raise ValueError("need 0 <= s < t <= T (got s=%r, t=%r)" % (s, t))
    m_int = spec.drift.integral(s, t, y)
    sig_int = spec.covariance.integral(s, t, y)
    if not (np.all(np.isfinite(m_int)) and np.all(np.isfinite(sig_int))):
        raise ModelEvaluationError("non-finite integrated coefficients at y=%r" % (y,))
    if np.any(sig_int <= 0.0):
        raise ModelEvaluationError("integrated covariance not positive at y=%r" % (y,))
    return m_int, sig_int


def averaged_cumulant(spec, nu, s, t, y):
    """Time average (t-s)^(-1) * int_s^t chi_nu(u, y) du by quadrature."""
    k = scalar_order(nu)
    if s >= t:
        raise ValueError("need s < t")
    u = 0.5 * (t + s) + 0.5 * (t - s) * _GL_NODES
    vals = np.array([np.asarray(spec.innovations.cumulant(k, ui, y), dtype=float)
                     for ui in u])
    w = (0.5 * _GL_WEIGHTS)  # average, so the (t-s)/2 Jacobian cancels
    return np.tensordot(w, vals, axes=(0, 0))


def is_state_independent(spec):
    """True when one-step transitions are translation invariant in x.

    Decided by probing drift, covariance and innovation density at a few
    times and state pairs; coefficients are assumed smooth, so agreement
    at the probes to 1e-13 is conclusive for the preset catalogue.
    """
    zs = np.linspace(-3.0, 3.0, 7)
    for t in (0.0, 0.37 * spec.horizon, 0.81 * spec.horizon):
        for xa, xb in ((-0.9, 0.6), (0.0, 1.3)):
            if not np.allclose(spec.drift.value(t, xa), spec.drift.value(t, xb),
                               rtol=0.0, atol=1e-13):
                return False
            if not np.allclose(spec.covariance.value(t, xa),
                               spec.covariance.value(t, xb),
                               rtol=0.0, atol=1e-13):
                return False
            qa = np.asarray(spec.innovations.density(t, xa, zs))
            qb = np.asarray(spec.innovations.density(t, xb, zs))
            if not np.allclose(qa, qb, rtol=0.0, atol=1e-13):
                return False
    return True


def chain_step_sums(spec, j, k, y):
    """Riemann sums mu_{j,k}(y) = h * sum m(ih, y) and V_{j,k}(y) likewise.

    These are the frozen chain's exact mean shift and variance over steps
    j..k-1, the grid analogue of the integrated coefficients.
    """
    h = spec.step
    ts = h * np.arange(j, k)
    mu = h * sum(spec.drift.value(ti, y) for ti in ts)
    var = h * sum(spec.covariance.value(ti, y) for ti in ts)
    return mu, var


# ---------------------------------------------------------------------------
# assumption validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, name, passed, worst, detail=""):
        self.checks.append(CheckResult(name, bool(passed), float(worst), detail))

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "worst": c.worst,
                 "detail": c.detail}
                for c in self.checks
            ],
            "notes": list(self.notes),
        }


def default_probes(spec, n_time=3, n_space=5):
    """Probe plan: a small (t, x) grid over [0, T] x [-2, 2]."""
    ts = np.linspace(0.0, spec.horizon, n_time)
    xs = np.linspace(-2.0, 2.0, n_space)
    return [(float(t), float(x)) for t in ts for x in xs]


def _moment_grid(spec, t, x, n_nodes=6001, width=60.0):
    """z-grid wide enough for 4th-moment quadrature of q(t, x, .).

    Families with a support edge get a grid starting exactly at the edge;
    integrating across the density jump with a uniform trapezoid rule
    would otherwise stall at first order.
    """
    s = np.sqrt(float(spec.covariance.value(t, x)))
    lo = -width * s
    fam = spec.innovations
    edged = hasattr(fam, "support_edges")
    if edged:
        lo = max(lo, float(fam.support_edges(t, x)[0]))
    z = np.linspace(lo, width * s, n_nodes)
    q = np.asarray(fam.density(t, x, z), dtype=float)
    if edged:
        # densities use an open inequality at the edge; the trapezoid
        # endpoint needs the right-limit value
        q[0] = float(fam.density(t, x, z[0] + 1e-9 * s))
    return z, q


def _trapz(y, x):
    return np.trapezoid(y, x) if hasattr(np, "trapezoid") else np.trapz(y, x)


def validate_assumptions(spec, probes=None, tol_quad=1e-6):
    """Numeric spot-checks of the standing assumptions on a probe plan.

    Failures are report entries, never exceptions.  Checks: density
    normalization, zero mean, covariance consistency, declared third/fourth
    cumulants against moment quadrature, the ellipticity window and
    coefficient boundedness.
    """
    if probes is None:
        probes = default_probes(spec)
    if not probes:
        raise ValueError("probe plan must be non-empty")
    report = ValidationReport()
    lo, hi = spec.ellipticity

    worst = dict.fromkeys(
        ["mass", "mean", "cov", "chi3", "chi4", "ellip", "bounded"], 0.0)
    ellip_ok = True
    bounded_ok = True
    for (t, x) in probes:
        sig = float(spec.covariance.value(t, x))
        m = float(spec.drift.value(t, x))
        if not (np.isfinite(sig) and np.isfinite(m)):
            bounded_ok = False
            worst["bounded"] = np.inf
            continue
        worst["bounded"] = max(worst["bounded"], abs(m), abs(sig))
        if not lo <= sig <= hi:
            ellip_ok = False
            worst["ellip"] = max(worst["ellip"], lo - sig, sig - hi)
        if sig <= 0.0:
            continue
        z, q = _moment_grid(spec, t, x)
        mass = _trapz(q, z)
        mean = _trapz(z * q, z)
        m2 = _trapz(z * z * q, z)
        m3 = _trapz(z ** 3 * q, z)
        m4 = _trapz(z ** 4 * q, z)
        worst["mass"] = max(worst["mass"], abs(mass - 1.0))
        worst["mean"] = max(worst["mean"], abs(mean))
        worst["cov"] = max(worst["cov"], abs(m2 - sig))
        chi3_decl = float(spec.innovations.cumulant(3, t, x))
        chi4_decl = float(spec.innovations.cumulant(4, t, x))
        worst["chi3"] = max(worst["chi3"], abs(m3 - chi3_decl))
        worst["chi4"] = max(worst["chi4"], abs((m4 - 3.0 * m2 * m2) - chi4_decl))

    quad_tol = max(tol_quad, 1e-6) * 100.0  # moment quadrature is trapezoid-limited
    report.add("density_normalization", worst["mass"] < quad_tol, worst["mass"])
    report.add("zero_mean", worst["mean"] < quad_tol, worst["mean"])
    report.add("covariance_consistency", worst["cov"] < quad_tol * 10, worst["cov"])
    report.add("third_cumulant", worst["chi3"] < quad_tol * 10, worst["chi3"])
    report.add("fourth_cumulant", worst["chi4"] < quad_tol * 100, worst["chi4"])
    report.add("ellipticity_window", ellip_ok, worst["ellip"],
               "declared (%g, %g)" % (lo, hi))
    report.add("coefficient_boundedness", bounded_ok and np.isfinite(worst["bounded"]),
               worst["bounded"])
    report.notes.append(
        "smoothness of coefficients (bounded derivatives, Hoelder 6th "
        "derivative of the covariance): assumed, satisfied by presets by "
        "construction; parameter ranges are not checked")
    return report


# ---------------------------------------------------------------------------
# config loader (structured-text key/value format)

_TOP_KEYS = {"dim", "horizon", "steps", "ellipticity", "drift", "covariance",
             "innovation"}


def parse_config_text(text):
    """Parse 'key = value' lines (with dotted keys) into a nested dict."""
    tree = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected 'key = value'" % lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        parts = key.split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("line %d: key %r clashes" % (lineno, key))
        if parts[-1] in node:
            raise ConfigError("line %d: duplicate key %r" % (lineno, key))
        node[parts[-1]] = value
    return tree


def _coerce(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def load_model_config(path_or_text):
    """Build a ModelSpec from a config file path or config text.

    Unknown keys are rejected.
    """
    text = path_or_text
    if "\n" not in text and "=" not in text:
        with open(path_or_text) as fh:
            text = fh.read()
    tree = parse_config_text(text)

    unknown = set(tree) - _TOP_KEYS
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
    for required in ("horizon", "steps", "drift", "covariance", "innovation"):
        if required not in tree:
            raise ConfigError("missing config key %r" % required)

    def build_coeff(section, what):
        if not isinstance(section, dict) or "preset" not in section:
            raise ConfigError("%s needs a 'preset' key" % what)
        params = {k: _coerce(v) for k, v in section.items() if k != "preset"}
        try:
            return make_coefficient(section["preset"], **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError("%s: %s" % (what, exc)) from exc

    drift = build_coeff(tree["drift"], "drift")
    covariance = build_coeff(tree["covariance"], "covariance")

    innov = tree["innovation"]
    if not isinstance(innov, dict) or "family" not in innov:
        raise ConfigError("innovation needs a 'family' key")
    iparams = {k: _coerce(v) for k, v in innov.items() if k != "family"}
    try:
        innovations = make_family(innov["family"], covariance, **iparams)
    except (TypeError, ValueError) as exc:
        raise ConfigError("innovation: %s" % exc) from exc

    ellip = tree.get("ellipticity", {})
    if ellip and (set(ellip) - {"lower", "upper"}):
        raise ConfigError("ellipticity accepts only lower/upper")
    bounds = (float(ellip.get("lower", 0.1)), float(ellip.get("upper", 10.0)))

    dim = int(tree.get("dim", 1))
    return ModelSpec(drift, covariance, innovations,
                     horizon=float(tree["horizon"]), steps=int(tree["steps"]),
                     ellipticity=bounds, dim=dim)
