"""Convergence studies, rate fitting and machine-readable reports.

The harness glues the oracle (chain density), the parametrix series and
the correction terms into the experiment the expansion theorem is about:
errors of the corrected approximation across a ladder of step counts,
with fitted convergence rates.  Reports serialize to a canonical JSON
form that is byte-identical for a fixed (config, seed), independent of
worker count.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .edgeworth import expansion_terms, expansion_weight
from .errors import ConfigError, TransdensError
from .model import ModelSpec, load_model_config
from .quadrature import QuadratureSpec

__all__ = [
    "RateFit", "fit_rate", "ConvergenceRow", "ConvergenceReport",
    "run_convergence", "DEFAULT_PROBES",
]

#: probe offsets y - x used when no probe grid is given
DEFAULT_PROBES = ((0.0, -1.0), (0.0, -0.5), (0.0, 0.25), (0.0, 0.5),
                  (0.0, 1.0))


@dataclass
class RateFit:
    """Least-squares slope of log error against log h."""

    slope: float
    stderr: float

    def to_dict(self):
        return {"slope": self.slope, "stderr": self.stderr}


def fit_rate(rows):
    """Fit log(error) = slope * log(h) + c by least squares.

    rows is a list of (h, error) pairs; needs >= 3 rows with positive
    errors.  The standard error is the usual regression stderr of the
    slope (0 for an exact power law).
    """
    rows = [(float(h), float(e)) for h, e in rows]
    if len(rows) < 3:
        raise ValueError("fit_rate needs at least 3 rows")
    if any(e <= 0.0 for _, e in rows):
        raise ValueError("fit_rate needs positive errors")
    lh = np.log([h for h, _ in rows])
    le = np.log([e for _, e in rows])
    A = np.vstack([lh, np.ones(len(rows))]).T
    coef, _, _, _ = np.linalg.lstsq(A, le, rcond=None)
    fitted = A @ coef
    ssr = float(np.sum((le - fitted) ** 2))
    dof = len(rows) - 2
    sxx = float(np.sum((lh - lh.mean()) ** 2))
    stderr = math.sqrt(ssr / dof / sxx) if dof > 0 and sxx > 0 else 0.0
    return RateFit(slope=float(coef[0]), stderr=stderr)


@dataclass
class ConvergenceRow:
    """Aggregated (max over probes) errors at one step count."""

    n: int
    h: float
    raw_error: float = math.nan
    corrected_error: float = math.nan
    weighted_error: float = math.nan
    status: str = "ok"
    reason: str = ""
    wall_time: float = 0.0

    def to_dict(self, include_timing=False):
        out = {
            "n": self.n, "h": self.h, "raw_error": self.raw_error,
            "corrected_error": self.corrected_error,
            "weighted_error": self.weighted_error,
            "status": self.status, "reason": self.reason,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


_CSV_HEADER = "n,h,raw_error,corrected_error,weighted_error,status,reason"


@dataclass
class ConvergenceReport:
    """Result of a convergence study, serializable to JSON and CSV.

    Wall times are measured and kept on the rows, but excluded from the
    canonical JSON so that reports stay byte-identical across reruns and
    worker counts; pass include_timing=True to to_dict/to_json for a
    non-canonical dump with timings.
    """

    rows: list
    fitted_slopes: dict
    tolerances: dict
    oracles: dict
    seed: int
    probes: list
    n_list: list
    notes: list = field(default_factory=list)

    schema = "transdens.convergence/1"

    def to_dict(self, include_timing=False):
        return {
            "schema": self.schema,
            "seed": self.seed,
            "n_list": list(self.n_list),
            "probes": [[float(x), float(y)] for x, y in self.probes],
            "rows": [r.to_dict(include_timing) for r in self.rows],
            "fitted_slopes": {
                k: (v.to_dict() if isinstance(v, RateFit) else v)
                for k, v in self.fitted_slopes.items()
            },
            "tolerances": dict(self.tolerances),
            "oracles": dict(self.oracles),
            "notes": list(self.notes),
        }

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), sort_keys=True,
                          indent=2) + "\n"

    def to_csv(self, fh):
        fh.write(_CSV_HEADER + "\n")
        for r in self.rows:
            fh.write("%d,%s,%s,%s,%s,%s,%s\n" % (
                r.n, repr(r.h), repr(r.raw_error), repr(r.corrected_error),
                repr(r.weighted_error), r.status,
                r.reason.replace(",", ";")))

    @property
    def ok_rows(self):
        return [r for r in self.rows if r.status == "ok"]


def _as_spec(config):
    if isinstance(config, ModelSpec):
        return config
    return load_model_config(config)


def _probe_terms(spec, probes, q):
    """The n-independent quantities p, pi_1, pi_2 at each probe."""
    return {(x, y): expansion_terms(spec, x, y, q) for x, y in probes}


def _row_for_n(spec, n, probes, terms, q):
    from .oracle import ck_chain_density, ck_default_grid

    sp = spec.with_steps(int(n))
    h = sp.step
    t0 = time.perf_counter()
    by_x = {}
    for x, y in probes:
        by_x.setdefault(float(x), []).append(float(y))
    raw = corrected = weighted = 0.0
    for x, ys in sorted(by_x.items()):
        grid = ck_default_grid(sp, x, extra_points=ys)
        dg = ck_chain_density(sp, sp.steps, x, grid)
        for y in ys:
            ph = float(dg.interp(y))
            t = terms[(x, y)]
            raw = max(raw, abs(ph - t.p_value))
            err = abs(ph - t.p_value - math.sqrt(h) * t.pi1 - h * t.pi2)
            corrected = max(corrected, err)
            weighted = max(weighted, expansion_weight(sp, x, y) * err)
    return ConvergenceRow(n=int(n), h=float(h), raw_error=float(raw),
                          corrected_error=float(corrected),
                          weighted_error=float(weighted),
                          wall_time=time.perf_counter() - t0)


def run_convergence(config, n_list=None, probe_grid=None, seed=0, q=None,
                    workers=1):
    """Convergence study of the corrected expansion against the CK oracle.

    For each probe the parametrix density and the correction terms are
    computed once; for each n only the chain density is recomputed.  A row
    whose oracle or series evaluation fails is flagged with the failure
    reason instead of aborting the study.  The fitted corrected slope uses
    the weighted errors (the theorem's normalization); the raw slope uses
    the uncorrected errors.
    """
    spec = _as_spec(config)
    n_list = sorted(int(n) for n in (n_list or (8, 16, 32, 64)))
    if len(n_list) < 3:
        raise ConfigError("n-list needs at least 3 entries")
    if any(n < 8 for n in n_list):
        raise ConfigError("all step counts must be >= 8")
    probes = [(float(x), float(y)) for x, y in (probe_grid or DEFAULT_PROBES)]
    q = q or QuadratureSpec()

    terms = _probe_terms(spec, probes, q)

    def safe_row(n):
        try:
            return _row_for_n(spec, n, probes, terms, q)
        except TransdensError as exc:
            return ConvergenceRow(n=int(n), h=float(spec.horizon / n),
                                  status="failed",
                                  reason="%s: %s" % (type(exc).__name__, exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(safe_row, n_list))
    else:
        rows = [safe_row(n) for n in n_list]
    rows.sort(key=lambda r: r.n)

    noise_floor = 10.0 * q.tol_quad
    ok = [r for r in rows if r.status == "ok"]
    slopes = {}
    if len(ok) < 3:
        slopes["raw"] = slopes["corrected"] = "insufficient rows"
    elif all(r.corrected_error < noise_floor for r in ok):
        slopes["raw"] = fit_rate([(r.h, r.raw_error) for r in ok]) \
            if all(r.raw_error > 0 for r in ok) else "degenerate"
        slopes["corrected"] = "degenerate (errors at noise floor)"
    else:
        slopes["raw"] = fit_rate([(r.h, r.raw_error) for r in ok])
        slopes["corrected"] = fit_rate([(r.h, r.weighted_error) for r in ok])

    return ConvergenceReport(
        rows=rows,
        fitted_slopes=slopes,
        tolerances={"tol_quad": q.tol_quad, "noise_floor": noise_floor},
        oracles={"p_h": "ck_chain_density",
                 "p": "parametrix_series(rmax=%d)" % q.series_rmax,
                 "corrections": "pi_1/pi_2 time-space convolutions"},
        seed=int(seed),
        probes=probes,
        n_list=n_list,
    )
