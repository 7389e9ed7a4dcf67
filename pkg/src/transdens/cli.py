"""Command-line front end: density/expand/converge/validate subcommands.

Exit codes: 0 success, 2 accuracy failure (an oracle or series evaluation
could not meet its tolerance, or an assumption check failed), 3 config
error (bad config file, bad flags, unreadable paths).
"""

import argparse
import json
import sys

from .edgeworth import expansion_terms, pi_tilde_1, pi_tilde_2
from .errors import ConfigError, TransdensError
from .harness import DEFAULT_PROBES, run_convergence
from .kernels import frozen_density
from .model import load_model_config, validate_assumptions
from .parametrix import frozen_chain_density, parametrix_p, parametrix_p_h
from .quadrature import QuadratureSpec

EXIT_OK = 0
EXIT_ACCURACY = 2
EXIT_CONFIG = 3

DENSITY_CSV_HEADER = "x,y,p,p_h,p_tilde,p_tilde_h"
EXPAND_CSV_HEADER = "x,y,p,pi1,pi2,pi_tilde_1,pi_tilde_2,corrected"


def parse_probes(text):
    """Parse a probe list of the form 'x,y;x,y;...'."""
    probes = []
    for i, chunk in enumerate(text.split(";")):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError("probe %d: expected 'x,y', got %r" % (i, chunk))
        try:
            probes.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError("probe %d: non-numeric entry %r" % (i, chunk))
    if not probes:
        raise ConfigError("empty probe list")
    return probes


def parse_n_list(text):
    try:
        return [int(tok) for tok in text.replace(";", ",").split(",") if tok.strip()]
    except ValueError:
        raise ConfigError("bad --n value %r" % text)


def _load_spec(args):
    if not args.config:
        raise ConfigError("--config is required")
    try:
        spec = load_model_config(args.config)
    except OSError as exc:
        raise ConfigError("cannot read config: %s" % exc)
    if getattr(args, "n", None):
        ns = parse_n_list(args.n)
        if len(ns) == 1:
            spec = spec.with_steps(ns[0])
    return spec


def _quadrature(args):
    if getattr(args, "tol", None):
        return QuadratureSpec(tol_quad=float(args.tol))
    return QuadratureSpec()


def _emit(args, text):
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _rows_json(schema, rows, spec):
    payload = {
        "schema": schema,
        "horizon": spec.horizon,
        "steps": spec.steps,
        "rows": rows,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def cmd_density(args):
    spec = _load_spec(args)
    q = _quadrature(args)
    probes = parse_probes(args.probes) if args.probes else list(DEFAULT_PROBES)
    T, n = spec.horizon, spec.steps
    rows = []
    for x, y in probes:
        p = parametrix_p(spec, 0.0, T, x, y, q)
        ph = parametrix_p_h(spec, 0, n, x, y, q)
        rows.append({
            "x": x, "y": y,
            "p": float(p.value),
            "p_h": float(ph.value),
            "p_tilde": float(frozen_density(spec, 0.0, T, x, y)),
            "p_tilde_h": float(frozen_chain_density(spec, 0, n, x, y, q)),
        })
    if args.format == "csv":
        lines = [DENSITY_CSV_HEADER]
        for r in rows:
            lines.append(",".join(repr(r[k]) for k in
                                  ("x", "y", "p", "p_h", "p_tilde",
                                   "p_tilde_h")))
        _emit(args, "\n".join(lines) + "\n")
    else:
        _emit(args, _rows_json("transdens.density/1", rows, spec))
    return EXIT_OK


def cmd_expand(args):
    spec = _load_spec(args)
    q = _quadrature(args)
    probes = parse_probes(args.probes) if args.probes else list(DEFAULT_PROBES)
    T = spec.horizon
    rows = []
    for x, y in probes:
        terms = expansion_terms(spec, x, y, q)
        rows.append({
            "x": x, "y": y,
            "p": terms.p_value,
            "pi1": terms.pi1,
            "pi2": terms.pi2,
            "pi_tilde_1": float(pi_tilde_1(spec, 0.0, T, x, y)),
            "pi_tilde_2": float(pi_tilde_2(spec, 0.0, T, x, y)),
            "corrected": terms.corrected,
        })
    if args.format == "csv":
        lines = [EXPAND_CSV_HEADER]
        for r in rows:
            lines.append(",".join(repr(r[k]) for k in
                                  ("x", "y", "p", "pi1", "pi2",
                                   "pi_tilde_1", "pi_tilde_2", "corrected")))
        _emit(args, "\n".join(lines) + "\n")
    else:
        _emit(args, _rows_json("transdens.expand/1", rows, spec))
    return EXIT_OK


def cmd_converge(args):
    q = _quadrature(args)
    n_list = parse_n_list(args.n) if args.n else None
    probes = parse_probes(args.probes) if args.probes else None
    try:
        spec = load_model_config(args.config)
    except OSError as exc:
        raise ConfigError("cannot read config: %s" % exc)
    report = run_convergence(spec, n_list=n_list, probe_grid=probes,
                             seed=args.seed, q=q, workers=args.workers)
    if args.format == "csv":
        import io

        buf = io.StringIO()
        report.to_csv(buf)
        _emit(args, buf.getvalue())
    else:
        _emit(args, report.to_json())
    if any(r.status != "ok" for r in report.rows):
        return EXIT_ACCURACY
    return EXIT_OK


def cmd_validate(args):
    spec = _load_spec(args)
    report = validate_assumptions(spec)
    if args.format == "csv":
        lines = ["name,passed,worst,detail"]
        for c in report.checks:
            lines.append("%s,%s,%s,%s" % (c.name, c.passed, repr(c.worst),
                                          c.detail.replace(",", ";")))
        _emit(args, "\n".join(lines) + "\n")
    else:
        _emit(args, json.dumps(report.to_dict(), sort_keys=True, indent=2)
              + "\n")
    return EXIT_OK if report.passed else EXIT_ACCURACY


def build_parser():
    parser = argparse.ArgumentParser(
        prog="transdens",
        description="Transition densities of diffusions and discretized "
                    "chains: parametrix series, correction terms, "
                    "convergence studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False, workers=False):
        p.add_argument("--config", required=True,
                       help="model config file (key = value lines)")
        p.add_argument("--n", help="step count, or comma list for converge")
        p.add_argument("--probes",
                       help="semicolon-separated probe pairs 'x,y;x,y'")
        p.add_argument("--tol", type=float,
                       help="quadrature tolerance (default 1e-6)")
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        if seed:
            p.add_argument("--seed", type=int, default=0,
                           help="seed recorded in the report (also used by "
                                "Monte Carlo components)")
        if workers:
            p.add_argument("--workers", type=int, default=1,
                           help="parallel rows for the convergence study")

    p = sub.add_parser("density",
                       help="evaluate p, p_h, p~, p~_h at probe points")
    common(p)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("expand",
                       help="evaluate pi~_1, pi~_2, pi_1, pi_2 at probes")
    common(p)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("converge", help="convergence-rate study")
    common(p, seed=True, workers=True)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("validate", help="check standing assumptions")
    common(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; remap to the config exit code
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except TransdensError as exc:
        print("accuracy failure: %s: %s" % (type(exc).__name__, exc),
              file=sys.stderr)
        return EXIT_ACCURACY


if __name__ == "__main__":
    sys.exit(main())
