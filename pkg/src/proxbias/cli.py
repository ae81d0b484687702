"""Command-line entry point.  Everything runs in-process.

Exit codes: 0 success, 1 precondition or verification failure, 2 when the
only problem is a formula pole (flagged rows or a pole-valued report).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import bias as B
from .bridge import bridge_ace, fredholm_residual, solve_outcome_bridge_base, standard_grid
from .completeness import certify_completeness
from .errors import (CorruptMomentsError, DegenerateComparisonError, IdentificationError,
                     InvalidSpecError, NoBridgeError, QuadratureError, SetupError,
                     SingularSystemError)
from .estimators import fit_or, fit_proximal_gmm, fit_unadj, population_gmm
from .lsem import LsemSpec, check, sample
from .moments import DEFAULT_ORDER, MomentCache
from .sweep import BUDGETS, SweepConfig, load_preset, preset_names, run_sweep, verify_all

EXIT_OK, EXIT_FAIL, EXIT_POLE = 0, 1, 2

_PRECONDITION_ERRORS = (InvalidSpecError, SetupError, CorruptMomentsError, NoBridgeError,
                        SingularSystemError, IdentificationError, QuadratureError,
                        KeyError, ValueError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; exit code 2 is reserved for pole warnings."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON spec or sweep config file")
    g.add_argument("--preset", help="name of a shipped preset (see `proxbias presets`)")
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--threads", type=_positive, default=1)
    g.add_argument("--quadrature-order", type=_positive, dest="order",
                   help=f"Gauss-Hermite order (default {DEFAULT_ORDER}; 48 for completeness)")
    g.add_argument("--out", help="write the result here instead of stdout")
    g.add_argument("--cache-dir", help="persist treatment moments between runs")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(
        prog="proxbias",
        description="Asymptotic bias of proximal causal estimators in linear SEMs.")
    parser.add_argument("--version", action="version", version=f"proxbias {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("presets", parents=[common], help="list shipped presets")

    sp = sub.add_parser("sweep", parents=[common], help="run a bias sweep, emit CSV")
    sp.add_argument("--no-cache", action="store_true", help="recompute moments at every row")

    bp = sub.add_parser("bias", parents=[common], help="closed-form biases for one spec")
    bp.add_argument("--setup", choices=[B.ZW, B.AY, B.GENERAL])

    fp = sub.add_parser("fit", parents=[common], help="simulate data and fit the estimators")
    fp.add_argument("-n", "--n", type=_positive, default=100_000, dest="n")
    fp.add_argument("--form", choices=["full", "linear"], default="full")

    sub.add_parser("certify-bridge", parents=[common],
                   help="Fredholm residual of the closed-form outcome bridge")

    cp = sub.add_parser("certify-completeness", parents=[common],
                        help="tabulate E[g(U) | z, a, x] for the completeness counterexample")
    cp.add_argument("--c-shift", type=float, default=0.0,
                    help="perturb the cubic constant (the certificate should then fail)")

    vp = sub.add_parser("verify", parents=[common], help="run the verification batteries")
    vp.add_argument("--family", choices=["all", "zw", "ay", "general"], default="all")
    vp.add_argument("--budget", default="default",
                    help=f"draws per battery or one of {', '.join(BUDGETS)}")
    return parser


def _load_doc(args, default_preset: str | None = None) -> dict:
    if args.config and args.preset:
        raise ValueError("give --config or --preset, not both")
    if args.config:
        return json.loads(Path(args.config).read_text())
    name = args.preset or default_preset
    if name is None:
        raise ValueError("this command needs --config or --preset")
    return load_preset(name)


def _load_spec(args, default_preset: str | None = None) -> LsemSpec:
    doc = _load_doc(args, default_preset)
    return check(LsemSpec.from_dict(doc.get("base_spec", doc)))


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# subcommands


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = _load_doc(args)
    if "axis" not in doc:
        raise ValueError("sweep needs a sweep config (with an 'axis' entry)")
    doc = {**doc, "order": args.order or doc.get("order", DEFAULT_ORDER)}
    if args.seed:
        doc["seed"] = args.seed
    config = SweepConfig.from_dict(doc)
    cache = MomentCache(args.cache_dir)
    result = run_sweep(config, threads=args.threads, cache=cache, use_cache=not args.no_cache)
    out = args.out or config.output
    text = result.to_csv(out)
    if not out:
        sys.stdout.write(text)
    poles = int(sum(result.column("pole")))
    if poles:
        print(f"warning: {poles} row(s) sit on a proximal-bias pole", file=sys.stderr)
        return EXIT_POLE
    return EXIT_OK


def cmd_bias(args) -> int:
    spec = _load_spec(args)
    mom = MomentCache(args.cache_dir).get(spec, args.order or DEFAULT_ORDER)
    rep = B.bias_report(spec, mom, setup=args.setup)
    doc = rep.to_dict()
    if rep.setup == B.ZW and not rep.pole:
        try:
            cmp = B.compare_biases_zw(spec, mom)
            doc["comparison"] = {k: v for k, v in vars(cmp).items() if k != "extras"}
        except (SetupError, DegenerateComparisonError):
            pass
    _emit(args, _json(doc))
    return EXIT_POLE if rep.pole else EXIT_OK


def cmd_fit(args) -> int:
    spec = _load_spec(args)
    data = sample(spec, args.n, args.seed)
    fits = [fit_proximal_gmm(data, args.form), fit_or(data), fit_unadj(data)]
    doc = {"n": args.n, "seed": args.seed, "true_ace": spec.gamma_a,
           "fits": [f.to_dict() for f in fits]}
    _emit(args, _json(doc))
    return EXIT_OK


def cmd_certify_bridge(args) -> int:
    spec = _load_spec(args, "base_case")
    bridge = solve_outcome_bridge_base(spec)
    rows = []
    for z, a, x in standard_grid(spec):
        res = fredholm_residual(bridge, spec, [(z, a, x)], args.order or DEFAULT_ORDER)
        xv = float(x[0]) if spec.dims.q else 0.0
        rows.append((float(np.ravel(z)[0]), int(a), xv, res))
    worst = max(r[3] for r in rows)
    gap = float(abs(population_gmm(spec, "full", order=args.order or DEFAULT_ORDER).coef.as_array()
                    - bridge.as_array()).max())
    _emit(args, _csv(["z", "a", "x", "residual"], rows))
    print(f"max residual {worst:.3e}; gmm coefficient gap {gap:.3e}; "
          f"bridge ACE {bridge_ace(bridge, spec)!r}", file=sys.stderr)
    return EXIT_OK if worst < 1e-8 and gap < 1e-10 else EXIT_FAIL


def cmd_certify_completeness(args) -> int:
    spec = _load_spec(args, "completeness")
    cert = certify_completeness(spec, order=args.order or 48, c_shift=args.c_shift)
    _emit(args, _csv(["z", "a", "x", "mean_g"], cert.rows))
    print(f"max |E[g|z,a,x]| {cert.max_abs_mean:.3e}; max |g| on unit grid "
          f"{cert.max_abs_g:.3e}; {'PASS' if cert.passed else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if cert.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    budget = int(args.budget) if args.budget.isdigit() else args.budget
    report = verify_all(args.family, budget, args.seed)
    _emit(args, "\n".join(report.lines()) + "\n")
    return EXIT_OK if report.passed else EXIT_FAIL


_COMMANDS = {
    "presets": cmd_presets, "sweep": cmd_sweep, "bias": cmd_bias, "fit": cmd_fit,
    "certify-bridge": cmd_certify_bridge, "certify-completeness": cmd_certify_completeness,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InvalidSpecError as exc:
        for v in exc.violations:
            print(f"invalid spec: {v}", file=sys.stderr)
        return EXIT_FAIL
    except _PRECONDITION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
