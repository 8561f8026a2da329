"""Command-line entry point.

Subcommands: simulate, check, impose, loglik, table1, table2, table3,
table5, fig2, mcmc. Every run needs an explicit --seed (reproducibility by
construction; there is no wall-clock default). Exit codes: 0 on success, 1
when more than 10% of replications fail (or a check verdict is negative),
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import MomentisError
from .experiments import (EXPERIMENTS, ExperimentConfig, run_experiment,
                          simulate_dataset, write_json)

_SAMPLERS = ("normal", "t", "nth", "mixture")


def _read_config_file(path):
    """key = value lines; '#' starts a comment; values parsed as JSON when
    possible, else kept as strings."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"bad config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _add_common(p):
    p.add_argument("--seed", type=int, required=True,
                   help="master seed; all randomness derives from it")
    p.add_argument("--out", default=None, help="output directory (default: ./out_<cmd>)")
    p.add_argument("--config", default=None,
                   help="key=value file supplying defaults for any flag")
    p.add_argument("--reps", type=int, default=None,
                   help="replications (desk-scale default per experiment)")
    p.add_argument("--evals", type=int, default=None,
                   help="likelihood evaluations per replication")
    p.add_argument("--samples", type=int, default=None,
                   help="importance samples S per evaluation")
    p.add_argument("--n-moment", type=float, default=2.0, dest="n_moment",
                   help="weight-moment order n to impose (default 2)")
    p.add_argument("--pi", type=float, default=0.1,
                   help="mixture weight on the heavy component (default 0.1)")
    p.add_argument("--eps-inflate", type=float, default=0.05, dest="eps_inflate",
                   help="variance inflation factor per imposition round (default 0.05)")
    p.add_argument("--sampler", choices=_SAMPLERS, default="mixture",
                   help="importance density for loglik/mcmc runs")
    p.add_argument("--nu", type=float, default=5.0,
                   help="degrees of freedom of the t comparison sampler (default 5)")
    p.add_argument("--preset", default="", help="named parameter preset")
    p.add_argument("--full-scale", action="store_true", dest="full_scale",
                   help="paper-scale replication counts instead of desk scale")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes for replication fan-out")
    p.add_argument("--dataset", default=None, help="dataset JSON file")
    p.add_argument("--psi", default=None,
                   help="comma list beta...,phi,sigma2 overriding the dataset DGP")
    p.add_argument("--iterations", type=int, default=None, help="MCMC iterations")
    p.add_argument("--burn-in", type=int, default=None, dest="burn_in",
                   help="MCMC burn-in iterations")
    p.add_argument("--v", default=None,
                   help="comma list of constant approximating variances (fig2)")


def build_parser():
    ap = argparse.ArgumentParser(prog="momentis",
                                 description="Moment-constrained importance sampling experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a dataset and write it as JSON")
    sim.add_argument("--kind", choices=("poisson_ssm", "panel_ar1"), required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True, help="output JSON path")
    sim.add_argument("--beta", required=True,
                     help="intercept (poisson_ssm) or comma list (panel_ar1)")
    sim.add_argument("--phi", type=float, required=True)
    sim.add_argument("--sigma2", type=float, required=True)
    sim.add_argument("--T", type=int, required=True)
    sim.add_argument("--m", type=int, default=20, help="panels (panel_ar1 only)")

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _add_common(p)
    return ap


def _cfg_from_args(args):
    overrides = _read_config_file(args.config) if args.config else {}
    def pick(key, current, absent=None):
        return overrides.get(key, current) if current == absent or current is None else current

    psi = args.psi or overrides.get("psi")
    if isinstance(psi, str):
        psi = [float(v) for v in psi.split(",")]
    v = args.v or overrides.get("v")
    if isinstance(v, str):
        v = [float(x) for x in v.split(",")]
    out = args.out or overrides.get("out") or f"out_{args.command}"
    return ExperimentConfig(
        experiment=args.command,
        seed=args.seed,
        out=out,
        preset=pick("preset", args.preset, absent=""),
        reps=pick("reps", args.reps),
        evals=pick("evals", args.evals),
        samples=pick("samples", args.samples),
        n_moment=pick("n_moment", args.n_moment, absent=2.0),
        pi=pick("pi", args.pi, absent=0.1),
        eps_inflate=pick("eps_inflate", args.eps_inflate, absent=0.05),
        sampler=pick("sampler", args.sampler, absent="mixture"),
        nu=pick("nu", args.nu, absent=5.0),
        full_scale=bool(args.full_scale or overrides.get("full_scale", False)),
        workers=pick("workers", args.workers, absent=1),
        dataset=pick("dataset", args.dataset),
        psi=psi,
        v_values=v if v else [5.0, 10.0, 25.0, 40.0],
        iterations=pick("iterations", args.iterations),
        burn_in=pick("burn_in", args.burn_in),
    )


def main(argv=None):
    args = build_parser().parse_args(argv)

    if args.command == "simulate":
        beta = [float(b) for b in str(args.beta).split(",")]
        if args.kind == "poisson_ssm":
            params = {"beta": beta[0], "phi": args.phi, "sigma2": args.sigma2, "T": args.T}
        else:
            params = {"beta": beta, "phi": args.phi, "sigma2": args.sigma2,
                      "m": args.m, "T": args.T}
        ds = simulate_dataset(args.kind, params, args.seed)
        write_json(args.out, ds)
        print(f"wrote {args.out}")
        return 0

    try:
        cfg = _cfg_from_args(args)
        report = run_experiment(cfg)
    except MomentisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    failures = report.get("failures", [])
    reps = report.get("results", {}).get("replications", None)
    print(json.dumps(report.get("results", {}), indent=1, sort_keys=True))
    if args.command == "check" and not report["results"]["condition_holds"]:
        return 1
    if reps and len(failures) > 0.10 * reps:
        print(f"{len(failures)}/{reps} replications failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
