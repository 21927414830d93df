"""Command-line front end: experiment subcommands over the harness engine.

Every subcommand assembles a one-experiment configuration and hands it to
``harness.run``, so CLI runs and config-file runs produce identical reports.
Exit codes: 0 all PASS, 1 numeric failure, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import sys

from .benchmarks import list_benchmarks
from .errors import ConfigError
from .harness import run, write_report

_COMMON = ("--seed", "--out", "--threads")


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--seed", type=int, default=None, help="RNG seed (64-bit)")
    sp.add_argument("--out", type=str, default=None,
                    help="output directory (default: $BSDELAB_OUT)")
    sp.add_argument("--threads", type=int, default=None, help="worker threads")


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsdelab",
                                 description="stochastic recursive control laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="execute an experiment config file")
    sp.add_argument("--config", required=True, help="path to the JSON configuration")
    _add_common(sp)

    sub.add_parser("list-benchmarks", help="print registered benchmarks")

    sp = sub.add_parser("simulate", help="forward SDE ensemble with moment checks")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--M", type=int, default=10_000)
    sp.add_argument("--N", type=int, default=100)
    sp.add_argument("--dump", type=str, default=None, help="ensemble dump filename")
    _add_common(sp)

    sp = sub.add_parser("solve-bsde", help="backward solve against the benchmark oracle")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--M", type=int, default=10_000)
    sp.add_argument("--N", type=int, default=100)
    sp.add_argument("--tol", type=float, default=None)
    sp.add_argument("--semigroup-delta", type=float, default=None,
                    help="also check the nested-solve consistency at this delta")
    _add_common(sp)

    sp = sub.add_parser("verify-representation", help="driver recovery probe or rate fit")
    sp.add_argument("--family", default="constant",
                    help="driver family (constant, linear_y, discount, abs_z, step_t, zero)")
    sp.add_argument("--value", type=float, default=None, help="family parameter")
    sp.add_argument("--t", type=float, default=0.0)
    sp.add_argument("--y", type=float, default=0.0)
    sp.add_argument("--z", type=_floats, default=[0.0])
    sp.add_argument("--M", type=int, default=10_000)
    sp.add_argument("--epsilons", type=_floats, default=None, help="probe mode eps list")
    sp.add_argument("--ladder", type=_floats, default=None, help="rate mode eps ladder")
    sp.add_argument("--replications", type=int, default=32)
    _add_common(sp)

    sp = sub.add_parser("solve-hjb", help="monotone finite-difference solve")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--h", type=float, default=None)
    sp.add_argument("--check-halving", action="store_true")
    _add_common(sp)

    sp = sub.add_parser("estimate-value", help="dynamic-programming Monte Carlo value")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--inner-steps", type=int, default=10)
    sp.add_argument("--M", type=int, default=4000)
    _add_common(sp)

    sp = sub.add_parser("check-dpp", help="dynamic-programming residual")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--deltas", type=_floats, default=[0.25, 0.5])
    sp.add_argument("--M", type=int, default=4000)
    _add_common(sp)

    sp = sub.add_parser("check-viscosity", help="variational inequality checks")
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--points", type=int, default=50)
    _add_common(sp)

    sp = sub.add_parser("cross-validate", help="FD vs MC vs closed form")
    sp.add_argument("--benchmark", required=True)
    _add_common(sp)
    return ap


def _experiment_from_args(args: argparse.Namespace) -> dict:
    cmd = args.command
    if cmd == "simulate":
        exp = {"kind": "simulate", "benchmark": args.benchmark, "M": args.M, "N": args.N}
        if args.dump:
            exp["dump"] = args.dump
        return exp
    if cmd == "solve-bsde":
        exp = {"kind": "solve-bsde", "benchmark": args.benchmark, "M": args.M, "N": args.N}
        if args.tol is not None:
            exp["tol"] = args.tol
        if args.semigroup_delta is not None:
            exp["semigroup_delta"] = args.semigroup_delta
        return exp
    if cmd == "verify-representation":
        gen = {"family": args.family}
        if args.value is not None:
            key = {"constant": "value", "linear_y": "coef", "discount": "rate",
                   "step_t": "t_star"}.get(args.family, "value")
            gen[key] = args.value
        exp = {"kind": "verify-representation", "generator": gen, "t": args.t,
               "y": args.y, "z": args.z, "M": args.M}
        if args.ladder:
            exp["ladder"] = args.ladder
            exp["replications"] = args.replications
        else:
            exp["epsilons"] = args.epsilons or [0.5, 0.1, 0.01]
        return exp
    if cmd == "solve-hjb":
        exp = {"kind": "solve-hjb", "benchmark": args.benchmark,
               "check_halving": bool(args.check_halving)}
        if args.h is not None:
            exp["h"] = args.h
        return exp
    if cmd == "estimate-value":
        return {"kind": "estimate-value", "benchmark": args.benchmark,
                "epochs": args.epochs, "inner_steps": args.inner_steps, "M": args.M}
    if cmd == "check-dpp":
        return {"kind": "check-dpp", "benchmark": args.benchmark, "deltas": args.deltas,
                "M": args.M}
    if cmd == "check-viscosity":
        return {"kind": "check-viscosity", "benchmark": args.benchmark,
                "points": args.points}
    return {"kind": "cross-validate", "benchmark": args.benchmark}


def _print_summary(report: dict) -> None:
    for entry in report["experiments"]:
        verdict = "PASS" if entry["passed"] else "FAIL"
        rec = entry["records"]
        detail = rec.get("error") if isinstance(rec.get("error"), str) else ""
        print(f"[{verdict}] {entry['name']} ({entry['kind']}) {detail}".rstrip())
    print("overall:", "PASS" if report["passed"] else "FAIL")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-benchmarks":
        for name, description in list_benchmarks():
            print(f"{name}: {description}")
        return 0
    try:
        if args.command == "run":
            with open(args.config) as f:
                cfg = json.load(f)
        else:
            cfg = {"experiments": [_experiment_from_args(args)]}
        report, code = run(cfg, seed=args.seed, out=args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    _print_summary(report)
    return code


if __name__ == "__main__":
    sys.exit(main())
