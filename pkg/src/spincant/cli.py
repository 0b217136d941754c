"""Command line: ``spincant {run,analyze,convergence,adiabatic,equivalence}``.

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 truncation,
4-7 integration failures (generic, step limit, norm/trace drift,
positivity), 8-9 analysis failures, 10 output errors, 11 memory budget.
"""

from __future__ import annotations

import argparse
import sys

from . import runner
from .config import PRESETS, load_config
from .errors import SpincantError, ValidationError

FAILED_CHECK = 1


def _basis_list(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("empty basis list")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spincant",
        description="Single-spin cantilever dynamics under cyclic adiabatic inversion.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help=f"scenario file, or a bundled preset: {', '.join(PRESETS)}")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    r = common(sub.add_parser("run", help="integrate and analyse a scenario"))
    r.add_argument("--mode", choices=("closed", "open"), help="override the scenario mode")
    r.add_argument("--basis", type=_basis_list, help="override n_basis (single value)")
    r.add_argument("--snapshots", type=int, help="number of state dumps")

    a = common(sub.add_parser("analyze", help="re-analyse the dumps of a previous run"))
    a.add_argument("--mode", choices=("closed", "open"))

    c = common(sub.add_parser("convergence", help="basis-size sweep (closed dynamics)"))
    c.add_argument("--basis", type=_basis_list, required=True, help="e.g. 48,64,96")

    common(sub.add_parser("adiabatic", help="adiabaticity ratios of a scenario"))
    e = common(sub.add_parser("equivalence",
                              help="closed vs undamped open dynamics, elementwise"))
    e.add_argument("--basis", type=_basis_list, help="override n_basis (single value)")
    return p


def _apply_basis(scn, basis):
    if not basis:
        return scn
    if len(basis) != 1:
        raise ValidationError("--basis", "this command takes a single basis size")
    return scn.with_(params=scn.params.replace(n_basis=basis[0]))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        scn = load_config(args.config)
        if args.command == "run":
            scn = _apply_basis(scn, args.basis)
            if args.snapshots is not None and args.snapshots < 1:
                raise ValidationError("--snapshots", "must be >= 1")
            runner.run(scn, args.out, args.mode, args.snapshots, log)
            return 0
        if args.command == "analyze":
            reports = runner.analyze(scn, args.out, args.mode)
            log(f"analysed {len(reports)} snapshots")
            return 0
        if args.command == "convergence":
            res = runner.convergence(scn, args.out, args.basis, log)
        elif args.command == "adiabatic":
            res = runner.adiabatic(scn, args.out, log)
        else:
            scn = _apply_basis(scn, args.basis)
            res = runner.equivalence(scn, args.out, log)
        return 0 if res.passed else FAILED_CHECK
    except SpincantError as exc:
        print(f"spincant: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
