"""Command-line front end.

Examples::

    radopf solve --case case9 --report-iters
    radopf partition --case case9 --output case9-regions.json
    radopf dica --case case9 --rho 400 --reference --trace case9.csv
    radopf check --case case14

Exit codes: 0 success, 2 iteration cap reached, 3 solver failure,
4 bad input (flags, case file, partition file).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path

from radopf import acopf, dica
from radopf.matpower import CaseError, load_network, resolve_case
from radopf.nlp import ExternalSolver, ExternalSolverError, SolverOptions, Status, check_derivatives, solve
from radopf.partition import (
    load_partition,
    partition_to_json,
    radial_partition,
    region_closures,
    verify_radial,
)

EXIT_OK = 0
EXIT_MAX_ITER = 2
EXIT_SOLVER = 3
EXIT_CONFIG = 4

TRACE_COLUMNS = ("iter", "region", "primal_res", "dual_res", "local_obj", "solver_iters", "total_cost")


class ConfigError(Exception):
    """Invalid flags or unreadable inputs; maps to exit code 4."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags, which would collide with
    # the iteration-cap code
    def error(self, message):
        raise ConfigError(message)


def write_trace(records: Sequence[dica.IterationRecord], path: str | Path) -> int:
    """Write a DiCA trace as CSV, one row per (iteration, region).

    Floats are written with ``repr`` so identical runs give identical bytes.

    Returns:
        Number of data rows written.

    Raises:
        ValueError: ``records`` is empty (no file is created).
    """
    if not records:
        raise ValueError("trace is empty; nothing to write")
    rows = []
    for rec in sorted(records, key=lambda r: r.t):
        for reg in sorted(rec.regions, key=lambda r: r.k):
            rows.append((rec.t, reg.k, repr(reg.primal_res), repr(reg.dual_res),
                         repr(reg.local_obj), reg.solver_iters, repr(rec.total_cost)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(rows)
    return len(rows)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--case", required=True, help="case file path or bundled case name")
    common.add_argument("--solver", default="builtin", help="builtin or external:<command>")
    common.add_argument("--tol", type=float, default=1e-8, help="NLP tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    part = _Parser(add_help=False)
    part.add_argument("--start-rule", choices=("lowest", "random"), default="lowest")
    part.add_argument("--seed", type=int, default=None)
    part.add_argument("--partition-file", default=None, help='JSON {"regions": [[bus ids], ...]}')

    p = _Parser(prog="radopf", description="AC-OPF by radial partitioning and consensus ADMM")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", parents=[common], help="centralized OPF")
    s.add_argument("--report-iters", action="store_true", help="print the solver iteration count")
    s.add_argument("--output", default=None, help="write the solution as JSON")

    s = sub.add_parser("partition", parents=[common, part], help="radial partition as JSON")
    s.add_argument("--output", default=None, help="write JSON here instead of stdout")

    s = sub.add_parser("dica", parents=[common, part], help="distributed consensus solve")
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--max-iter", type=int, default=2000)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--cold", action="store_true", help="cold-start every region solve")
    s.add_argument("--trace", default=None, help="CSV trace path")
    s.add_argument("--state-out", default=None, help="write the final consensus state as JSON")
    s.add_argument("--state-in", default=None, help="resume from a saved consensus state")
    s.add_argument("--reference", action="store_true", help="solve centrally to report GAP")
    s.add_argument("--reference-obj", type=float, default=None, help="known centralized objective")

    sub.add_parser("check", parents=[common, part], help="validate case, partition and derivatives")
    return p


def _solver(spec: str):
    if spec == "builtin":
        return solve
    if spec.startswith("external:") and spec[len("external:"):].strip():
        return ExternalSolver(spec[len("external:"):])
    raise ConfigError(f"--solver must be 'builtin' or 'external:<command>', got {spec!r}")


def _network(args):
    try:
        return load_network(resolve_case(args.case))
    except FileNotFoundError:
        raise ConfigError(f"case not found: {args.case}") from None
    except (CaseError, ValueError, OSError) as exc:
        raise ConfigError(f"cannot read case {args.case}: {exc}") from None


def _partition(args, net):
    if args.partition_file:
        try:
            part = load_partition(net, args.partition_file)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read partition file: {exc}") from None
        report = verify_radial(net, part)
        missing = [v for v in report.violations if "uncovered" in v or "regions" in v or "not in" in v]
        if missing:
            raise ConfigError("partition file is not a partition: " + "; ".join(missing))
        return part
    return radial_partition(net, args.start_rule, args.seed)


def _solution_json(net, prob, res) -> dict:
    sol = prob.unpack(res.x)
    ids = net.bus_ids
    return {
        "case": net.name,
        "status": res.status.value,
        "objective": float(res.objective),
        "iterations": res.iterations,
        "v": {str(ids[i]): val for i, val in sol["v"].items()},
        "theta": {str(ids[i]): val for i, val in sol["theta"].items()},
        "pg_mw": [val * net.base_mva for _, val in sorted(sol["pg"].items())],
        "qg_mvar": [val * net.base_mva for _, val in sorted(sol["qg"].items())],
    }


def _cmd_solve(args, out) -> int:
    net = _network(args)
    prob = acopf.build_centralized(net)
    res = _solver(args.solver)(prob, prob.flat_start(), SolverOptions(tol=args.tol))
    if args.output:
        Path(args.output).write_text(json.dumps(_solution_json(net, prob, res), indent=1) + "\n")
    line = f"solve {net.name}: status={res.status.value} objective={res.objective:.6f}"
    if args.report_iters:
        line += f" iterations={res.iterations}"
    print(line, file=out)
    return EXIT_OK if res.status is Status.OPTIMAL else EXIT_SOLVER


def _cmd_partition(args, out) -> int:
    net = _network(args)
    part = _partition(args, net)
    text = partition_to_json(net, part)
    report = verify_radial(net, part)
    if args.output:
        Path(args.output).write_text(text + "\n")
        print(f"partition {net.name}: {len(part)} regions, radial={bool(report)}", file=out)
    else:
        print(text, file=out)
    return EXIT_OK


def _cmd_dica(args, out) -> int:
    if not args.rho > 0 or not math.isfinite(args.rho):
        raise ConfigError(f"--rho must be a positive number, got {args.rho}")
    if not args.eps > 0:
        raise ConfigError(f"--eps must be positive, got {args.eps}")
    if args.max_iter < 1:
        raise ConfigError(f"--max-iter must be at least 1, got {args.max_iter}")
    if args.workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {args.workers}")
    net = _network(args)
    part = _partition(args, net)
    solver = _solver(args.solver)
    state = None
    if args.state_in:
        try:
            state = dica.ConsensusState.from_json(Path(args.state_in).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read state file: {exc}") from None
    params = dica.DicaParams(rho=args.rho, eps=args.eps, max_iter=args.max_iter,
                             warm_start=not args.cold, workers=args.workers,
                             solver_options=SolverOptions(tol=args.tol))
    try:
        res = dica.run(net, part, params, state=state, solver=solver)
    except dica.SubproblemFailure as exc:
        if args.trace and exc.trace:
            write_trace(exc.trace, args.trace)
        print(f"dica {net.name}: {exc}", file=out)
        return EXIT_SOLVER

    if args.trace and res.trace:
        write_trace(res.trace, args.trace)
    if args.state_out:
        Path(args.state_out).write_text(res.state.to_json())

    reference = args.reference_obj
    if reference is None and args.reference:
        prob = acopf.build_centralized(net)
        ref = solver(prob, prob.flat_start(), SolverOptions(tol=args.tol))
        if ref.status is not Status.OPTIMAL:
            print(f"dica {net.name}: reference solve failed ({ref.status.value})", file=out)
            return EXIT_SOLVER
        reference = ref.objective
    gap_text = "n/a"
    if reference is not None:
        try:
            gap_text = f"{acopf.gap(res.objective, reference):.3e}"
        except ZeroDivisionError:
            gap_text = "undefined"
    print(f"dica {net.name}: status={res.status} regions={len(part)} iterations={res.iterations} "
          f"objective={res.objective:.6f} gap={gap_text} "
          f"avg_subproblem_iters={res.mean_solver_iterations():.2f}", file=out)
    return EXIT_OK if res.converged else EXIT_MAX_ITER


def _cmd_check(args, out) -> int:
    net = _network(args)
    part = _partition(args, net)
    report = verify_radial(net, part)
    prob = acopf.build_centralized(net)
    err, where = check_derivatives(prob, prob.flat_start())
    closures, shared = region_closures(net, part)
    ok = bool(report) and err <= 1e-5
    print(f"check {net.name}: buses={net.n_bus} lines={len(net.lines)} gens={len(net.generators)} "
          f"regions={len(part)} radial={bool(report)} shared_nodes={len(shared.shared_nodes())} "
          f"shared_lines={len(shared.shared_lines())} derivative_error={err:.2e}", file=out)
    for v in report.violations:
        print(f"  violation: {v}", file=out)
    return EXIT_OK if ok else EXIT_SOLVER


COMMANDS = {"solve": _cmd_solve, "partition": _cmd_partition, "dica": _cmd_dica, "check": _cmd_check}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    """Entry point; returns the process exit code."""
    out = out or sys.stdout
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"radopf: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExternalSolverError as exc:
        print(f"radopf: external solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main_exit() -> None:
    """Console-script wrapper around :func:`main`."""
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
