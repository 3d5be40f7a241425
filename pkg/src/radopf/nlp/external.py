"""Run an NLP through an external solver process.

The parent and the child talk in line-delimited JSON over the child's
stdin/stdout. Infinite bounds are written as ``null`` and matrices are dense
nested lists.

1. The parent sends the problem header::

       {"type": "problem", "n": 3, "m_eq": 1, "m_ineq": 0,
        "lb": [...], "ub": [...], "x0": [...],
        "tol": 1e-8, "max_iter": 3000, "has_hessian": true,
        "warm": null | {"lam_eq": [...], "lam_ineq": [...], "z_l": [...], "z_u": [...]}}

2. The child asks for any number of evaluations::

       {"type": "eval", "what": "objective", "x": [...]}
       {"type": "eval", "what": "hessian", "x": [...],
        "obj_factor": 1.0, "lam_eq": [...], "lam_ineq": [...]}

   where ``what`` is one of ``objective``, ``gradient``, ``constraints_eq``,
   ``jacobian_eq``, ``constraints_ineq``, ``jacobian_ineq``, ``hessian``.
   The parent answers ``{"value": ...}`` or ``{"error": "message"}``.

3. The child finishes with::

       {"type": "result", "x": [...], "status": "Optimal", "iterations": 12,
        "objective": 1.0, "kkt_residuals": [s, f, c],
        "lam_eq": [...], "lam_ineq": [...], "z_l": [...], "z_u": [...],
        "message": ""}

   Multipliers and ``kkt_residuals`` are optional.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from collections.abc import Sequence

import numpy as np

from radopf.nlp.ipm import SolveResult, SolverOptions, Status, WarmStart
from radopf.nlp.problem import NLPProblem, as_dense


class ExternalSolverError(RuntimeError):
    """The child process broke the protocol or exited early."""


def _vec(a) -> list:
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, float).ravel()]


def _plain(a) -> list:
    return np.asarray(a, float).tolist()


def _evaluate(problem: NLPProblem, req: dict):
    x = np.asarray(req["x"], float)
    what = req["what"]
    if what == "objective":
        return float(problem.objective(x))
    if what == "gradient":
        return _plain(problem.gradient(x))
    if what == "constraints_eq":
        return _plain(problem.constraints_eq(x))
    if what == "jacobian_eq":
        return as_dense(problem.jacobian_eq(x)).tolist()
    if what == "constraints_ineq":
        return _plain(problem.constraints_ineq(x))
    if what == "jacobian_ineq":
        return as_dense(problem.jacobian_ineq(x)).tolist()
    if what == "hessian":
        h = problem.hessian(x, float(req.get("obj_factor", 1.0)),
                            np.asarray(req.get("lam_eq", []), float),
                            np.asarray(req.get("lam_ineq", []), float))
        return as_dense(h).tolist()
    raise ValueError(f"unknown evaluation {what!r}")


def _result(problem: NLPProblem, msg: dict) -> SolveResult:
    n = problem.n

    def arr(name, size):
        v = msg.get(name)
        return np.zeros(size) if v is None else np.asarray(v, float)

    try:
        status = Status(msg.get("status", "NumericalFailure"))
    except ValueError:
        status = Status.NUMERICAL_FAILURE
    kkt = msg.get("kkt_residuals") or (math.nan, math.nan, math.nan)
    return SolveResult(
        x=np.asarray(msg["x"], float),
        objective=float(msg.get("objective", math.nan)),
        status=status,
        iterations=int(msg.get("iterations", 0)),
        kkt_residuals=tuple(float(v) for v in kkt),
        lam_eq=arr("lam_eq", problem.m_eq),
        lam_ineq=arr("lam_ineq", problem.m_ineq),
        z_l=arr("z_l", n),
        z_u=arr("z_u", n),
        message=str(msg.get("message", "")),
    )


class ExternalSolver:
    """Callable with the same signature as :func:`radopf.nlp.solve`.

    Args:
        command: program and arguments, either a list or a shell-style string.
        timeout: seconds to wait for the child after it reports a result.

    Example:
        >>> solver = ExternalSolver("python my_solver.py")  # doctest: +SKIP
        >>> result = solver(problem, x0)                     # doctest: +SKIP
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 10.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external solver command is empty")
        self.timeout = timeout

    def __call__(self, problem: NLPProblem, x0, opts: SolverOptions | None = None, *,
                 warm: WarmStart | None = None, mu_init: float | None = None,
                 bound_push: float | None = None) -> SolveResult:
        opts = opts or SolverOptions()
        header = {
            "type": "problem",
            "n": problem.n,
            "m_eq": problem.m_eq,
            "m_ineq": problem.m_ineq,
            "lb": _vec(problem.lb),
            "ub": _vec(problem.ub),
            "x0": _plain(x0),
            "tol": opts.tol,
            "max_iter": opts.max_iter,
            "has_hessian": bool(problem.has_hessian),
            "warm": None if warm is None else {
                "lam_eq": _plain(warm.lam_eq), "lam_ineq": _plain(warm.lam_ineq),
                "z_l": _plain(warm.z_l), "z_u": _plain(warm.z_u),
            },
        }
        proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                text=True, bufsize=1)
        try:
            self._send(proc, header)
            while True:
                line = proc.stdout.readline()
                if not line:
                    raise ExternalSolverError(
                        f"solver exited without a result (code {proc.wait()})")
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ExternalSolverError(f"bad message from solver: {line.strip()!r}") from exc
                kind = msg.get("type")
                if kind == "result":
                    return _result(problem, msg)
                if kind != "eval":
                    raise ExternalSolverError(f"unexpected message type {kind!r}")
                try:
                    reply = {"value": _evaluate(problem, msg)}
                except Exception as exc:  # reported to the child, which decides what to do
                    reply = {"error": str(exc)}
                self._send(proc, reply)
        finally:
            if proc.stdin and not proc.stdin.closed:
                proc.stdin.close()
            try:
                proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    @staticmethod
    def _send(proc, msg: dict) -> None:
        try:
            proc.stdin.write(json.dumps(msg) + "\n")
            proc.stdin.flush()
        except BrokenPipeError as exc:
            raise ExternalSolverError("solver closed its input") from exc
