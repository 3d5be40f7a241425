"""Nonlinear programming: problem interface and the built-in interior-point solver."""

from radopf.nlp.external import ExternalSolver, ExternalSolverError
from radopf.nlp.ipm import (
    IterationLog,
    SolveResult,
    SolverOptions,
    Status,
    WarmStart,
    solve,
)
from radopf.nlp.problem import FunctionProblem, NLPProblem, check_derivatives, fd_hessian

__all__ = [
    "ExternalSolver",
    "ExternalSolverError",
    "FunctionProblem",
    "IterationLog",
    "NLPProblem",
    "SolveResult",
    "SolverOptions",
    "Status",
    "WarmStart",
    "check_derivatives",
    "fd_hessian",
    "solve",
]
