"""Smooth nonlinear program interface.

    minimize    f(x)
    subject to  c_E(x) = 0
                c_I(x) <= 0
                lb <= x <= ub

Jacobians may be returned as dense arrays or scipy sparse matrices.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import scipy.sparse as sp


def as_dense(a) -> np.ndarray:
    if sp.issparse(a):
        return a.toarray()
    return np.asarray(a, dtype=float)


class NLPProblem:
    """Base class; subclasses fill in the evaluation methods.

    ``hessian`` returns the Hessian of
    ``obj_factor * f + lam_eq @ c_E + lam_ineq @ c_I``. Subclasses without
    second derivatives may leave it unimplemented; the solver then falls back
    to finite differences of the Lagrangian gradient.
    """

    n: int
    m_eq: int = 0
    m_ineq: int = 0
    lb: np.ndarray
    ub: np.ndarray

    def objective(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def constraints_eq(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def jacobian_eq(self, x: np.ndarray):
        return np.zeros((0, self.n))

    def constraints_ineq(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def jacobian_ineq(self, x: np.ndarray):
        return np.zeros((0, self.n))

    def hessian(self, x, obj_factor, lam_eq, lam_ineq):
        raise NotImplementedError

    @property
    def has_hessian(self) -> bool:
        return type(self).hessian is not NLPProblem.hessian


def _empty(n):
    return lambda x: np.zeros(0)


class FunctionProblem(NLPProblem):
    """An NLP assembled from plain callables, handy for small problems and tests.

    Example:
        >>> prob = FunctionProblem(
        ...     n=2,
        ...     f=lambda x: x @ x,
        ...     grad=lambda x: 2 * x,
        ...     c_eq=lambda x: np.array([x[0] + x[1] - 1.0]),
        ...     jac_eq=lambda x: np.array([[1.0, 1.0]]),
        ... )
    """

    def __init__(self, n: int, f: Callable, grad: Callable,
                 c_eq: Callable | None = None, jac_eq: Callable | None = None,
                 c_ineq: Callable | None = None, jac_ineq: Callable | None = None,
                 lb=None, ub=None, hess: Callable | None = None):
        self.n = n
        self._f, self._g = f, grad
        self._ce = c_eq or _empty(n)
        self._je = jac_eq or (lambda x: np.zeros((0, n)))
        self._ci = c_ineq or _empty(n)
        self._ji = jac_ineq or (lambda x: np.zeros((0, n)))
        self._h = hess
        x0 = np.zeros(n)
        self.m_eq = len(self._ce(x0))
        self.m_ineq = len(self._ci(x0))
        self.lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, float)
        self.ub = np.full(n, np.inf) if ub is None else np.asarray(ub, float)

    def objective(self, x):
        return float(self._f(x))

    def gradient(self, x):
        return np.asarray(self._g(x), float)

    def constraints_eq(self, x):
        return np.asarray(self._ce(x), float)

    def jacobian_eq(self, x):
        return self._je(x)

    def constraints_ineq(self, x):
        return np.asarray(self._ci(x), float)

    def jacobian_ineq(self, x):
        return self._ji(x)

    def hessian(self, x, obj_factor, lam_eq, lam_ineq):
        if self._h is None:
            raise NotImplementedError
        return self._h(x, obj_factor, lam_eq, lam_ineq)

    @property
    def has_hessian(self) -> bool:
        return self._h is not None


def fd_hessian(problem: NLPProblem, x, obj_factor, lam_eq, lam_ineq, step: float = 1e-6) -> np.ndarray:
    """Central-difference Hessian of the Lagrangian from analytic first derivatives."""

    def grad_lag(z):
        g = obj_factor * problem.gradient(z)
        if problem.m_eq:
            g = g + as_dense(problem.jacobian_eq(z)).T @ lam_eq
        if problem.m_ineq:
            g = g + as_dense(problem.jacobian_ineq(z)).T @ lam_ineq
        return g

    n = problem.n
    H = np.empty((n, n))
    for j in range(n):
        h = step * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad_lag(x + e) - grad_lag(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def check_derivatives(problem: NLPProblem, x, step: float = 1e-6, floor: float = 1.0):
    """Compare analytic first derivatives with central finite differences.

    The error of an entry is ``|analytic - fd| / max(floor, |analytic|, |fd|)``,
    so entries near zero are measured absolutely.

    Returns:
        ``(max_error, where)`` with ``where = (block, row, col)``; ``block`` is
        ``"gradient"``, ``"jac_eq"`` or ``"jac_ineq"``.
    """
    x = np.asarray(x, float)
    n = problem.n
    worst, where = 0.0, None

    def scan(block, analytic, fd):
        nonlocal worst, where
        if analytic.size == 0:
            return
        err = np.abs(analytic - fd) / np.maximum(floor, np.maximum(np.abs(analytic), np.abs(fd)))
        idx = np.unravel_index(np.argmax(err), err.shape)
        if err[idx] > worst or where is None:
            worst = float(err[idx])
            where = (block,) + tuple(int(i) for i in np.atleast_1d(idx)) if err.ndim > 1 else (block, 0, int(idx[0]))

    g_fd = np.empty(n)
    je_fd = np.empty((problem.m_eq, n))
    ji_fd = np.empty((problem.m_ineq, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        xp, xm = x + e, x - e
        g_fd[j] = (problem.objective(xp) - problem.objective(xm)) / (2 * step)
        if problem.m_eq:
            je_fd[:, j] = (problem.constraints_eq(xp) - problem.constraints_eq(xm)) / (2 * step)
        if problem.m_ineq:
            ji_fd[:, j] = (problem.constraints_ineq(xp) - problem.constraints_ineq(xm)) / (2 * step)

    scan("gradient", problem.gradient(x).reshape(1, -1), g_fd.reshape(1, -1))
    scan("jac_eq", as_dense(problem.jacobian_eq(x)), je_fd)
    scan("jac_ineq", as_dense(problem.jacobian_ineq(x)), ji_fd)
    return worst, where
