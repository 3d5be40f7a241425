"""Primal-dual interior-point solver for smooth NLPs.

Inequalities get slacks, ``c_I(x) + s = 0`` with ``s >= 0``, so internally the
solver works on variables ``z = (x, s)`` with equality constraints ``h(z) = 0``
and simple bounds. Each iteration solves the barrier KKT system

    [ W + Sigma + dw I    J^T  ] [dz]     [ grad phi + J^T lam ]
    [ J                -dc I   ] [dl] = - [ h                  ]

with a dense Bunch-Kaufman factorization; ``dw`` is raised until the matrix
has the inertia of a local minimizer. Steps are globalized by backtracking
on an exact l1 merit function with one second-order correction.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from radopf.nlp.problem import NLPProblem, as_dense, fd_hessian

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 3000
    mu_init: float = 0.1
    mu_factor: float = 10.0        # mu <- mu / mu_factor
    kappa_eps: float = 10.0        # decrease mu once E_mu <= kappa_eps * mu
    tau: float = 0.995             # fraction to the boundary
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    reg_init: float = 1e-8
    reg_factor: float = 10.0
    reg_max: float = 1e20
    obj_scaling_grad: float = 100.0
    s_max: float = 100.0
    max_backtracks: int = 40
    armijo: float = 1e-4
    mult_init_max: float = 1e3


@dataclass
class IterationLog:
    it: int
    mu: float
    objective: float
    inf_pr: float
    inf_du: float
    alpha: float
    reg: float
    nu: float
    merit_before: float
    merit_after: float
    soc: bool = False


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    status: Status
    iterations: int
    kkt_residuals: tuple[float, float, float]
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    z_l: np.ndarray
    z_u: np.ndarray
    message: str = ""
    log: list[IterationLog] = field(default_factory=list, repr=False)

    @property
    def x_star(self) -> np.ndarray:
        return self.x

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class WarmStart:
    """Multipliers from a previous solve, in the problem's own (unscaled) units."""

    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    z_l: np.ndarray
    z_u: np.ndarray

    @classmethod
    def from_result(cls, res: SolveResult) -> "WarmStart":
        return cls(res.lam_eq, res.lam_ineq, res.z_l, res.z_u)


class _EvalError(Exception):
    pass


def _inertia(ldu: np.ndarray, ipiv: np.ndarray) -> tuple[int, int, int]:
    """(positive, negative, zero) eigenvalue counts of the block-diagonal factor."""
    n = ldu.shape[0]
    diag = np.diag(ldu)
    # only exact zero pivots count as singular; a tolerance relative to the
    # largest pivot misreads the small -dc pivots once barrier terms grow large
    zero_tol = 0.0
    pos = neg = zero = 0
    i = 0
    while i < n:
        if ipiv[i] > 0:
            d = diag[i]
            if abs(d) <= zero_tol:
                zero += 1
            elif d > 0:
                pos += 1
            else:
                neg += 1
            i += 1
        else:
            a, b, c = diag[i], ldu[i + 1, i], diag[i + 1]
            det = a * c - b * b
            tr = a + c
            if abs(det) <= zero_tol * max(abs(a), abs(c), abs(b), 1.0):
                zero += 1
                if tr > 0:
                    pos += 1
                elif tr < 0:
                    neg += 1
                else:
                    zero += 1
            elif det < 0:
                pos += 1
                neg += 1
            elif tr > 0:
                pos += 2
            else:
                neg += 2
            i += 2
    return pos, neg, zero


class _Solver:
    def __init__(self, problem: NLPProblem, opts: SolverOptions):
        self.p = problem
        self.o = opts
        n = problem.n
        lb = np.asarray(problem.lb, float).copy()
        ub = np.asarray(problem.ub, float).copy()
        if lb.shape != (n,) or ub.shape != (n,):
            raise ValueError("bounds must have length n")
        if np.any(lb > ub):
            raise ValueError("lower bound above upper bound")
        # fixed variables become equality rows
        fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 1e-12 * np.maximum(1.0, np.abs(lb)))
        self.fixed = np.flatnonzero(fixed)
        self.fixed_val = 0.5 * (lb[fixed] + ub[fixed])
        lb[fixed] = -np.inf
        ub[fixed] = np.inf
        self.n = n
        self.mE = problem.m_eq
        self.mF = len(self.fixed)
        self.mI = problem.m_ineq
        self.N = n + self.mI
        self.m = self.mE + self.mF + self.mI
        self.lb = np.concatenate([lb, np.zeros(self.mI)])
        self.ub = np.concatenate([ub, np.full(self.mI, np.inf)])
        self.L = np.isfinite(self.lb)
        self.U = np.isfinite(self.ub)

    # ----- evaluation ---------------------------------------------------
    def _call(self, fn, *args):
        try:
            out = fn(*args)
        except (ArithmeticError, ValueError, FloatingPointError) as exc:
            raise _EvalError(f"{getattr(fn, '__name__', fn)} raised {exc!r}") from exc
        return out

    def f(self, z):
        v = self.sigma * float(self._call(self.p.objective, z[: self.n]))
        if not math.isfinite(v):
            raise _EvalError("objective is not finite")
        return v

    def grad(self, z):
        g = np.zeros(self.N)
        g[: self.n] = self.sigma * np.asarray(self._call(self.p.gradient, z[: self.n]), float)
        return g

    def h(self, z):
        x = z[: self.n]
        parts = []
        if self.mE:
            parts.append(np.asarray(self._call(self.p.constraints_eq, x), float))
        if self.mF:
            parts.append(x[self.fixed] - self.fixed_val)
        if self.mI:
            parts.append(np.asarray(self._call(self.p.constraints_ineq, x), float) + z[self.n:])
        out = np.concatenate(parts) if parts else np.zeros(0)
        if not np.all(np.isfinite(out)):
            raise _EvalError("constraint values are not finite")
        return out

    def jac(self, z):
        x = z[: self.n]
        J = np.zeros((self.m, self.N))
        r = 0
        if self.mE:
            J[: self.mE, : self.n] = as_dense(self._call(self.p.jacobian_eq, x))
            r = self.mE
        if self.mF:
            J[r + np.arange(self.mF), self.fixed] = 1.0
            r += self.mF
        if self.mI:
            J[r:, : self.n] = as_dense(self._call(self.p.jacobian_ineq, x))
            J[r + np.arange(self.mI), self.n + np.arange(self.mI)] = 1.0
        return J

    def hess(self, z, lam):
        x = z[: self.n]
        lam_e = lam[: self.mE]
        lam_i = lam[self.mE + self.mF:]
        if self.p.has_hessian:
            H = as_dense(self._call(self.p.hessian, x, self.sigma, lam_e, lam_i))
        else:
            H = fd_hessian(self.p, x, self.sigma, lam_e, lam_i)
        W = np.zeros((self.N, self.N))
        W[: self.n, : self.n] = H
        return W

    # ----- barrier pieces -------------------------------------------------
    def slack_l(self, z):
        return np.where(self.L, z - np.where(self.L, self.lb, 0.0), 1.0)

    def slack_u(self, z):
        return np.where(self.U, np.where(self.U, self.ub, 0.0) - z, 1.0)

    def barrier(self, z, mu):
        return -mu * (np.sum(np.log(self.slack_l(z)[self.L])) + np.sum(np.log(self.slack_u(z)[self.U])))

    def grad_barrier(self, z, mu):
        g = np.zeros(self.N)
        g[self.L] -= mu / self.slack_l(z)[self.L]
        g[self.U] += mu / self.slack_u(z)[self.U]
        return g

    # ----- setup ---------------------------------------------------------
    def push_inside(self, x, k1, k2):
        """Move ``x`` strictly inside the bounds (same rule for variables and slacks)."""
        lb = np.where(self.L, self.lb, 0.0)
        ub = np.where(self.U, self.ub, 0.0)
        rng = ub - lb
        pl = k1 * np.maximum(1.0, np.abs(lb))
        pu = k1 * np.maximum(1.0, np.abs(ub))
        both = self.L & self.U
        pl = np.where(both, np.minimum(pl, k2 * rng), pl)
        pu = np.where(both, np.minimum(pu, k2 * rng), pu)
        lo = np.where(self.L, lb + pl, -np.inf)
        hi = np.where(self.U, ub - pu, np.inf)
        return np.where(lo <= hi, np.clip(x, lo, hi), 0.5 * (lb + ub))

    def errors(self, z, g, h, J, lam, zl, zu, mu):
        grad_lag = g + J.T @ lam - zl + zu
        sl, su = self.slack_l(z), self.slack_u(z)
        cl = (sl * zl - mu)[self.L]
        cu = (su * zu - mu)[self.U]
        compl = max(np.max(np.abs(cl), initial=0.0), np.max(np.abs(cu), initial=0.0))
        nb = int(self.L.sum() + self.U.sum())
        zsum = float(np.sum(np.abs(zl)) + np.sum(np.abs(zu)))
        smax = self.o.s_max
        s_d = max(smax, (float(np.sum(np.abs(lam))) + zsum) / max(1, self.m + nb)) / smax
        s_c = max(smax, zsum / max(1, nb)) / smax
        stat = float(np.max(np.abs(grad_lag), initial=0.0))
        feas = float(np.max(np.abs(h), initial=0.0))
        return stat / s_d, feas, compl / s_c

    # ----- main loop -----------------------------------------------------
    def run(self, x0, warm: WarmStart | None, mu_init: float | None, bound_push: float | None):
        o = self.o
        n, N, m = self.n, self.N, self.m
        push = o.bound_push if bound_push is None else bound_push
        frac = o.bound_frac if bound_push is None else min(o.bound_frac, bound_push)
        mu = o.mu_init if mu_init is None else mu_init
        mu_min = o.tol / 10.0
        logs: list[IterationLog] = []

        x = np.asarray(x0, float).copy()
        if x.shape != (n,):
            raise ValueError(f"x0 has shape {x.shape}, expected ({n},)")
        z = np.concatenate([x, np.zeros(self.mI)])
        z[:n] = self.push_inside(z, push, frac)[:n]

        self.sigma = 1.0
        g0 = self.p.gradient(z[:n])
        gmax = float(np.max(np.abs(g0), initial=0.0))
        if gmax > o.obj_scaling_grad:
            self.sigma = o.obj_scaling_grad / gmax

        if self.mI:
            z[n:] = -np.asarray(self.p.constraints_ineq(z[:n]), float)
        z = self.push_inside(z, push, frac)

        zl = np.where(self.L, 1.0, 0.0)
        zu = np.where(self.U, 1.0, 0.0)
        lam = np.zeros(m)
        if warm is not None:
            s = self.sigma
            if self.mE:
                lam[: self.mE] = s * np.asarray(warm.lam_eq, float)
            if self.mI:
                lam[self.mE + self.mF:] = s * np.asarray(warm.lam_ineq, float)
            zl[:n] = np.where(self.L[:n], np.maximum(s * np.asarray(warm.z_l, float), 0.0), 0.0)
            zu[:n] = np.where(self.U[:n], np.maximum(s * np.asarray(warm.z_u, float), 0.0), 0.0)
            if self.mI:
                zl[n:] = np.maximum(lam[self.mE + self.mF:], 0.0)
            floor = mu / np.maximum(self.slack_l(z), 1e-300) * 1e-2
            zl = np.where(self.L, np.maximum(zl, floor), 0.0)
            floor = mu / np.maximum(self.slack_u(z), 1e-300) * 1e-2
            zu = np.where(self.U, np.maximum(zu, floor), 0.0)

        f = self.f(z)
        g = self.grad(z)
        h = self.h(z)
        J = self.jac(z)
        if warm is None and m:
            # least-squares multiplier estimate
            est, *_ = np.linalg.lstsq(J.T, -(g - zl + zu), rcond=None)
            if np.all(np.isfinite(est)) and np.max(np.abs(est), initial=0.0) <= o.mult_init_max:
                lam = est

        nu = 1.0
        last_reg = 0.0
        status, message = Status.MAX_ITER, "iteration limit reached"
        it = 0
        while True:
            stat, feas, compl0 = self.errors(z, g, h, J, lam, zl, zu, 0.0)
            if max(stat, feas, compl0) <= o.tol:
                status, message = Status.OPTIMAL, "converged"
                break
            while mu > mu_min:
                e_mu = max(self.errors(z, g, h, J, lam, zl, zu, mu))
                if e_mu > o.kappa_eps * mu:
                    break
                mu = max(mu_min, mu / o.mu_factor)
            if it >= o.max_iter:
                break

            W = self.hess(z, lam)
            sl, su = self.slack_l(z), self.slack_u(z)
            sig = np.where(self.L, zl / sl, 0.0) + np.where(self.U, zu / su, 0.0)
            gphi = g + self.grad_barrier(z, mu)
            rhs = -np.concatenate([gphi + J.T @ lam, h])

            fact = self.factor(W, sig, J, last_reg, mu)
            if fact is None:
                status, message = Status.NUMERICAL_FAILURE, "could not regularize the KKT matrix"
                break
            ldu, ipiv, reg, dc = fact
            last_reg = reg
            sol = lapack.dsytrs(ldu, ipiv, rhs.reshape(-1, 1), lower=1)[0].ravel()
            dz, dlam = sol[:N], sol[N:]
            if not np.all(np.isfinite(sol)):
                status, message = Status.NUMERICAL_FAILURE, "non-finite Newton step"
                break
            dzl = np.where(self.L, mu / sl - zl - (zl / sl) * dz, 0.0)
            dzu = np.where(self.U, mu / su - zu + (zu / su) * dz, 0.0)

            a_max = self.max_step(sl, su, dz, o.tau)
            a_z = self.max_mult_step(zl, zu, dzl, dzu, o.tau)

            # penalty parameter for the l1 merit
            h1 = float(np.sum(np.abs(h)))
            Kdz = (W @ dz) + (sig + reg) * dz
            curv = max(0.0, float(dz @ Kdz))
            if h1 > 0:
                need = (float(gphi @ dz) + 0.5 * curv) / (0.9 * h1)
                if nu < need:
                    nu = need + 1.0
            phi0 = f + self.barrier(z, mu)
            merit0 = phi0 + nu * h1
            slope = float(gphi @ dz) - nu * h1

            try:
                step = self.line_search(z, dz, dlam, a_max, merit0, slope, nu, mu, rhs, ldu, ipiv, h)
            except _EvalError as exc:
                status, message = Status.NUMERICAL_FAILURE, str(exc)
                break
            if step is None:
                if feas > 1e-4 and h1 > 0:
                    status, message = Status.INFEASIBLE, "line search failed far from feasibility"
                else:
                    status, message = Status.NUMERICAL_FAILURE, "line search failed"
                break
            alpha, dz_used, dlam_used, merit1, soc = step
            if soc:
                dzl = np.where(self.L, mu / sl - zl - (zl / sl) * dz_used, 0.0)
                dzu = np.where(self.U, mu / su - zu + (zu / su) * dz_used, 0.0)
                a_z = self.max_mult_step(zl, zu, dzl, dzu, o.tau)
            z = z + alpha * dz_used
            lam = lam + alpha * dlam_used
            zl = zl + a_z * dzl
            zu = zu + a_z * dzu
            # keep bound multipliers near the central path
            sl, su = self.slack_l(z), self.slack_u(z)
            k = 1e10
            zl = np.where(self.L, np.clip(zl, mu / (k * sl), k * mu / sl), 0.0)
            zu = np.where(self.U, np.clip(zu, mu / (k * su), k * mu / su), 0.0)
            it += 1
            try:
                f = self.f(z)
                g = self.grad(z)
                h = self.h(z)
                J = self.jac(z)
            except _EvalError as exc:
                status, message = Status.NUMERICAL_FAILURE, str(exc)
                break
            logs.append(IterationLog(it, mu, f / self.sigma, float(np.max(np.abs(h), initial=0.0)),
                                     stat, alpha, reg, nu, merit0, merit1, soc))

        stat, feas, compl0 = self.errors(z, g, h, J, lam, zl, zu, 0.0)
        s = self.sigma
        x = z[:n].copy()
        return SolveResult(
            x=x,
            objective=float(self.p.objective(x)),
            status=status,
            iterations=it,
            kkt_residuals=(stat, feas, compl0),
            lam_eq=lam[: self.mE] / s,
            lam_ineq=lam[self.mE + self.mF:] / s,
            z_l=zl[:n] / s,
            z_u=zu[:n] / s,
            message=message,
            log=logs,
        )

    def factor(self, W, sig, J, last_reg, mu):
        o = self.o
        N, m = self.N, self.m
        K = np.zeros((N + m, N + m))
        K[:N, :N] = W
        K[N:, :N] = J
        K[:N, N:] = J.T
        base_diag = np.diag(W) + sig
        lwork = max(1, 64 * (N + m))
        reg, dc = 0.0, 0.0
        while True:
            K[np.arange(N), np.arange(N)] = base_diag + reg
            K[N + np.arange(m), N + np.arange(m)] = -dc
            ldu, ipiv, info = lapack.dsytrf(K, lower=1, lwork=lwork)
            if info < 0:
                return None
            pos, neg, zero = _inertia(ldu, ipiv)
            if info == 0 and pos == N and neg == m and zero == 0:
                return ldu, ipiv, reg, dc
            if zero and dc == 0.0 and m:
                dc = 1e-8 * mu ** 0.25
                continue
            if reg == 0.0:
                reg = o.reg_init if last_reg == 0.0 else max(o.reg_init, last_reg / 3.0)
            else:
                reg *= o.reg_factor
            if reg > o.reg_max:
                return None

    def max_step(self, sl, su, dz, tau):
        a = 1.0
        m = self.L & (dz < 0)
        if np.any(m):
            a = min(a, float(np.min(-tau * sl[m] / dz[m])))
        m = self.U & (dz > 0)
        if np.any(m):
            a = min(a, float(np.min(tau * su[m] / dz[m])))
        return a

    def max_mult_step(self, zl, zu, dzl, dzu, tau):
        a = 1.0
        m = self.L & (dzl < 0)
        if np.any(m):
            a = min(a, float(np.min(-tau * zl[m] / dzl[m])))
        m = self.U & (dzu < 0)
        if np.any(m):
            a = min(a, float(np.min(-tau * zu[m] / dzu[m])))
        return a

    def merit(self, z, mu, nu):
        return self.f(z) + self.barrier(z, mu) + nu * float(np.sum(np.abs(self.h(z))))

    def line_search(self, z, dz, dlam, a_max, merit0, slope, nu, mu, rhs, ldu, ipiv, h):
        o = self.o
        N = self.N
        alpha = a_max
        # merit differences below this are rounding noise
        mag = abs(self.f(z)) + abs(self.barrier(z, mu)) + nu * float(np.sum(np.abs(h))) + 1.0
        noise = 100 * np.finfo(float).eps * mag
        if np.max(np.abs(dz) / (1.0 + np.abs(z)), initial=0.0) < 10 * np.finfo(float).eps:
            zt = z + alpha * dz
            return alpha, dz, dlam, self.merit(zt, mu, nu), False
        for k in range(o.max_backtracks):
            zt = z + alpha * dz
            mt = self.merit(zt, mu, nu)
            if math.isfinite(mt) and mt <= merit0 + o.armijo * alpha * slope + noise:
                return alpha, dz, dlam, mt, False
            if k == 0:
                # second-order correction on the constraints
                h_trial = self.h(zt)
                if float(np.sum(np.abs(h_trial))) >= float(np.sum(np.abs(h))):
                    c_soc = alpha * h + h_trial
                    r = rhs.copy()
                    r[N:] = -c_soc
                    sol = lapack.dsytrs(ldu, ipiv, r.reshape(-1, 1), lower=1)[0].ravel()
                    dz_soc = sol[:N]
                    a_soc = self.max_step(self.slack_l(z), self.slack_u(z), dz_soc, o.tau)
                    zs = z + a_soc * dz_soc
                    ms = self.merit(zs, mu, nu)
                    if math.isfinite(ms) and ms <= merit0 + o.armijo * alpha * slope + noise:
                        return a_soc, dz_soc, sol[N:], ms, True
            alpha *= 0.5
            if alpha < 1e-14:
                break
        return None


def solve(problem: NLPProblem, x0, opts: SolverOptions | None = None, *,
          warm: WarmStart | None = None, mu_init: float | None = None,
          bound_push: float | None = None) -> SolveResult:
    """Find a local KKT point of ``problem`` starting from ``x0``.

    Args:
        problem: the NLP.
        x0: starting point; pushed strictly inside the bounds if needed.
        opts: tolerances and limits (defaults: tol 1e-8, max_iter 3000).
        warm: multipliers from an earlier solve of a nearby problem.
        mu_init: initial barrier parameter (overrides ``opts.mu_init``).
        bound_push: relative distance used to push ``x0`` off its bounds.

    The result's ``status`` is never raised; evaluation errors end the solve
    with ``NumericalFailure``.
    """
    opts = opts or SolverOptions()
    solver = _Solver(problem, opts)
    try:
        # overflow in trial steps is detected and handled by the line search
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return solver.run(x0, warm, mu_init, bound_push)
    except _EvalError as exc:
        n = problem.n
        return SolveResult(np.asarray(x0, float), math.nan, Status.NUMERICAL_FAILURE, 0,
                           (math.inf, math.inf, math.inf), np.zeros(problem.m_eq),
                           np.zeros(problem.m_ineq), np.zeros(n), np.zeros(n), str(exc))
    except np.linalg.LinAlgError as exc:
        n = problem.n
        return SolveResult(np.asarray(x0, float), math.nan, Status.NUMERICAL_FAILURE, 0,
                           (math.inf, math.inf, math.inf), np.zeros(problem.m_eq),
                           np.zeros(problem.m_ineq), np.zeros(n), np.zeros(n), str(exc))
