"""Consensus ADMM over region subproblems.

Every iteration has three stages separated by barriers:

1. each region minimizes its generation cost plus the augmented consensus
   terms, given the current references ``beta`` and its duals ``y``;
2. each shared quantity's reference becomes the average over the regions that
   hold a copy of ``w + y / rho``;
3. each region's dual moves by ``rho * (w - beta)``.

Stage 1 is the only expensive step; its region solves are independent and
can run on a thread pool. Stages 2 and 3 run in the coordinator in a fixed
order, so sequential and parallel runs give identical numbers.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from radopf import acopf
from radopf.acopf import ConsensusParams, OPFProblem, build_region, region_shared_quantities
from radopf.network import Network
from radopf.nlp import SolveResult, SolverOptions, Status, WarmStart
from radopf.nlp import solve as builtin_solve
from radopf.partition import FORWARD, REVERSE, Partition, region_closures

log = logging.getLogger(__name__)

# warm-started region solves begin close to the central path
WARM_MU = 1e-6
WARM_PUSH = 1e-8


class SubproblemFailure(RuntimeError):
    def __init__(self, k: int, t: int, result: SolveResult, trace=None):
        super().__init__(f"region {k} subproblem failed at iteration {t}: "
                         f"{result.status.value} ({result.message})")
        self.k = k
        self.t = t
        self.result = result
        self.trace = trace or []


@dataclass(frozen=True)
class DicaParams:
    rho: float
    eps: float = 1e-4
    max_iter: int = 2000
    warm_start: bool = True
    workers: int = 1
    solver_options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")

    @property
    def rho_v(self) -> float:
        return self.rho

    @property
    def rho_theta(self) -> float:
        return 2 * self.rho

    @property
    def rho_p(self) -> float:
        return 2 * self.rho

    @property
    def rho_q(self) -> float:
        return 2 * self.rho

    def rho_of(self, kind: str) -> float:
        return {"v": self.rho_v, "theta": self.rho_theta, "p": self.rho_p, "q": self.rho_q}[kind]


# ---------------------------------------------------------------- updates

def beta_update(copies, duals, rho):
    """Reference value from the region copies of one quantity: mean of ``w + y / rho``."""
    copies = np.asarray(copies, float)
    duals = np.asarray(duals, float)
    return float(np.mean(copies + duals / rho))


def y_update(y, w, beta, rho):
    return y + rho * (w - beta)


def residuals(w, beta_new, beta_old, rho):
    """Primal residual ``w - beta`` and dual residual ``rho * (beta - beta_prev)`` of one region."""
    w = np.asarray(w, float)
    beta_new = np.asarray(beta_new, float)
    beta_old = np.asarray(beta_old, float)
    rho = np.broadcast_to(np.asarray(rho, float), beta_new.shape)
    return w - beta_new, rho * beta_new - rho * beta_old


@dataclass
class RegionRecord:
    k: int
    primal_res: float
    dual_res: float
    w_norm: float
    beta_norm: float
    y_norm: float
    local_obj: float
    solver_iters: int

    def satisfied(self, eps: float) -> bool:
        primal_ok = self.primal_res <= eps * max(self.w_norm, self.beta_norm)
        if self.y_norm > 0:
            dual_ok = self.dual_res <= eps * self.y_norm
        else:
            dual_ok = self.dual_res <= eps
        return primal_ok and dual_ok


@dataclass
class IterationRecord:
    t: int
    regions: list[RegionRecord]
    total_cost: float

    @property
    def min_primal(self) -> float:
        return min(r.primal_res for r in self.regions)


def converged(records: Sequence[RegionRecord], eps: float) -> bool:
    """True when every region passes both its primal and its dual test."""
    return all(r.satisfied(eps) for r in records)


# ---------------------------------------------------------------- state

def _key_to_json(key):
    return list(key)


def _key_from_json(item):
    return (item[0], int(item[1])) if item[0] in ("v", "theta") else (item[0], int(item[1]), int(item[2]))


@dataclass
class ConsensusState:
    """References for shared quantities and per-region duals.

    ``beta`` maps a quantity key (``("v", bus)``, ``("theta", bus)``,
    ``("p", line, dir)``, ``("q", line, dir)``; buses and lines by network
    index) to its reference value; ``y`` maps ``(region, key)`` to a dual.
    """

    beta: dict
    y: dict
    t: int = 0
    region_x: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "t": self.t,
            "beta": [[_key_to_json(k), v] for k, v in self.beta.items()],
            "y": [[k, _key_to_json(q), v] for (k, q), v in self.y.items()],
            "region_x": {str(k): list(map(float, x)) for k, x in self.region_x.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ConsensusState":
        doc = json.loads(text)
        beta = {_key_from_json(k): float(v) for k, v in doc["beta"]}
        y = {(int(k), _key_from_json(q)): float(v) for k, q, v in doc["y"]}
        rx = {int(k): np.array(x, float) for k, x in doc.get("region_x", {}).items()}
        return cls(beta, y, int(doc["t"]), rx)


def initial_value(key) -> float:
    return 1.0 if key[0] == "v" else 0.0


# ---------------------------------------------------------------- run

@dataclass
class DicaResult:
    status: str                       # "converged" or "max_iter"
    state: ConsensusState
    trace: list[IterationRecord]
    region_x: list[np.ndarray]
    solution: dict
    objective: float
    problems: list[OPFProblem] = field(repr=False, default_factory=list)

    @property
    def iterations(self) -> int:
        return self.state.t

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def mean_solver_iterations(self) -> float:
        its = [r.solver_iters for rec in self.trace for r in rec.regions]
        return float(np.mean(its)) if its else 0.0


Solver = Callable[..., SolveResult]


class _Region:
    def __init__(self, network, closure, shared, params: DicaParams, gpos):
        self.k = closure.k
        self.closure = closure
        self.keys = region_shared_quantities(closure, shared)
        self.gidx = np.array([gpos[q] for q in self.keys], dtype=int)
        self.rho = np.array([params.rho_of(q[0]) for q in self.keys])
        cons = ConsensusParams(self.keys, np.zeros(len(self.keys)), np.zeros(len(self.keys)), self.rho)
        self.problem = build_region(network, closure, shared, cons)
        self.y = np.zeros(len(self.keys))
        self.x = None
        self.warm: WarmStart | None = None


def run(network: Network, partition: Partition, params: DicaParams, *,
        state: ConsensusState | None = None, solver: Solver | None = None,
        callback: Callable[[IterationRecord, ConsensusState], None] | None = None) -> DicaResult:
    """Run the consensus iteration until every region meets its stopping test.

    Args:
        network: per-unit network.
        partition: any partition of the buses (radial or not).
        params: penalty, tolerance, iteration cap, warm starting, thread count.
        state: resume from a saved state instead of the default initialization
            (``v`` references 1, everything else 0, all duals 0).
        solver: NLP backend with the signature of :func:`radopf.nlp.solve`.
        callback: called after every iteration with its record and the state.

    Raises:
        SubproblemFailure: a region solve did not reach a KKT point; the
            exception carries the trace so far.
    """
    solve = solver or builtin_solve
    closures, shared = region_closures(network, partition)
    gkeys = _global_keys(closures, shared)
    gpos = {q: i for i, q in enumerate(gkeys)}
    regions = [_Region(network, cl, shared, params, gpos) for cl in closures]
    grho = np.array([params.rho_of(q[0]) for q in gkeys])
    count = np.zeros(len(gkeys))
    for reg in regions:
        np.add.at(count, reg.gidx, 1.0)

    if state is None:
        beta = np.array([initial_value(q) for q in gkeys])
        t0 = 0
    else:
        beta = np.array([state.beta[q] for q in gkeys])
        for reg in regions:
            reg.y = np.array([state.y[(reg.k, q)] for q in reg.keys])
            if reg.k in state.region_x:
                reg.x = np.array(state.region_x[reg.k], float)
        t0 = state.t

    opts = params.solver_options
    trace: list[IterationRecord] = []
    results: list[SolveResult | None] = [None] * len(regions)

    def solve_region(reg: _Region, t: int) -> SolveResult:
        prob = reg.problem.with_consensus(beta[reg.gidx], reg.y)
        if params.warm_start and reg.x is not None:
            res = solve(prob, reg.x, opts, warm=reg.warm, mu_init=WARM_MU, bound_push=WARM_PUSH)
            if res.status is Status.OPTIMAL:
                return res
            cold = solve(prob, prob.flat_start(), opts)
            cold.iterations += res.iterations
            return cold
        return solve(prob, prob.flat_start(), opts)

    pool = ThreadPoolExecutor(max_workers=params.workers) if params.workers > 1 else None
    status = "max_iter"
    t = t0
    try:
        while t < t0 + params.max_iter:
            # stage 1: region solves
            if pool is None:
                out = [solve_region(reg, t) for reg in regions]
            else:
                out = list(pool.map(lambda reg: solve_region(reg, t), regions))
            for reg, res in zip(regions, out):
                if res.status is not Status.OPTIMAL:
                    raise SubproblemFailure(reg.k, t, res, trace)
            results = out
            w = [reg.problem.values(res.x) for reg, res in zip(regions, out)]

            # stage 2: references
            acc = np.zeros(len(gkeys))
            for reg, wk in zip(regions, w):
                np.add.at(acc, reg.gidx, wk + reg.y / reg.rho)
            beta_new = np.where(count > 0, acc / np.maximum(count, 1.0), beta)

            # stage 3: duals, residuals
            recs = []
            for reg, wk, res in zip(regions, w, out):
                bk = beta_new[reg.gidx]
                reg.y = y_update(reg.y, wk, bk, reg.rho)
                r, d = residuals(wk, bk, beta[reg.gidx], reg.rho)
                reg.x = res.x
                reg.warm = WarmStart.from_result(res)
                recs.append(RegionRecord(
                    k=reg.k,
                    primal_res=float(np.linalg.norm(r)),
                    dual_res=float(np.linalg.norm(d)),
                    w_norm=float(np.linalg.norm(wk)),
                    beta_norm=float(np.linalg.norm(bk)),
                    y_norm=float(np.linalg.norm(reg.y)),
                    local_obj=float(res.objective),
                    solver_iters=int(res.iterations),
                ))
            beta = beta_new
            t += 1
            cost = float(sum(reg.problem.generation_cost(res.x) for reg, res in zip(regions, out)))
            rec = IterationRecord(t, recs, cost)
            trace.append(rec)
            if callback is not None:
                callback(rec, _snapshot(gkeys, beta, regions, t, with_x=False))
            log.debug("iter %d cost %.6f max primal %.3e", t, cost, max(r.primal_res for r in recs))
            if converged(recs, params.eps):
                status = "converged"
                break
    finally:
        if pool is not None:
            pool.shutdown()

    final = _snapshot(gkeys, beta, regions, t, with_x=True)
    region_x = [reg.x for reg in regions]
    solution = stitch(network, regions, gpos, beta) if all(x is not None for x in region_x) else {}
    objective = acopf.total_cost(network, solution["pg"]) if solution else math.nan
    return DicaResult(status, final, trace, region_x, solution, objective,
                      [reg.problem for reg in regions])


def _global_keys(closures, shared):
    nodes = shared.shared_nodes()
    arcs = shared.shared_lines()
    return ([("v", i) for i in nodes] + [("theta", i) for i in nodes]
            + [("p", lid, d) for lid, d in arcs] + [("q", lid, d) for lid, d in arcs])


def _snapshot(gkeys, beta, regions, t, with_x):
    y = {(reg.k, q): float(v) for reg in regions for q, v in zip(reg.keys, reg.y)}
    rx = {reg.k: reg.x.copy() for reg in regions if reg.x is not None} if with_x else {}
    return ConsensusState(dict(zip(gkeys, map(float, beta))), y, t, rx)


def stitch(network: Network, regions, gpos, beta) -> dict:
    """Global solution: shared quantities from the references, the rest from the region holding them."""
    nb, nl = network.n_bus, len(network.lines)
    v = np.full(nb, np.nan)
    th = np.full(nb, np.nan)
    p = np.full((nl, 2), np.nan)
    q = np.full((nl, 2), np.nan)
    pg = np.full(len(network.generators), np.nan)
    qg = np.full(len(network.generators), np.nan)
    for reg in regions:
        sol = reg.problem.unpack(reg.x)
        for i in reg.closure.owned:
            v[i], th[i] = sol["v"][i], sol["theta"][i]
        for (lid, d), val in sol["p"].items():
            if np.isnan(p[lid, d]):
                p[lid, d] = val
                q[lid, d] = sol["q"][(lid, d)]
        for g, val in sol["pg"].items():
            pg[g], qg[g] = val, sol["qg"][g]
    for key, i in gpos.items():
        kind = key[0]
        if kind == "v":
            v[key[1]] = beta[i]
        elif kind == "theta":
            th[key[1]] = beta[i]
        elif kind == "p":
            p[key[1], key[2]] = beta[i]
        else:
            q[key[1], key[2]] = beta[i]
    return {"v": v, "theta": th, "p": p, "q": q, "pg": pg, "qg": qg}


def stitched_vector(network: Network, solution: dict) -> np.ndarray:
    """Arrange a stitched solution as a point of :func:`radopf.acopf.build_centralized`."""
    nl = len(network.lines)
    return np.concatenate([
        solution["v"], solution["theta"],
        solution["p"][:, FORWARD], solution["p"][:, REVERSE],
        solution["q"][:, FORWARD], solution["q"][:, REVERSE],
        solution["pg"], solution["qg"],
    ]) if nl or network.n_bus else np.zeros(0)
