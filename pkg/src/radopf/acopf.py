"""AC-OPF models in polar form with explicit branch-flow variables.

One :class:`OPFProblem` class covers both the centralized problem and the
per-region subproblems solved by the consensus iteration. A region problem
differs only in which buses carry power balance (owned buses), which
generators appear (those at owned buses), whether the reference angle is
fixed, and the quadratic consensus terms added to the objective.

Variable layout (contiguous blocks): ``v``, ``theta`` for every modelled bus,
``p``, ``q`` for every directed arc (forward arcs of all lines, then the
reverse arcs), then ``pg``, ``qg`` for every modelled generator.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from radopf.network import Network
from radopf.nlp.problem import NLPProblem
from radopf.partition import FORWARD, REVERSE, RegionClosure, SharedEntityMap

KINDS = ("v", "theta", "p", "q")


class InconsistentConsensusKeys(ValueError):
    pass


def node_quantity(kind: str, bus: int) -> tuple:
    return (kind, bus)


def arc_quantity(kind: str, line_id: int, direction: int) -> tuple:
    return (kind, line_id, direction)


@dataclass(frozen=True)
class VariableLayout:
    nodes: tuple[int, ...]
    lines: tuple[int, ...]
    gens: tuple[int, ...]

    @property
    def n_node(self) -> int:
        return len(self.nodes)

    @property
    def n_arc(self) -> int:
        return 2 * len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.gens)

    @property
    def v(self) -> slice:
        return slice(0, self.n_node)

    @property
    def theta(self) -> slice:
        return slice(self.n_node, 2 * self.n_node)

    @property
    def p(self) -> slice:
        s = 2 * self.n_node
        return slice(s, s + self.n_arc)

    @property
    def q(self) -> slice:
        s = 2 * self.n_node + self.n_arc
        return slice(s, s + self.n_arc)

    @property
    def pg(self) -> slice:
        s = 2 * self.n_node + 2 * self.n_arc
        return slice(s, s + self.n_gen)

    @property
    def qg(self) -> slice:
        s = 2 * self.n_node + 2 * self.n_arc + self.n_gen
        return slice(s, s + self.n_gen)

    @property
    def size(self) -> int:
        return 2 * self.n_node + 2 * self.n_arc + 2 * self.n_gen

    def arc(self, line_id: int, direction: int) -> int:
        pos = self._line_pos[line_id]
        return pos if direction == FORWARD else pos + len(self.lines)

    def index(self, quantity: tuple) -> int:
        """Position of a quantity key such as ``("v", 4)`` or ``("p", 7, REVERSE)``."""
        kind = quantity[0]
        if kind in ("v", "theta"):
            loc = self._node_pos[quantity[1]]
            return loc if kind == "v" else self.n_node + loc
        a = self.arc(quantity[1], quantity[2])
        base = 2 * self.n_node if kind == "p" else 2 * self.n_node + self.n_arc
        return base + a

    @cached_property
    def _node_pos(self):
        return {b: i for i, b in enumerate(self.nodes)}

    @cached_property
    def _line_pos(self):
        return {lid: i for i, lid in enumerate(self.lines)}


@dataclass(frozen=True)
class ConsensusParams:
    """Consensus data for the shared quantities of one region.

    ``keys[i]`` is a quantity key; ``beta[i]``, ``y[i]`` and ``rho[i]`` are its
    reference value, this region's dual and its penalty.
    """

    keys: tuple[tuple, ...]
    beta: np.ndarray
    y: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        k = len(self.keys)
        if not (len(self.beta) == len(self.y) == len(self.rho) == k):
            raise ValueError("keys, beta, y and rho must have equal length")
        if k and np.any(np.asarray(self.rho) <= 0):
            raise ValueError("penalty parameters must be positive")

    @classmethod
    def empty(cls) -> "ConsensusParams":
        return cls((), np.zeros(0), np.zeros(0), np.zeros(0))


def region_shared_quantities(closure: RegionClosure, shared: SharedEntityMap) -> tuple[tuple, ...]:
    """Quantity keys of ``closure`` that appear in more than one region, in layout order."""
    nodes = [i for i in closure.nodes if len(shared.node_regions[i]) > 1]
    arcs = [(lid, d) for d in (FORWARD, REVERSE) for lid in closure.lines
            if len(shared.line_regions[(lid, d)]) > 1]
    return (tuple(("v", i) for i in nodes) + tuple(("theta", i) for i in nodes)
            + tuple(("p", lid, d) for lid, d in arcs) + tuple(("q", lid, d) for lid, d in arcs))


class OPFProblem(NLPProblem):
    def __init__(self, network: Network, nodes, owned, lines, gens, fix_ref: bool,
                 consensus: ConsensusParams | None = None):
        self.network = network
        self.layout = lay = VariableLayout(tuple(nodes), tuple(lines), tuple(gens))
        self.owned = tuple(sorted(owned))
        self.fix_ref = fix_ref
        self.consensus = consensus or ConsensusParams.empty()
        net = network
        pos = {b: i for i, b in enumerate(lay.nodes)}
        nn, nl, na, ng = lay.n_node, len(lay.lines), lay.n_arc, lay.n_gen
        self.n = lay.size

        # arc data
        fa = np.empty(na, dtype=int)
        ta = np.empty(na, dtype=int)
        coef = np.empty((na, 4))
        smax = np.full(na, np.inf)
        for k, lid in enumerate(lay.lines):
            ln = net.lines[lid]
            fa[k], ta[k] = pos[ln.from_bus], pos[ln.to_bus]
            fa[nl + k], ta[nl + k] = pos[ln.to_bus], pos[ln.from_bus]
            coef[k] = ln.coeffs.forward()
            coef[nl + k] = ln.coeffs.reverse()
            if ln.s_max is not None:
                smax[k] = smax[nl + k] = ln.s_max
        self._fa, self._ta = fa, ta
        self._gc, self._bc, self._g, self._b = coef.T.copy()
        self._lim = np.flatnonzero(np.isfinite(smax))
        self._smax2 = smax[self._lim] ** 2

        # bounds
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        lb[lay.v] = [net.buses[b].v_min for b in lay.nodes]
        ub[lay.v] = [net.buses[b].v_max for b in lay.nodes]
        gens_ = [net.generators[g] for g in lay.gens]
        lb[lay.pg] = [g.p_min for g in gens_]
        ub[lay.pg] = [g.p_max for g in gens_]
        lb[lay.qg] = [g.q_min for g in gens_]
        ub[lay.qg] = [g.q_max for g in gens_]
        self.lb, self.ub = lb, ub
        self._c2 = np.array([g.c2 for g in gens_])
        self._c1 = np.array([g.c1 for g in gens_])
        self._c0 = np.array([g.c0 for g in gens_])

        # balance rows at owned buses
        own_pos = np.array([pos[b] for b in self.owned], dtype=int)
        self._own = own_pos
        no = len(own_pos)
        row_of = {p: r for r, p in enumerate(own_pos)}
        self._pd = np.array([net.buses[b].p_d for b in self.owned])
        self._qd = np.array([net.buses[b].q_d for b in self.owned])
        self._gsh = np.array([net.buses[b].g_sh for b in self.owned])
        self._bsh = np.array([net.buses[b].b_sh for b in self.owned])
        arc_rows, arc_cols = [], []
        for a in range(na):
            r = row_of.get(fa[a])
            if r is not None:
                arc_rows.append(r)
                arc_cols.append(a)
        gen_rows, gen_cols = [], []
        for k, g in enumerate(gens_):
            r = row_of.get(pos[g.bus])
            if r is None:
                raise ValueError(f"generator {g.index} sits at a bus the region does not own")
            gen_rows.append(r)
            gen_cols.append(k)
        self._arc_rows, self._arc_cols = np.array(arc_rows, int), np.array(arc_cols, int)
        self._gen_rows, self._gen_cols = np.array(gen_rows, int), np.array(gen_cols, int)

        self._ref = None
        if fix_ref:
            rb = net.ref_bus
            if rb not in pos:
                raise ValueError("reference bus is not modelled in this problem")
            self._ref = pos[rb]

        # angle-difference rows (once per line)
        up, lo = [], []
        for k, lid in enumerate(lay.lines):
            ln = net.lines[lid]
            if ln.theta_max is not None:
                up.append((k, ln.theta_max))
            if ln.theta_min is not None:
                lo.append((k, ln.theta_min))
        self._ang_up = np.array([k for k, _ in up], int)
        self._ang_up_val = np.array([v for _, v in up])
        self._ang_lo = np.array([k for k, _ in lo], int)
        self._ang_lo_val = np.array([v for _, v in lo])

        self.m_eq = 2 * na + 2 * no + (1 if fix_ref else 0)
        self.m_ineq = len(self._lim) + len(up) + len(lo)

        # consensus terms
        cons = self.consensus
        self._cidx = np.array([lay.index(k) for k in cons.keys], dtype=int)
        self._beta = np.asarray(cons.beta, float)
        self._y = np.asarray(cons.y, float)
        self._rho = np.asarray(cons.rho, float)

        self._build_structure()

    # ------------------------------------------------------------------
    def _build_structure(self):
        lay = self.layout
        nn, na, ng = lay.n_node, lay.n_arc, lay.n_gen
        iv, ith = 0, nn
        ip, iq = 2 * nn, 2 * nn + na
        ipg, iqg = 2 * nn + 2 * na, 2 * nn + 2 * na + ng
        A, B = self._fa, self._ta
        ar = np.arange(na)
        no = len(self._own)

        # equality Jacobian structure
        rows, cols = [], []
        # p flow rows: [p_a, vA, vB, thA, thB]
        for base_row, flow_col in ((0, ip), (na, iq)):
            r = base_row + ar
            rows += [r, r, r, r, r]
            cols += [flow_col + ar, iv + A, iv + B, ith + A, ith + B]
        rb = 2 * na
        # P balance: pg, p arcs, v
        rows += [rb + self._gen_rows, rb + self._arc_rows, rb + np.arange(no)]
        cols += [ipg + self._gen_cols, ip + self._arc_cols, iv + self._own]
        rb += no
        rows += [rb + self._gen_rows, rb + self._arc_rows, rb + np.arange(no)]
        cols += [iqg + self._gen_cols, iq + self._arc_cols, iv + self._own]
        if self._ref is not None:
            rows.append(np.array([2 * na + 2 * no]))
            cols.append(np.array([ith + self._ref]))
        self._je_rows = np.concatenate(rows).astype(int)
        self._je_cols = np.concatenate(cols).astype(int)

        # inequality Jacobian structure
        lim = self._lim
        nlim = len(lim)
        r_lim = np.arange(nlim)
        rows = [r_lim, r_lim]
        cols = [ip + lim, iq + lim]
        o = nlim
        k = self._ang_up
        r = o + np.arange(len(k))
        rows += [r, r]
        cols += [ith + A[k], ith + B[k]]
        o += len(k)
        k = self._ang_lo
        r = o + np.arange(len(k))
        rows += [r, r]
        cols += [ith + A[k], ith + B[k]]
        self._ji_rows = np.concatenate(rows).astype(int) if rows else np.zeros(0, int)
        self._ji_cols = np.concatenate(cols).astype(int) if cols else np.zeros(0, int)
        self._idx = dict(iv=iv, ith=ith, ip=ip, iq=iq, ipg=ipg, iqg=iqg)

    # ------------------------------------------------------------------
    def _split(self, x):
        lay = self.layout
        return x[lay.v], x[lay.theta], x[lay.p], x[lay.q], x[lay.pg], x[lay.qg]

    def _arc_terms(self, v, th):
        """Flow-expression pieces shared by values and derivatives."""
        va, vb = v[self._fa], v[self._ta]
        d = th[self._fa] - th[self._ta]
        c, s = np.cos(d), np.sin(d)
        g, b = self._g, self._b
        kP = g * c - b * s          # P = gc va^2 - va vb kP
        kPd = -g * s - b * c        # d kP / d delta
        kQ = b * c + g * s          # Q = bc va^2 - va vb kQ
        kQd = -b * s + g * c
        return va, vb, kP, kPd, kQ, kQd

    def flows(self, x):
        """Arc flows (P, Q) implied by the voltages in ``x``."""
        v, th = x[self.layout.v], x[self.layout.theta]
        va, vb, kP, _, kQ, _ = self._arc_terms(v, th)
        return self._gc * va * va - va * vb * kP, self._bc * va * va - va * vb * kQ

    def objective(self, x):
        pg = x[self.layout.pg]
        f = float(np.sum(self._c2 * pg * pg + self._c1 * pg + self._c0))
        if len(self._cidx):
            dw = x[self._cidx] - self._beta
            f += float(np.sum(self._y * dw + 0.5 * self._rho * dw * dw))
        return f

    def generation_cost(self, x) -> float:
        pg = x[self.layout.pg]
        return float(np.sum(self._c2 * pg * pg + self._c1 * pg + self._c0))

    def gradient(self, x):
        g = np.zeros(self.n)
        pg = x[self.layout.pg]
        g[self.layout.pg] = 2 * self._c2 * pg + self._c1
        if len(self._cidx):
            dw = x[self._cidx] - self._beta
            np.add.at(g, self._cidx, self._y + self._rho * dw)
        return g

    def constraints_eq(self, x):
        v, th, p, q, pg, qg = self._split(x)
        P, Q = self.flows(x)
        no = len(self._own)
        bal_p = -self._pd - self._gsh * v[self._own] ** 2
        bal_q = -self._qd + self._bsh * v[self._own] ** 2
        bal_p = bal_p + np.bincount(self._gen_rows, pg[self._gen_cols], minlength=no)
        bal_p = bal_p - np.bincount(self._arc_rows, p[self._arc_cols], minlength=no)
        bal_q = bal_q + np.bincount(self._gen_rows, qg[self._gen_cols], minlength=no)
        bal_q = bal_q - np.bincount(self._arc_rows, q[self._arc_cols], minlength=no)
        parts = [p - P, q - Q, bal_p, bal_q]
        if self._ref is not None:
            parts.append(th[self._ref: self._ref + 1])
        return np.concatenate(parts)

    def jacobian_eq(self, x):
        v, th, p, q, pg, qg = self._split(x)
        va, vb, kP, kPd, kQ, kQd = self._arc_terms(v, th)
        na = self.layout.n_arc
        one = np.ones(na)
        # derivatives of (flow var - expression)
        vals = [
            one, -(2 * self._gc * va - vb * kP), va * kP, va * vb * kPd, -va * vb * kPd,
            one, -(2 * self._bc * va - vb * kQ), va * kQ, va * vb * kQd, -va * vb * kQd,
        ]
        vo = v[self._own]
        vals += [np.ones(len(self._gen_rows)), -np.ones(len(self._arc_rows)), -2 * self._gsh * vo]
        vals += [np.ones(len(self._gen_rows)), -np.ones(len(self._arc_rows)), 2 * self._bsh * vo]
        if self._ref is not None:
            vals.append(np.ones(1))
        data = np.concatenate(vals)
        return sp.csr_matrix((data, (self._je_rows, self._je_cols)), shape=(self.m_eq, self.n))

    def constraints_ineq(self, x):
        v, th, p, q, pg, qg = self._split(x)
        lim = self._lim
        parts = [p[lim] ** 2 + q[lim] ** 2 - self._smax2]
        d = th[self._fa] - th[self._ta]
        parts.append(d[self._ang_up] - self._ang_up_val)
        parts.append(self._ang_lo_val - d[self._ang_lo])
        return np.concatenate(parts)

    def jacobian_ineq(self, x):
        v, th, p, q, pg, qg = self._split(x)
        lim = self._lim
        nu, nlo = len(self._ang_up), len(self._ang_lo)
        data = np.concatenate([2 * p[lim], 2 * q[lim], np.ones(nu), -np.ones(nu),
                               -np.ones(nlo), np.ones(nlo)])
        return sp.csr_matrix((data, (self._ji_rows, self._ji_cols)), shape=(self.m_ineq, self.n))

    def hessian(self, x, obj_factor, lam_eq, lam_ineq):
        lay = self.layout
        ix = self._idx
        v, th = x[lay.v], x[lay.theta]
        va, vb, kP, kPd, kQ, kQd = self._arc_terms(v, th)
        na = lay.n_arc
        lp, lq = lam_eq[:na], lam_eq[na: 2 * na]
        # second derivatives of -(expression): the flow variable enters linearly
        # P = gc va^2 - va vb k(delta); k'' = -k
        A, B = self._fa, self._ta
        cvA, cvB = ix["iv"] + A, ix["iv"] + B
        ctA, ctB = ix["ith"] + A, ix["ith"] + B

        def block(gc, k, kd, lam):
            vv_aa = -lam * 2 * gc
            vv_ab = lam * k
            vt_a_a = lam * vb * kd
            vt_a_b = -lam * vb * kd
            vt_b_a = lam * va * kd
            vt_b_b = -lam * va * kd
            tt = -lam * va * vb * k
            return vv_aa, vv_ab, vt_a_a, vt_a_b, vt_b_a, vt_b_b, tt

        rows, cols, vals = [], [], []
        for gc, k, kd, lam in ((self._gc, kP, kPd, lp), (self._bc, kQ, kQd, lq)):
            vv_aa, vv_ab, vaA, vaB, vbA, vbB, tt = block(gc, k, kd, lam)
            rows += [cvA, cvA, cvB, cvA, ctA, cvA, ctB, cvB, ctA, cvB, ctB, ctA, ctA, ctB, ctB]
            cols += [cvA, cvB, cvA, ctA, cvA, ctB, cvA, ctA, cvB, ctB, cvB, ctA, ctB, ctA, ctB]
            vals += [vv_aa, vv_ab, vv_ab, vaA, vaA, vaB, vaB, vbA, vbA, vbB, vbB, tt, -tt, -tt, tt]

        no = len(self._own)
        lbp = lam_eq[2 * na: 2 * na + no]
        lbq = lam_eq[2 * na + no: 2 * na + 2 * no]
        rows.append(ix["iv"] + self._own)
        cols.append(ix["iv"] + self._own)
        vals.append(-2 * self._gsh * lbp + 2 * self._bsh * lbq)

        nlim = len(self._lim)
        if nlim:
            ll = 2 * lam_ineq[:nlim]
            rows += [ix["ip"] + self._lim, ix["iq"] + self._lim]
            cols += [ix["ip"] + self._lim, ix["iq"] + self._lim]
            vals += [ll, ll]

        ipg = ix["ipg"] + np.arange(lay.n_gen)
        rows.append(ipg)
        cols.append(ipg)
        vals.append(obj_factor * 2 * self._c2)
        if len(self._cidx):
            rows.append(self._cidx)
            cols.append(self._cidx)
            vals.append(obj_factor * self._rho)

        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n, self.n))
        return H.tocsr()

    # ------------------------------------------------------------------
    def flat_start(self, margin: float = 1e-4) -> np.ndarray:
        """v = 1, theta = 0, flows 0, generation at mid-range, pulled inside the bounds."""
        lay = self.layout
        x = np.zeros(self.n)
        x[lay.v] = 1.0
        x[lay.pg] = 0.5 * (self.lb[lay.pg] + self.ub[lay.pg])
        x[lay.qg] = 0.5 * (self.lb[lay.qg] + self.ub[lay.qg])
        fin = np.isfinite(self.lb) & np.isfinite(self.ub)
        rng = np.where(fin, self.ub - self.lb, 0.0)
        lo = np.where(np.isfinite(self.lb), self.lb + margin * rng, -np.inf)
        hi = np.where(np.isfinite(self.ub), self.ub - margin * rng, np.inf)
        return np.clip(x, lo, hi)

    def with_consensus(self, beta, y) -> "OPFProblem":
        """Copy of this problem with new reference values and duals (same keys and rho)."""
        new = copy.copy(self)
        beta = np.asarray(beta, float)
        y = np.asarray(y, float)
        new.consensus = ConsensusParams(self.consensus.keys, beta, y, self._rho)
        new._beta, new._y = beta, y
        return new

    def values(self, x, keys=None) -> np.ndarray:
        """Entries of ``x`` for quantity keys (default: this problem's consensus keys)."""
        if keys is None:
            return x[self._cidx]
        return np.array([x[self.layout.index(k)] for k in keys])

    def unpack(self, x) -> dict:
        """Solution as dictionaries keyed by network index / quantity key."""
        lay = self.layout
        v, th, p, q, pg, qg = self._split(x)
        out = {
            "v": dict(zip(lay.nodes, v.tolist())),
            "theta": dict(zip(lay.nodes, th.tolist())),
            "pg": dict(zip(lay.gens, pg.tolist())),
            "qg": dict(zip(lay.gens, qg.tolist())),
            "p": {},
            "q": {},
        }
        nl = len(lay.lines)
        for k, lid in enumerate(lay.lines):
            out["p"][(lid, FORWARD)] = float(p[k])
            out["p"][(lid, REVERSE)] = float(p[nl + k])
            out["q"][(lid, FORWARD)] = float(q[k])
            out["q"][(lid, REVERSE)] = float(q[nl + k])
        return out


def build_centralized(network: Network) -> OPFProblem:
    """The full-network OPF with the reference angle fixed at zero."""
    try:
        network.ref_bus
    except LookupError:
        from radopf.matpower import NoReferenceBus
        raise NoReferenceBus() from None
    n = network.n_bus
    return OPFProblem(network, range(n), range(n), range(len(network.lines)),
                      range(len(network.generators)), fix_ref=True)


def build_region(network: Network, closure: RegionClosure, shared: SharedEntityMap,
                 consensus: ConsensusParams | None = None) -> OPFProblem:
    """Subproblem of one region: owned-bus balance, owned generators, consensus terms.

    ``consensus`` must list exactly the region's shared quantities (see
    :func:`region_shared_quantities`), in any order.
    """
    expected = region_shared_quantities(closure, shared)
    consensus = consensus or ConsensusParams.empty()
    if set(consensus.keys) != set(expected) or len(consensus.keys) != len(expected):
        missing = set(expected) - set(consensus.keys)
        extra = set(consensus.keys) - set(expected)
        raise InconsistentConsensusKeys(
            f"region {closure.k}: {len(missing)} shared quantities missing, {len(extra)} unexpected")
    fix_ref = network.ref_bus in closure.owned
    return OPFProblem(network, closure.nodes, closure.owned, closure.lines, closure.gens,
                      fix_ref=fix_ref, consensus=consensus)


def total_cost(network: Network, dispatch) -> float:
    """Generation cost in $/h of a dispatch given in p.u., one entry per generator."""
    dispatch = np.asarray(dispatch, float)
    if len(dispatch) != len(network.generators):
        raise ValueError(f"dispatch has {len(dispatch)} entries for {len(network.generators)} generators")
    return float(sum(g.cost(p) for g, p in zip(network.generators, dispatch)))


def gap(p_dica: float, p_ipm: float) -> float:
    """Relative objective difference ``|(p_ipm - p_dica) / p_ipm|``."""
    if p_ipm == 0:
        raise ZeroDivisionError("reference objective is zero")
    return abs((p_ipm - p_dica) / p_ipm)
