import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radopf.acopf import (
    ConsensusParams,
    InconsistentConsensusKeys,
    VariableLayout,
    build_centralized,
    build_region,
    gap,
    region_shared_quantities,
    total_cost,
)
from radopf.matpower import NoReferenceBus, parse_case, to_network
from radopf.network import Bus, Network
from radopf.nlp import check_derivatives, fd_hessian, solve
from radopf.partition import FORWARD, REVERSE, Partition, radial_partition, region_closures, single_region

from conftest import case_network, central_solution, two_bus_text


def random_point(prob, rng):
    """Interior point with voltages near 1 and small angles."""
    x = prob.flat_start()
    lay = prob.layout
    x[lay.v] = rng.uniform(0.95, 1.05, lay.n_node)
    x[lay.theta] = rng.uniform(-0.3, 0.3, lay.n_node)
    x[lay.p] = rng.uniform(-1, 1, lay.n_arc)
    x[lay.q] = rng.uniform(-1, 1, lay.n_arc)
    lo, hi = prob.lb[lay.pg], prob.ub[lay.pg]
    x[lay.pg] = lo + rng.uniform(0.1, 0.9, lay.n_gen) * (hi - lo)
    lo, hi = prob.lb[lay.qg], prob.ub[lay.qg]
    x[lay.qg] = lo + rng.uniform(0.1, 0.9, lay.n_gen) * (hi - lo)
    return x


def pi_model_flows(net, v, th):
    """Sending-end complex power at both ends of every line from branch currents."""
    V = v * np.exp(1j * th)
    s_from, s_to = [], []
    for ln in net.lines:
        t = ln.tap
        y, ysh = ln.y, 0.5j * ln.b_ch
        vf, vt = V[ln.from_bus], V[ln.to_bus]
        i_f = (y + ysh) / abs(t) ** 2 * vf - y / np.conj(t) * vt
        i_t = (y + ysh) * vt - y / t * vf
        s_from.append(vf * np.conj(i_f))
        s_to.append(vt * np.conj(i_t))
    return np.array(s_from), np.array(s_to)


class TestVariableLayout:
    def test_blocks_are_dense_and_disjoint(self, case9):
        lay = build_centralized(case9).layout
        blocks = [lay.v, lay.theta, lay.p, lay.q, lay.pg, lay.qg]
        idx = np.concatenate([np.arange(lay.size)[b] for b in blocks])
        assert sorted(idx) == list(range(lay.size))
        assert lay.size == 2 * 9 + 4 * 9 + 2 * 3

    def test_index_lookup(self):
        lay = VariableLayout((3, 5), (7,), (0,))
        assert lay.index(("v", 5)) == 1
        assert lay.index(("theta", 3)) == 2
        assert lay.index(("p", 7, FORWARD)) == 4
        assert lay.index(("p", 7, REVERSE)) == 5
        assert lay.index(("q", 7, REVERSE)) == 7


class TestFlows:
    @pytest.mark.parametrize("name", ["case9", "case30", "case57", "case118", "case300"])
    def test_match_pi_model(self, name):
        net = case_network(name)
        prob = build_centralized(net)
        rng = np.random.default_rng(1)
        x = random_point(prob, rng)
        P, Q = prob.flows(x)
        s_from, s_to = pi_model_flows(net, x[prob.layout.v], x[prob.layout.theta])
        nl = len(net.lines)
        np.testing.assert_allclose(P[:nl], s_from.real, rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(Q[:nl], s_from.imag, rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(P[nl:], s_to.real, rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(Q[nl:], s_to.imag, rtol=1e-10, atol=1e-9)

    def test_forward_residual_as_written(self, case9):
        prob = build_centralized(case9)
        x = random_point(prob, np.random.default_rng(5))
        v, th = x[prob.layout.v], x[prob.layout.theta]
        res = prob.constraints_eq(x)
        for k, ln in enumerate(case9.lines):
            c = ln.coeffs
            i, j = ln.from_bus, ln.to_bus
            d = th[i] - th[j]
            expr = c.g_c_ij * v[i] ** 2 - c.g_ij * v[i] * v[j] * math.cos(d) + c.b_ij * v[i] * v[j] * math.sin(d)
            assert res[k] == pytest.approx(x[prob.layout.p][k] - expr, abs=1e-14)

    def test_two_bus_lossless_power_flow(self):
        # Y = -10i: P = 10 sin(d), and each end absorbs 10 - 10 cos(d) of reactive power
        pd = 0.5
        d = math.asin(pd / 10)
        qline = 10 - 10 * math.cos(d)
        net = to_network(parse_case(two_bus_text(pd=pd * 100, qd=-qline * 100, x=0.1)))
        prob = build_centralized(net)
        lay = prob.layout
        x = np.zeros(prob.n)
        x[lay.v] = 1.0
        x[lay.theta] = [0.0, -d]
        x[lay.p] = [pd, -pd]
        x[lay.q] = [qline, qline]
        x[lay.pg] = pd
        x[lay.qg] = qline
        assert np.max(np.abs(prob.constraints_eq(x))) < 1e-8


class TestCentralized:
    @pytest.mark.parametrize("name, expected", [("case9", 5296.68), ("case14", 8081.52)])
    def test_objective(self, name, expected):
        _, res = central_solution(name)
        assert res.ok
        assert res.objective == pytest.approx(expected, rel=1e-3)

    def test_total_cost_of_dispatch(self, case9):
        prob, res = central_solution("case9")
        dispatch = res.x[prob.layout.pg]
        assert total_cost(case9, dispatch) == pytest.approx(res.objective, rel=1e-12)
        assert total_cost(case9, dispatch) == pytest.approx(5296.68, rel=1e-3)

    def test_optimum_satisfies_constraints(self):
        prob, res = central_solution("case14")
        assert np.max(np.abs(prob.constraints_eq(res.x))) < 1e-7
        assert np.max(prob.constraints_ineq(res.x), initial=-1) < 1e-7
        assert np.all(res.x >= prob.lb - 1e-9) and np.all(res.x <= prob.ub + 1e-9)

    def test_zero_demand_zero_cost(self):
        # with p_min = 0 the equalities would pin pg to its bound (no interior);
        # a two-sided range keeps the optimum pg = 0 strictly inside
        net = to_network(parse_case(two_bus_text(c2=0.01, c1=0.0, c0=0.0, r=0.01, pmin=-50)))
        prob = build_centralized(net)
        res = solve(prob, prob.flat_start())
        assert res.ok
        assert res.objective == pytest.approx(0.0, abs=1e-6)
        assert np.abs(res.x[prob.layout.pg]).max() < 1e-4

    def test_reference_angle_fixed(self, case9):
        prob = build_centralized(case9)
        x = random_point(prob, np.random.default_rng(0))
        assert prob.constraints_eq(x)[-1] == x[prob.layout.theta][case9.ref_bus]

    def test_no_reference_bus(self):
        bus = Bus(0, 0.0, 0.0, 0.0, 0.0, 0.9, 1.1, is_ref=False)
        with pytest.raises(NoReferenceBus):
            build_centralized(Network(100.0, (bus,), (), ()))

    def test_line_limits_only_where_finite(self):
        net = case_network("case30")
        prob = build_centralized(net)
        limited = sum(ln.s_max is not None for ln in net.lines)
        angles = sum((ln.theta_min is not None) + (ln.theta_max is not None) for ln in net.lines)
        assert prob.m_ineq == 2 * limited + angles

    @given(p=st.floats(-5, 5), q=st.floats(-5, 5), s=st.floats(0.01, 5))
    def test_squared_limit_equivalent(self, p, q, s):
        assert (p * p + q * q - s * s <= 0) == (math.hypot(p, q) <= s) or math.isclose(math.hypot(p, q), s, rel_tol=1e-12)


def region_problems(net, part, beta_of=None, y_of=None, rho=400.0):
    closures, shared = region_closures(net, part)
    probs = []
    for cl in closures:
        keys = region_shared_quantities(cl, shared)
        beta = np.array([beta_of(q) if beta_of else 0.0 for q in keys])
        y = np.array([y_of(cl.k, q) if y_of else 0.0 for q in keys])
        probs.append(build_region(net, cl, shared, ConsensusParams(keys, beta, y, np.full(len(keys), rho))))
    return closures, shared, probs


def restrict(prob_global, prob_region, x):
    """Copy of a global point expressed in a region's layout."""
    lay, glay = prob_region.layout, prob_global.layout
    out = np.empty(prob_region.n)
    out[lay.v] = x[glay.v][list(lay.nodes)]
    out[lay.theta] = x[glay.theta][list(lay.nodes)]
    nl = len(prob_global.network.lines)
    fwd = np.array(lay.lines, int)
    out[lay.p] = np.concatenate([x[glay.p][fwd], x[glay.p][nl + fwd]])
    out[lay.q] = np.concatenate([x[glay.q][fwd], x[glay.q][nl + fwd]])
    out[lay.pg] = x[glay.pg][list(lay.gens)]
    out[lay.qg] = x[glay.qg][list(lay.gens)]
    return out


class TestRegion:
    def test_augmented_term_example(self):
        net = to_network(parse_case(two_bus_text()))
        part = Partition((frozenset({0}), frozenset({1})))
        closures, shared = region_closures(net, part)
        keys = region_shared_quantities(closures[0], shared)
        beta = np.array([1.0 if q[0] == "v" else 0.0 for q in keys])
        y = np.array([0.5 if q == ("v", 0) else 0.0 for q in keys])
        rho = np.array([400.0 if q[0] == "v" else 800.0 for q in keys])
        prob = build_region(net, closures[0], shared, ConsensusParams(keys, beta, y, rho))
        x = prob.flat_start()
        x[prob.layout.index(("v", 0))] = 1.02
        for q in keys:
            if q != ("v", 0):
                x[prob.layout.index(q)] = beta[keys.index(q)]
        assert prob.objective(x) - prob.generation_cost(x) == pytest.approx(0.09, abs=1e-12)

    def test_terms_vanish_at_consensus(self, case9):
        part = radial_partition(case9)
        rng = np.random.default_rng(3)
        closures, shared, probs = region_problems(case9, part, beta_of=lambda q: 0.3)
        for prob in probs:
            x = random_point(prob, rng)
            x[prob._cidx] = 0.3
            assert prob.objective(x) == prob.generation_cost(x)

    def test_no_shared_entities_equals_centralized(self, case14):
        closures, shared = region_closures(case14, single_region(case14))
        region = build_region(case14, closures[0], shared)
        central = build_centralized(case14)
        x = random_point(central, np.random.default_rng(0))
        assert region.objective(x) == central.objective(x)
        np.testing.assert_array_equal(region.constraints_eq(x), central.constraints_eq(x))

    @pytest.mark.parametrize("name", ["case9", "case14", "case30"])
    def test_region_sum_equals_centralized(self, name):
        net = case_network(name)
        central = build_centralized(net)
        x = random_point(central, np.random.default_rng(11))
        part = radial_partition(net)
        closures, shared, probs = region_problems(net, part)
        # beta at the consensus point: the copies' common value
        total = 0.0
        for prob in probs:
            xr = restrict(central, prob, x)
            prob = prob.with_consensus(xr[prob._cidx], np.zeros(len(prob._cidx)))
            total += prob.objective(xr)
        assert total == pytest.approx(central.objective(x), rel=1e-12)

    def test_owned_balance_matches_centralized(self, case14):
        central = build_centralized(case14)
        x = random_point(central, np.random.default_rng(2))
        ceq = central.constraints_eq(x)
        na, nb = 2 * len(case14.lines), case14.n_bus
        bal_p, bal_q = ceq[2 * na: 2 * na + nb], ceq[2 * na + nb: 2 * na + 2 * nb]
        closures, shared, probs = region_problems(case14, radial_partition(case14))
        seen = 0
        for cl, prob in zip(closures, probs):
            r = prob.constraints_eq(restrict(central, prob, x))
            ra, no = 2 * prob.layout.n_arc, len(prob.owned)
            np.testing.assert_allclose(r[ra: ra + no], bal_p[list(prob.owned)], atol=1e-14)
            np.testing.assert_allclose(r[ra + no: ra + 2 * no], bal_q[list(prob.owned)], atol=1e-14)
            seen += no
        assert seen == nb

    def test_reference_fixed_only_in_owner(self, case14):
        closures, shared, probs = region_problems(case14, radial_partition(case14))
        for cl, prob in zip(closures, probs):
            assert prob.fix_ref == (case14.ref_bus in cl.owned)

    def test_inconsistent_keys(self, case9):
        closures, shared = region_closures(case9, radial_partition(case9))
        keys = region_shared_quantities(closures[0], shared)[1:]
        z = np.zeros(len(keys))
        with pytest.raises(InconsistentConsensusKeys):
            build_region(case9, closures[0], shared, ConsensusParams(keys, z, z, z + 1))

    def test_nonpositive_rho_rejected(self):
        with pytest.raises(ValueError):
            ConsensusParams((("v", 0),), np.ones(1), np.zeros(1), np.zeros(1))


class TestDerivatives:
    @pytest.mark.parametrize("name", ["case9", "case14", "case30"])
    def test_centralized(self, name):
        prob = build_centralized(case_network(name))
        rng = np.random.default_rng(0)
        for x in [prob.flat_start()] + [random_point(prob, rng) for _ in range(10)]:
            err, where = check_derivatives(prob, x)
            assert err <= 1e-5, where

    def test_regions_with_consensus_terms(self, case9):
        rng = np.random.default_rng(4)
        _, _, probs = region_problems(case9, radial_partition(case9),
                                      beta_of=lambda q: 1.0 if q[0] == "v" else 0.1,
                                      y_of=lambda k, q: 3.0 * (k + 1))
        for prob in probs:
            for x in [prob.flat_start()] + [random_point(prob, rng) for _ in range(10)]:
                err, where = check_derivatives(prob, x)
                assert err <= 1e-5, where

    @pytest.mark.parametrize("name", ["case9", "case30"])
    def test_hessian_matches_finite_differences(self, name):
        prob = build_centralized(case_network(name))
        rng = np.random.default_rng(9)
        x = random_point(prob, rng)
        le = rng.normal(size=prob.m_eq)
        li = rng.normal(size=prob.m_ineq)
        H = prob.hessian(x, 0.7, le, li)
        H = H.toarray() if hasattr(H, "toarray") else np.asarray(H)
        H = np.tril(H) + np.tril(H, -1).T if not np.allclose(H, H.T) else H
        np.testing.assert_allclose(H, fd_hessian(prob, x, 0.7, le, li), atol=2e-5 * max(1, np.abs(H).max()))


class TestGap:
    def test_identical(self):
        assert gap(5296.68, 5296.68) == 0.0

    def test_full_precision_scale(self):
        assert gap(5296.6862, 5296.68620409727) < 1e-7

    def test_arithmetic(self):
        assert gap(101, 100) == pytest.approx(0.01)

    def test_zero_reference(self):
        with pytest.raises(ZeroDivisionError):
            gap(1.0, 0.0)


class TestTotalCost:
    def _one_gen(self, c2, c1, c0):
        net = to_network(parse_case(two_bus_text(c2=c2 / 1e4, c1=c1 / 100, c0=c0)))
        return net

    @pytest.mark.parametrize("coeffs, p, expected", [((0, 1, 0), 2, 2), ((1, 0, 5), 3, 14)])
    def test_examples(self, coeffs, p, expected):
        net = self._one_gen(*coeffs)
        assert total_cost(net, [p]) == pytest.approx(expected, rel=1e-12)

    def test_wrong_length(self, case9):
        with pytest.raises(ValueError):
            total_cost(case9, [0.0])
