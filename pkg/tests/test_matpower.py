import math

import pytest

from radopf.matpower import (
    CASE_DIR,
    BranchRow,
    BusRow,
    CostRow,
    DisconnectedGraph,
    GenRow,
    IslandedBus,
    MalformedRow,
    MissingTable,
    NoReferenceBus,
    UnsupportedCostModel,
    bundled_case,
    parse_case,
    read_case,
    resolve_case,
    to_network,
)

from conftest import THREE_BUS, case_network


class TestParseCase:
    def test_case9_table_sizes(self):
        raw = read_case(bundled_case("case9"))
        assert (len(raw.bus_rows), len(raw.gen_rows), len(raw.branch_rows)) == (9, 3, 9)
        assert raw.base_mva == 100
        assert raw.name == "case9"

    def test_hand_written_case_round_trips_every_field(self, three_bus_raw):
        raw = three_bus_raw
        assert raw.bus_rows == (
            BusRow(1, 3, 0.0, 0.0, 0.0, 0.0, 1.02, 0.0, 1.1, 0.9),
            BusRow(2, 2, 90.0, 30.0, 0.0, 19.0, 1.0, -4.5, 1.1, 0.9),
            BusRow(3, 1, 60.5, -25.0, 1.5, 0.0, 1.0, 30.0, 1.05, 0.95),
        )
        assert raw.gen_rows == (
            GenRow(1, 50.0, 0.0, 300.0, -300.0, 250.0, 10.0, 1),
            GenRow(2, 80.0, 0.0, 200.0, -150.0, 180.0, 0.0, 1),
        )
        assert raw.branch_rows == (
            BranchRow(1, 2, 0.01, 0.085, 0.176, 250.0, 0.0, 0.0, 1, -360.0, 360.0),
            BranchRow(2, 3, 0.017, 0.092, 0.158, 0.0, 0.98, 3.0, 1, -60.0, 60.0),
            BranchRow(1, 3, 0.0, 0.1, 0.0, 150.0, 0.0, 0.0, 1, 0.0, 0.0),
        )
        assert raw.gencost_rows == (
            CostRow(2, 1500.0, 0.0, 3, (0.11, 5.0, 150.0)),
            CostRow(2, 2000.0, 0.0, 3, (0.085, 1.2, 600.0)),
        )

    @pytest.mark.parametrize("table", ["bus", "gen", "branch", "gencost"])
    def test_missing_table(self, table):
        text = THREE_BUS.replace(f"mpc.{table} = [", f"mpc.{table}_unused = [")
        with pytest.raises(MissingTable) as err:
            parse_case(text)
        assert err.value.name == table

    def test_missing_base_mva(self):
        with pytest.raises(MissingTable):
            parse_case(THREE_BUS.replace("mpc.baseMVA = 100;", ""))

    def test_malformed_row_reports_line(self):
        text = THREE_BUS.replace("3	1	60.5", "3	1	sixty")
        with pytest.raises(MalformedRow) as err:
            parse_case(text)
        bad_line = next(i for i, ln in enumerate(text.splitlines(), 1) if "sixty" in ln)
        assert err.value.line == bad_line

    def test_short_row_is_malformed(self):
        with pytest.raises(MalformedRow):
            parse_case(THREE_BUS.replace("1	3	0.0	0.1	0	150	150	150	0	0	1	0	0;", "1	3	0.0	0.1;"))

    def test_piecewise_linear_cost_rejected(self):
        text = THREE_BUS.replace("2	1500	0	3	0.11	5	150;", "1	0	0	2	0	0	100	2000;")
        with pytest.raises(UnsupportedCostModel) as err:
            parse_case(text)
        assert err.value.model == 1

    def test_cubic_cost_rejected(self):
        text = THREE_BUS.replace("2	1500	0	3	0.11	5	150;", "2	0	0	4	1	0.11	5	150;")
        with pytest.raises(UnsupportedCostModel):
            parse_case(text)

    def test_reactive_cost_rows_ignored(self):
        text = THREE_BUS.replace(
            "2	2000	0	3	0.085	1.2	600;",
            "2	2000	0	3	0.085	1.2	600;\n	2	0	0	2	1	0;\n	2	0	0	2	2	0;",
        )
        raw = parse_case(text)
        assert len(raw.gencost_rows) == 2

    def test_whitespace_and_scientific_notation(self):
        text = THREE_BUS.replace("60.5	-2.5e1", "  6.05E+1 ,  -25   ")
        raw = parse_case(text)
        assert raw.bus_rows[2].pd == 60.5
        assert raw.bus_rows[2].qd == -25.0

    @pytest.mark.parametrize("path", sorted(CASE_DIR.glob("*.m")), ids=lambda p: p.stem)
    def test_bundled_cases_parse(self, path):
        raw = read_case(path)
        assert len(raw.gencost_rows) == len(raw.gen_rows)


class TestToNetwork:
    def test_per_unit_load(self, three_bus):
        assert three_bus.buses[1].p_d == pytest.approx(0.9, abs=1e-15)
        assert three_bus.buses[1].b_sh == pytest.approx(0.19)

    def test_degrees_to_radians(self, three_bus):
        assert three_bus.buses[2].theta_init == pytest.approx(math.pi / 6, abs=1e-15)
        ln = three_bus.lines[1]
        assert (ln.theta_min, ln.theta_max) == pytest.approx((-math.pi / 3, math.pi / 3))

    def test_unbounded_angle_conventions(self, three_bus):
        assert three_bus.lines[0].theta_min is None and three_bus.lines[0].theta_max is None
        assert three_bus.lines[2].theta_min is None and three_bus.lines[2].theta_max is None

    def test_zero_ratio_means_unit_tap(self, three_bus):
        assert three_bus.lines[0].tap == 1.0
        assert abs(three_bus.lines[1].tap) == pytest.approx(0.98)
        assert math.degrees(math.atan2(three_bus.lines[1].tap.imag, three_bus.lines[1].tap.real)) == pytest.approx(3.0)

    def test_case9_branch_cross_check(self, case9):
        # independent per-unit conversion of case9 branch 4-5: r=0.017, x=0.092, b=0.158, ratio 0
        ln = next(ln for ln in case9.lines if (case9.bus_ids[ln.from_bus], case9.bus_ids[ln.to_bus]) == (4, 5))
        den = 0.017**2 + 0.092**2
        g, b = 0.017 / den, -0.092 / den
        assert ln.tap == 1.0
        assert ln.y == pytest.approx(complex(g, b), rel=1e-14)
        assert ln.coeffs.g_ij == pytest.approx(g, rel=1e-14)
        assert ln.coeffs.b_ij == pytest.approx(-b, rel=1e-14)
        assert ln.coeffs.b_c_ij == pytest.approx(-b - 0.079, rel=1e-14)

    def test_rate_a_zero_means_no_limit(self, three_bus):
        assert three_bus.lines[0].s_max == pytest.approx(2.5)
        assert three_bus.lines[1].s_max is None

    def test_cost_rescaled_to_per_unit(self, three_bus):
        g = three_bus.generators[0]
        assert (g.c2, g.c1, g.c0) == pytest.approx((1100.0, 500.0, 150.0))
        # 50 MW priced in MW equals 0.5 p.u. priced in p.u.
        assert g.cost(0.5) == pytest.approx(0.11 * 50**2 + 5 * 50 + 150)

    def test_out_of_service_dropped(self):
        text = THREE_BUS.replace("2	3	0.017	0.092	0.158	0	0	0	0.98	3	1", "2	3	0.017	0.092	0.158	0	0	0	0.98	3	0")
        text = text.replace("2	80	0	200	-150	1	100	1", "2	80	0	200	-150	1	100	0")
        net = to_network(parse_case(text))
        assert len(net.lines) == 2
        assert len(net.generators) == 1

    def test_isolated_bus_rejected(self):
        with pytest.raises(IslandedBus) as err:
            to_network(parse_case(THREE_BUS.replace("3	1	60.5", "3	4	60.5")))
        assert err.value.bus_id == 3

    def test_no_reference_bus(self):
        with pytest.raises(NoReferenceBus):
            to_network(parse_case(THREE_BUS.replace("1	3	0	0	0	0	1	1.02", "1	2	0	0	0	0	1	1.02")))

    def test_disconnected_graph(self):
        # take lines 2-3 and 1-3 out of service, leaving bus 3 unreachable
        text = THREE_BUS.replace("0.98	3	1	-60", "0.98	3	0	-60").replace(
            "150	0	0	1	0	0;", "150	0	0	0	0	0;")
        with pytest.raises(DisconnectedGraph):
            to_network(parse_case(text))

    def test_deterministic(self):
        assert to_network(parse_case(THREE_BUS)) == to_network(parse_case(THREE_BUS))

    @pytest.mark.parametrize("name", ["case9", "case30", "case118"])
    def test_per_unit_load_totals(self, name):
        raw = read_case(bundled_case(name))
        net = case_network(name)
        mw = sum(r.pd for r in raw.bus_rows)
        assert sum(b.p_d for b in net.buses) * net.base_mva == pytest.approx(mw, rel=1e-9)

    def test_dense_indices_keep_original_ids(self):
        net = case_network("case300")
        assert [b.index for b in net.buses] == list(range(net.n_bus))
        assert net.bus_ids[-1] == 9533


class TestResolveCase:
    def test_bundled_names(self):
        assert resolve_case("case9") == resolve_case("case9.m") == bundled_case("9")

    def test_unknown(self):
        with pytest.raises(FileNotFoundError):
            resolve_case("case_does_not_exist")
