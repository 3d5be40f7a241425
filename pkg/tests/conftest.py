"""Shared fixtures: bundled networks, small hand-built cases, cached central solves."""

from __future__ import annotations

import functools

import pytest

from radopf.acopf import build_centralized
from radopf.matpower import bundled_case, load_network, parse_case, to_network
from radopf.nlp import solve

THREE_BUS = """\
function mpc = three_bus
mpc.version = '2';
mpc.baseMVA = 100;

%% bus data
%	bus_i	type	Pd	Qd	Gs	Bs	area	Vm	Va	baseKV	zone	Vmax	Vmin
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	2	90	30	0	19	1	1	-4.5	230	1	1.1	0.9;
	3	1	60.5	-2.5e1	1.5	0	1	1	30	230	1	1.05	0.95;
];

%% generator data
mpc.gen = [
	1	50	0	300	-300	1.02	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
	2	80	0	200	-150	1	100	1	180	0	0	0	0	0	0	0	0	0	0	0	0;
];

%% branch data
mpc.branch = [
	1	2	0.01	0.085	0.176	250	250	250	0	0	1	-360	360;
	2	3	0.017	0.092	0.158	0	0	0	0.98	3	1	-60	60;
	1	3	0.0	0.1	0	150	150	150	0	0	1	0	0;  % lossless
];

%% generator cost data
mpc.gencost = [
	2	1500	0	3	0.11	5	150;
	2	2000	0	3	0.085	1.2	600;
];
"""


def two_bus_text(pd: float = 0.0, qd: float = 0.0, c2: float = 0.01, c1: float = 0.0, c0: float = 0.0,
                 r: float = 0.0, x: float = 0.1, pmin: float = 0.0) -> str:
    """A generator bus feeding a load bus over one line."""
    return f"""\
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	{pd}	{qd}	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	{pmin};
];
mpc.branch = [
	1	2	{r}	{x}	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	{c2}	{c1}	{c0};
];
"""


@functools.lru_cache(maxsize=None)
def case_network(name: str):
    return load_network(bundled_case(name))


@functools.lru_cache(maxsize=None)
def central_solution(name: str):
    net = case_network(name)
    prob = build_centralized(net)
    return prob, solve(prob, prob.flat_start())


@pytest.fixture(scope="session")
def case9():
    return case_network("case9")


@pytest.fixture(scope="session")
def case14():
    return case_network("case14")


@pytest.fixture
def three_bus_raw():
    return parse_case(THREE_BUS)


@pytest.fixture
def three_bus(three_bus_raw):
    return to_network(three_bus_raw)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance check; printed at the end of the run."""
    def report(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
