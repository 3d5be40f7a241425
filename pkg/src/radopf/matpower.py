"""MATPOWER case file reader.

Reads the matrix-assignment text format (``mpc.bus = [ ... ];``) into plain
records, and converts those records into a per-unit :class:`~radopf.network.Network`.

Only the fields needed for AC-OPF are kept. Unit conventions follow
MATPOWER: powers in MW/MVAr, angles in degrees, impedances in p.u.
"""

from __future__ import annotations

import cmath
import math
import re
from dataclasses import dataclass
from pathlib import Path

from radopf.network import Bus, Generator, Line, Network, line_coefficients


class CaseError(ValueError):
    """Base class for problems found in a case file."""


class MissingTable(CaseError):
    def __init__(self, name: str):
        super().__init__(f"case has no mpc.{name} table")
        self.name = name


class MalformedRow(CaseError):
    def __init__(self, line: int, reason: str = ""):
        msg = f"malformed row at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)
        self.line = line


class UnsupportedCostModel(CaseError):
    def __init__(self, model: int, detail: str = ""):
        msg = f"unsupported generator cost model {model}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.model = model


class IslandedBus(CaseError):
    def __init__(self, bus_id: int):
        super().__init__(f"bus {bus_id} is isolated (type 4)")
        self.bus_id = bus_id


class NoReferenceBus(CaseError):
    def __init__(self, detail: str = "no bus of type 3"):
        super().__init__(detail)


class DisconnectedGraph(CaseError):
    def __init__(self, unreached: list[int]):
        head = ", ".join(str(b) for b in unreached[:10])
        super().__init__(f"in-service network is not connected; unreachable buses: {head}")
        self.unreached = unreached


@dataclass(frozen=True)
class BusRow:
    id: int
    type: int
    pd: float
    qd: float
    gs: float
    bs: float
    vm: float
    va: float
    vmax: float
    vmin: float


@dataclass(frozen=True)
class GenRow:
    bus: int
    pg: float
    qg: float
    qmax: float
    qmin: float
    pmax: float
    pmin: float
    status: int


@dataclass(frozen=True)
class BranchRow:
    fbus: int
    tbus: int
    r: float
    x: float
    b: float
    rate_a: float
    ratio: float
    angle: float
    status: int
    angmin: float
    angmax: float


@dataclass(frozen=True)
class CostRow:
    model: int
    startup: float
    shutdown: float
    n: int
    coeffs: tuple[float, ...]


@dataclass(frozen=True)
class RawCase:
    base_mva: float
    bus_rows: tuple[BusRow, ...]
    gen_rows: tuple[GenRow, ...]
    branch_rows: tuple[BranchRow, ...]
    gencost_rows: tuple[CostRow, ...]
    name: str = ""


_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;%\n]+)")
_NAME_RE = re.compile(r"^\s*function\s+(?:\w+\s*=\s*)?(\w+)", re.M)

# minimum column counts (MATPOWER column layout)
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}


def _number(tok: str) -> float:
    t = tok.strip().lower()
    if t in ("inf", "+inf"):
        return math.inf
    if t == "-inf":
        return -math.inf
    return float(tok)


def _strip_comment(line: str) -> str:
    # case files do not use '%' inside strings of numeric tables
    i = line.find("%")
    return line if i < 0 else line[:i]


def _read_tables(text: str) -> dict[str, list[tuple[int, list[float]]]]:
    """Return {table name: [(line number, row values), ...]} for numeric tables."""
    lines = text.splitlines()
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    i = 0
    while i < len(lines):
        code = _strip_comment(lines[i])
        m = _TABLE_RE.search(code)
        if not m:
            i += 1
            continue
        name = m.group(1)
        rows: list[tuple[int, list[float]]] = []
        rest = code[m.end():]
        lineno = i + 1
        done = False
        while True:
            if "]" in rest:
                rest = rest[: rest.index("]")]
                done = True
            for chunk in rest.split(";"):
                toks = chunk.replace(",", " ").split()
                if not toks:
                    continue
                try:
                    rows.append((lineno, [_number(t) for t in toks]))
                except ValueError:
                    raise MalformedRow(lineno, f"non-numeric entry in mpc.{name}") from None
            if done:
                break
            i += 1
            if i >= len(lines):
                raise MalformedRow(lineno, f"unterminated mpc.{name} table")
            lineno = i + 1
            rest = _strip_comment(lines[i])
        tables[name] = rows
        i += 1
    return tables


def _need(tables, name):
    if name not in tables:
        raise MissingTable(name)
    rows = tables[name]
    for lineno, row in rows:
        if len(row) < _MIN_COLS[name]:
            raise MalformedRow(lineno, f"mpc.{name} row has {len(row)} columns, need {_MIN_COLS[name]}")
    return rows


def parse_case(text: str) -> RawCase:
    """Parse MATPOWER case text into a :class:`RawCase`.

    Raises:
        MissingTable: a required table (bus, gen, branch, gencost) or baseMVA is absent.
        MalformedRow: a row is too short or contains a non-numeric token.
        UnsupportedCostModel: a cost row is not polynomial of degree <= 2.
    """
    tables = _read_tables(text)
    m = _SCALAR_RE.search("\n".join(_strip_comment(ln) for ln in text.splitlines()))
    if not m:
        raise MissingTable("baseMVA")
    base_mva = _number(m.group(1))

    buses = tuple(
        BusRow(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[7], r[8], r[11], r[12])
        for _, r in _need(tables, "bus")
    )
    gens = tuple(
        GenRow(int(r[0]), r[1], r[2], r[3], r[4], r[8], r[9], int(r[7]))
        for _, r in _need(tables, "gen")
    )
    branches = tuple(
        BranchRow(int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[8], r[9], int(r[10]), r[11], r[12])
        for _, r in _need(tables, "branch")
    )

    cost_rows = _need(tables, "gencost")
    if len(cost_rows) not in (len(gens), 2 * len(gens)):
        raise MalformedRow(cost_rows[0][0] if cost_rows else 0,
                           f"{len(cost_rows)} gencost rows for {len(gens)} generators")
    costs = []
    # rows beyond the generator count hold reactive costs; they are not used
    for lineno, r in cost_rows[: len(gens)]:
        model, n = int(r[0]), int(r[3])
        if model != 2:
            raise UnsupportedCostModel(model, "only polynomial model 2 is accepted")
        if n > 3:
            raise UnsupportedCostModel(model, f"polynomial with {n} coefficients")
        if len(r) < 4 + n:
            raise MalformedRow(lineno, f"gencost row declares {n} coefficients")
        costs.append(CostRow(model, r[1], r[2], n, tuple(r[4 : 4 + n])))

    nm = _NAME_RE.search(text)
    return RawCase(base_mva, buses, gens, branches, tuple(costs), nm.group(1) if nm else "")


def read_case(path: str | Path) -> RawCase:
    return parse_case(Path(path).read_text())


def _angle_bound(deg: float) -> float | None:
    if abs(deg) >= 360.0:
        return None
    return math.radians(deg)


def to_network(raw: RawCase) -> Network:
    """Convert raw MATPOWER records into a per-unit :class:`Network`.

    Out-of-service branches and generators are dropped, bus ids are remapped
    to dense indices in file order, ratio 0 becomes 1, and a zero ``rateA``
    means the line has no flow limit.
    """
    base = raw.base_mva
    if not base > 0:
        raise CaseError(f"baseMVA must be positive, got {base}")

    index: dict[int, int] = {}
    buses = []
    refs = []
    for row in raw.bus_rows:
        if row.id in index:
            raise CaseError(f"duplicate bus id {row.id}")
        if row.type == 4:
            raise IslandedBus(row.id)
        if not 0 < row.vmin <= row.vmax:
            raise CaseError(f"bus {row.id}: invalid voltage bounds [{row.vmin}, {row.vmax}]")
        k = len(buses)
        index[row.id] = k
        if row.type == 3:
            refs.append(k)
        buses.append(Bus(
            index=k,
            p_d=row.pd / base,
            q_d=row.qd / base,
            g_sh=row.gs / base,
            b_sh=row.bs / base,
            v_min=row.vmin,
            v_max=row.vmax,
            is_ref=row.type == 3,
            v_init=row.vm,
            theta_init=math.radians(row.va),
        ))
    if not refs:
        raise NoReferenceBus()
    if len(refs) > 1:
        raise NoReferenceBus(f"{len(refs)} reference buses; exactly one is required")

    def bus_index(bus_id: int) -> int:
        try:
            return index[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus id {bus_id}") from None

    lines = []
    for row in raw.branch_rows:
        f, t = bus_index(row.fbus), bus_index(row.tbus)
        if row.status == 0:
            continue
        if f == t:
            raise CaseError(f"branch {row.fbus}-{row.tbus} connects a bus to itself")
        z = complex(row.r, row.x)
        if z == 0:
            raise CaseError(f"branch {row.fbus}-{row.tbus} has zero series impedance")
        y = 1.0 / z
        ratio = row.ratio if row.ratio != 0 else 1.0
        tap = cmath.rect(ratio, math.radians(row.angle))
        lo, hi = row.angmin, row.angmax
        if lo == 0 and hi == 0:
            th_min = th_max = None
        else:
            th_min, th_max = _angle_bound(lo), _angle_bound(hi)
        lines.append(Line(
            id=len(lines),
            from_bus=f,
            to_bus=t,
            y=y,
            b_ch=row.b,
            tap=tap,
            s_max=row.rate_a / base if row.rate_a > 0 else None,
            theta_min=th_min,
            theta_max=th_max,
            coeffs=line_coefficients(y, row.b, tap),
        ))

    gens = []
    for row, cost in zip(raw.gen_rows, raw.gencost_rows):
        b = bus_index(row.bus)
        if row.status <= 0:
            continue
        c = (0.0,) * (3 - cost.n) + cost.coeffs  # pad to (c2, c1, c0)
        gens.append(Generator(
            index=len(gens),
            bus=b,
            p_min=row.pmin / base,
            p_max=row.pmax / base,
            q_min=row.qmin / base,
            q_max=row.qmax / base,
            # $/h as a function of p.u. output
            c2=c[0] * base * base,
            c1=c[1] * base,
            c0=c[2],
        ))

    net = Network(
        base_mva=base,
        buses=tuple(buses),
        lines=tuple(lines),
        generators=tuple(gens),
        bus_ids=tuple(r.id for r in raw.bus_rows),
        name=raw.name,
    )
    unreached = net.unreachable_from(refs[0])
    if unreached:
        raise DisconnectedGraph([net.bus_ids[i] for i in unreached])
    return net


def load_network(path: str | Path) -> Network:
    """Read a case file from disk and convert it to a network."""
    return to_network(read_case(path))


CASE_DIR = Path(__file__).parent / "cases"


def bundled_case(name: str) -> Path:
    """Path of a case file shipped with the package, e.g. ``bundled_case("case9")``."""
    stem = name[:-2] if name.endswith(".m") else name
    if not stem.startswith("case"):
        stem = "case" + stem
    path = CASE_DIR / f"{stem}.m"
    if not path.exists():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return path


def resolve_case(name_or_path: str | Path) -> Path:
    """Accept either a filesystem path or the name of a bundled case."""
    p = Path(name_or_path)
    if p.exists():
        return p
    return bundled_case(str(name_or_path))
