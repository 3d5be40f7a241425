"""Per-unit power network model.

Lines carry the eight real coefficients that turn the pi-model into the
polar flow expressions

    p_ij = gc_ij v_i^2 - g_ij v_i v_j cos(t_i - t_j) + b_ij v_i v_j sin(t_i - t_j)
    q_ij = bc_ij v_i^2 - b_ij v_i v_j cos(t_i - t_j) - g_ij v_i v_j sin(t_i - t_j)

and the same expressions with the roles of i and j swapped (using the ``ji``
coefficients) for the flow entering the line at the to-bus.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property


class ZeroTap(ValueError):
    pass


class ZeroAdmittance(ValueError):
    pass


@dataclass(frozen=True)
class LineCoefficients:
    g_c_ij: float
    b_c_ij: float
    g_ij: float
    b_ij: float
    g_c_ji: float
    b_c_ji: float
    g_ji: float
    b_ji: float

    def forward(self) -> tuple[float, float, float, float]:
        """(gc, bc, g, b) for the flow measured at the from-bus."""
        return self.g_c_ij, self.b_c_ij, self.g_ij, self.b_ij

    def reverse(self) -> tuple[float, float, float, float]:
        """(gc, bc, g, b) for the flow measured at the to-bus."""
        return self.g_c_ji, self.b_c_ji, self.g_ji, self.b_ji


def line_coefficients(y: complex, b_ch: float, tap: complex) -> LineCoefficients:
    """Coefficients of the polar branch-flow equations.

    Args:
        y: series admittance of the pi-model (p.u.).
        b_ch: total line charging susceptance (p.u.).
        tap: complex tap ratio at the from-bus; 1 for a plain line.
    """
    if tap == 0:
        raise ZeroTap("tap ratio must be nonzero")
    if y == 0:
        raise ZeroAdmittance("series admittance must be nonzero")
    yc = y.conjugate()
    shunt = yc - 0.5j * b_ch
    a = shunt / (abs(tap) ** 2)
    m = yc / tap
    mt = yc / tap.conjugate()
    return LineCoefficients(
        g_c_ij=a.real, b_c_ij=a.imag,
        g_ij=m.real, b_ij=m.imag,
        g_c_ji=shunt.real, b_c_ji=shunt.imag,
        g_ji=mt.real, b_ji=mt.imag,
    )


@dataclass(frozen=True)
class Bus:
    index: int
    p_d: float
    q_d: float
    g_sh: float
    b_sh: float
    v_min: float
    v_max: float
    is_ref: bool = False
    v_init: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    y: complex
    b_ch: float
    tap: complex
    s_max: float | None
    theta_min: float | None
    theta_max: float | None
    coeffs: LineCoefficients


@dataclass(frozen=True)
class Generator:
    index: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c2: float
    c1: float
    c0: float

    def cost(self, p: float) -> float:
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Network:
    """Immutable per-unit network. Bus ``i`` is ``buses[i]``; ``bus_ids[i]`` is its case id."""

    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    bus_ids: tuple[int, ...] = ()
    name: str = ""
    _adj: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(len(self.buses))))
        adj: list[set[int]] = [set() for _ in self.buses]
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        object.__setattr__(self, "_adj", tuple(frozenset(s) for s in adj))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def ref_bus(self) -> int:
        for b in self.buses:
            if b.is_ref:
                return b.index
        raise LookupError("network has no reference bus")

    @cached_property
    def lines_at(self) -> tuple[tuple[int, ...], ...]:
        """Line ids incident to each bus."""
        out: list[list[int]] = [[] for _ in self.buses]
        for ln in self.lines:
            out[ln.from_bus].append(ln.id)
            out[ln.to_bus].append(ln.id)
        return tuple(tuple(x) for x in out)

    @cached_property
    def gens_at(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.buses]
        for g in self.generators:
            out[g.bus].append(g.index)
        return tuple(tuple(x) for x in out)

    def adjacency(self) -> dict[int, frozenset[int]]:
        """Simple-graph adjacency (parallel lines collapse to one edge)."""
        return {i: self._adj[i] for i in range(self.n_bus)}

    def unreachable_from(self, start: int) -> list[int]:
        seen = {start}
        todo = deque([start])
        while todo:
            u = todo.popleft()
            for w in self._adj[u]:
                if w not in seen:
                    seen.add(w)
                    todo.append(w)
        return [i for i in range(self.n_bus) if i not in seen]


def neighbors(network: Network, i: int) -> frozenset[int]:
    """Buses joined to bus ``i`` by at least one line, in either orientation."""
    return network._adj[i]
