"""Radial (tree) partitioning of a network graph and region closures.

A radial partition splits the node set so that every part induces a tree.
:func:`radial_partition` grows one tree at a time with a depth-first stack:
a popped node joins the current tree only if its parent is its sole
neighbour already in the tree, and only then are its own neighbours pushed.
"""

from __future__ import annotations

import json
import random
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

from radopf.network import Network

FORWARD, REVERSE = 0, 1


class EmptyGraph(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    regions: tuple[frozenset, ...]

    def __len__(self) -> int:
        return len(self.regions)

    def owner(self) -> dict:
        """Map node -> index of the region that owns it."""
        return {v: k for k, reg in enumerate(self.regions) for v in reg}


def _graph_and_key(graph):
    if isinstance(graph, Network):
        adj = graph.adjacency()
        ids = graph.bus_ids
        return adj, lambda i: ids[i]
    adj = {u: frozenset(nb) for u, nb in graph.items()}
    # make adjacency symmetric even if the caller listed each edge once
    extra: dict = {}
    for u, nb in adj.items():
        for w in nb:
            if u not in adj.get(w, ()):
                extra.setdefault(w, set()).add(u)
    for w, more in extra.items():
        adj[w] = frozenset(adj.get(w, frozenset()) | more)
    return adj, lambda v: v


def radial_partition(graph: Network | Mapping[Hashable, Iterable[Hashable]],
                     start_rule: str = "lowest", seed: int | None = None) -> Partition:
    """Greedy partition of ``graph`` into node sets that each induce a tree.

    Args:
        graph: a :class:`Network` (nodes are bus indices, ordered by case bus id)
            or an adjacency mapping ``node -> neighbours``.
        start_rule: ``"lowest"`` starts each tree at the lowest remaining node;
            ``"random"`` picks it with ``random.Random(seed)``.
        seed: seed for the random start rule.

    Neighbours are pushed in ascending order and popped last-in first-out,
    so the result is deterministic for a fixed rule and seed.
    """
    adj, key = _graph_and_key(graph)
    if not adj:
        raise EmptyGraph("cannot partition an empty graph")
    if start_rule not in ("lowest", "random"):
        raise ValueError(f"unknown start rule {start_rule!r}")
    rng = random.Random(seed)

    remaining = set(adj)
    regions = []
    while remaining:
        ordered = sorted(remaining, key=key)
        start = ordered[0] if start_rule == "lowest" else rng.choice(ordered)
        tree = {start}
        stack = [(w, start) for w in sorted(adj[start] & remaining, key=key)]
        while stack:
            u, parent = stack.pop()
            if u in tree:
                continue
            if any(w in tree and w != parent for w in adj[u]):
                continue
            tree.add(u)
            stack.extend((w, u) for w in sorted(adj[u] & remaining, key=key) if w not in tree)
        regions.append(frozenset(tree))
        remaining -= tree
    return Partition(tuple(regions))


@dataclass
class RadialReport:
    ok: bool
    violations: list[str]

    def __bool__(self) -> bool:
        return self.ok


def verify_radial(graph, partition: Partition) -> RadialReport:
    """Check that regions are disjoint, cover the graph, and each induces a tree."""
    adj, key = _graph_and_key(graph)
    problems = []
    seen: dict = {}
    for k, reg in enumerate(partition.regions):
        if not reg:
            problems.append(f"region {k} is empty")
        for v in reg:
            if v not in adj:
                problems.append(f"region {k}: node {key(v)} is not in the graph")
            elif v in seen:
                problems.append(f"node {key(v)} is in regions {seen[v]} and {k}")
            else:
                seen[v] = k
    missing = [v for v in adj if v not in seen]
    if missing:
        problems.append("uncovered nodes: " + ", ".join(str(key(v)) for v in sorted(missing, key=key)))

    for k, reg in enumerate(partition.regions):
        nodes = [v for v in reg if v in adj]
        if not nodes:
            continue
        edges = sum(1 for v in nodes for w in adj[v] if w in reg) // 2
        # connected via BFS inside the region
        first = nodes[0]
        comp = {first}
        todo = deque([first])
        while todo:
            u = todo.popleft()
            for w in adj[u]:
                if w in reg and w not in comp:
                    comp.add(w)
                    todo.append(w)
        if len(comp) != len(nodes):
            problems.append(f"region {k} is disconnected ({len(comp)} of {len(nodes)} nodes reachable)")
        elif edges != len(nodes) - 1:
            problems.append(f"region {k} contains a cycle ({edges} edges on {len(nodes)} nodes)")
    return RadialReport(not problems, problems)


@dataclass(frozen=True)
class RegionClosure:
    """A region's owned buses plus its neighbours, and the lines/generators it models.

    ``lines`` holds every line with at least one owned endpoint; generators
    are only those at owned buses.
    """

    k: int
    owned: frozenset[int]
    boundary: frozenset[int]
    lines: tuple[int, ...]
    gens: tuple[int, ...]

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(sorted(self.owned | self.boundary))


@dataclass(frozen=True)
class SharedEntityMap:
    """Which region closures contain each bus and each directed line.

    Directed lines are keyed ``(line id, FORWARD | REVERSE)``.
    """

    node_regions: dict[int, tuple[int, ...]]
    line_regions: dict[tuple[int, int], tuple[int, ...]]

    def shared_nodes(self) -> list[int]:
        return sorted(i for i, ks in self.node_regions.items() if len(ks) > 1)

    def shared_lines(self) -> list[tuple[int, int]]:
        return sorted(e for e, ks in self.line_regions.items() if len(ks) > 1)


def region_closures(network: Network, partition: Partition) -> tuple[list[RegionClosure], SharedEntityMap]:
    owner = partition.owner()
    closures = []
    node_regions: dict[int, list[int]] = {}
    line_regions: dict[tuple[int, int], list[int]] = {}
    for k, reg in enumerate(partition.regions):
        owned = frozenset(reg)
        lines = sorted({lid for i in owned for lid in network.lines_at[i]})
        boundary = set()
        for lid in lines:
            ln = network.lines[lid]
            for b in (ln.from_bus, ln.to_bus):
                if b not in owned:
                    boundary.add(b)
        gens = tuple(g for i in sorted(owned) for g in network.gens_at[i])
        cl = RegionClosure(k, owned, frozenset(boundary), tuple(lines), gens)
        closures.append(cl)
        for i in cl.nodes:
            node_regions.setdefault(i, []).append(k)
        for lid in lines:
            for d in (FORWARD, REVERSE):
                line_regions.setdefault((lid, d), []).append(k)
    for i in range(network.n_bus):
        if i not in owner:
            raise ValueError(f"bus {network.bus_ids[i]} is not assigned to any region")
    return closures, SharedEntityMap(
        {i: tuple(ks) for i, ks in sorted(node_regions.items())},
        {e: tuple(ks) for e, ks in sorted(line_regions.items())},
    )


def single_region(network: Network) -> Partition:
    return Partition((frozenset(range(network.n_bus)),))


def partition_to_json(network: Network, partition: Partition) -> str:
    ids = network.bus_ids
    regions = [sorted(ids[i] for i in reg) for reg in partition.regions]
    return json.dumps({"regions": regions})


def partition_from_json(network: Network, text: str) -> Partition:
    doc = json.loads(text)
    index = {bid: i for i, bid in enumerate(network.bus_ids)}
    try:
        regions = tuple(frozenset(index[b] for b in reg) for reg in doc["regions"])
    except KeyError as exc:
        raise ValueError(f"partition file refers to unknown bus or lacks 'regions': {exc}") from None
    return Partition(regions)


def load_partition(network: Network, path: str | Path) -> Partition:
    return partition_from_json(network, Path(path).read_text())
