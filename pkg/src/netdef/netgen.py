"""Random connected network topologies with designated entry nodes."""

from __future__ import annotations

import random
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Topology:
    """Undirected connected graph over dense node ids 0..node_count-1.

    Edges are stored as (u, v) tuples with u < v; entry_nodes marks where an
    attacker may first enter the network.
    """

    node_count: int
    edges: frozenset[tuple[int, int]]
    entry_nodes: frozenset[int] = field(default_factory=frozenset)

    def neighbours(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return adj

    def is_connected(self) -> bool:
        return len(_components(self.node_count, self.edges)) <= 1

    def to_json_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "edges": sorted([u, v] for u, v in self.edges),
            "entry_nodes": sorted(self.entry_nodes),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Topology":
        n = int(doc["node_count"])
        edges = frozenset(_norm_edge(int(u), int(v)) for u, v in doc["edges"])
        entry = frozenset(int(i) for i in doc.get("entry_nodes", []))
        topo = cls(node_count=n, edges=edges, entry_nodes=entry)
        validate_topology(topo)
        return topo


def _norm_edge(u: int, v: int) -> tuple[int, int]:
    if u == v:
        raise ValueError(f"self-loop on node {u}")
    return (u, v) if u < v else (v, u)


def validate_topology(topo: Topology) -> None:
    for u, v in topo.edges:
        if not (0 <= u < topo.node_count and 0 <= v < topo.node_count):
            raise ValueError(f"edge ({u},{v}) outside [0,{topo.node_count})")
    if any(not 0 <= i < topo.node_count for i in topo.entry_nodes):
        raise ValueError("entry node id out of range")


def _components(node_count: int, edges: frozenset[tuple[int, int]]) -> list[list[int]]:
    """Connected components via BFS, each sorted, ordered by smallest member."""
    adj: list[list[int]] = [[] for _ in range(node_count)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * node_count
    comps = []
    for start in range(node_count):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = []
        while queue:
            node = queue.pop()
            comp.append(node)
            for nxt in adj[node]:
                if not seen[nxt]:
                    seen[nxt] = True
                    queue.append(nxt)
        comps.append(sorted(comp))
    return comps


def _er_edges(n: int, p: float, rng: random.Random) -> set[tuple[int, int]]:
    """One Bernoulli(p) draw per unordered node pair (the raw ER stage)."""
    edges = set()
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < p:
                edges.add((u, v))
    return edges


def generate_er_graph(n: int, p: float, rng: random.Random) -> Topology:
    """Sample an ER graph and repair connectivity; entry nodes left empty."""
    if n < 1:
        raise ValueError(f"node count must be >= 1, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must be in [0,1], got {p}")
    raw = Topology(node_count=n, edges=frozenset(_er_edges(n, p, rng)))
    return connect_components(raw, rng)


def connect_components(graph: Topology, rng: random.Random) -> Topology:
    """Merge components pairwise with single random bridging edges.

    Picks two distinct components uniformly at random and joins a uniformly
    chosen node from each, repeating until one component remains. Adds
    exactly (initial component count - 1) edges and never removes any.
    """
    comps = _components(graph.node_count, graph.edges)
    edges = set(graph.edges)
    while len(comps) > 1:
        i, j = rng.sample(range(len(comps)), 2)
        u = rng.choice(comps[i])
        v = rng.choice(comps[j])
        edges.add(_norm_edge(u, v))
        merged = sorted(comps[i] + comps[j])
        comps = [c for k, c in enumerate(comps) if k not in (i, j)]
        comps.append(merged)
    return Topology(graph.node_count, frozenset(edges), graph.entry_nodes)


def select_entry_nodes(graph: Topology, count: int, rng: random.Random) -> Topology:
    """Return a copy with entry_nodes set to a uniform count-subset of ids."""
    if not 1 <= count <= graph.node_count:
        raise ValueError(
            f"entry count must be in [1,{graph.node_count}], got {count}"
        )
    chosen = frozenset(rng.sample(range(graph.node_count), count))
    return Topology(graph.node_count, graph.edges, chosen)
