"""Time-varying V2X communication graph over the active sensors.

Edges are undirected: two sensors are linked when their positions are within
the communication range (inclusive), and consecutive roadside units are
always linked through their wired peer-to-peer backbone regardless of range.
Consensus weights follow the Metropolis-Hastings rule, which is doubly
stochastic on any undirected graph and computable from neighbor degrees only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

RSU = "rsu"
CV = "cv"


@dataclass
class CommGraph:
    """Snapshot of the sensor network at one time step."""

    nodes: list[str]
    positions: dict[str, float]
    kinds: dict[str, str]
    adjacency: dict[str, list[str]] = field(default_factory=dict)

    @property
    def edges(self) -> list[tuple[str, str]]:
        """Canonical (a < b) edge list, sorted."""
        out = set()
        for a, neigh in self.adjacency.items():
            for b in neigh:
                out.add((a, b) if a < b else (b, a))
        return sorted(out)

    def degree(self, node: str) -> int:
        return len(self.adjacency[node])


def link_type(graph: CommGraph, a: str, b: str) -> str:
    """P2P for RSU-RSU links, V2V for CV-CV, V2I for mixed."""
    ka, kb = graph.kinds[a], graph.kinds[b]
    if ka == RSU and kb == RSU:
        return "P2P"
    if ka == CV and kb == CV:
        return "V2V"
    return "V2I"


def build_graph(
    positions: Mapping[str, float],
    comm_range: float,
    rsu_order: Sequence[str] = (),
) -> CommGraph:
    """Build the graph for one step from sensor positions.

    positions: id -> position [m] of every active sensor.
    comm_range: V2X range [m]; the comparison is inclusive.
    rsu_order: RSU ids ordered along the road; consecutive ones are always
        linked (P2P backbone) even when out of V2X range.
    """
    nodes = sorted(positions)
    kinds = {n: (RSU if n in set(rsu_order) else CV) for n in nodes}
    adjacency: dict[str, set[str]] = {n: set() for n in nodes}
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            if abs(positions[a] - positions[b]) <= comm_range:
                adjacency[a].add(b)
                adjacency[b].add(a)
    for a, b in zip(rsu_order, rsu_order[1:]):
        if a in adjacency and b in adjacency:
            adjacency[a].add(b)
            adjacency[b].add(a)
    return CommGraph(
        nodes=nodes,
        positions=dict(positions),
        kinds=kinds,
        adjacency={n: sorted(neigh) for n, neigh in adjacency.items()},
    )


def metropolis_weights(graph: CommGraph) -> dict[str, dict[str, float]]:
    """Doubly stochastic consensus weights compatible with the graph.

    Edge (l, j) gets 1/(1 + max(deg_l, deg_j)); the self weight absorbs the
    remainder so every row (and by symmetry every column) sums to one.
    """
    weights: dict[str, dict[str, float]] = {}
    for node in graph.nodes:
        w = {
            other: 1.0 / (1.0 + max(graph.degree(node), graph.degree(other)))
            for other in graph.adjacency[node]
        }
        w[node] = 1.0 - sum(w.values())
        weights[node] = w
    return weights


def weight_matrix(graph: CommGraph, weights: dict[str, dict[str, float]]) -> np.ndarray:
    """Dense weight matrix ordered like graph.nodes (testing/diagnostics)."""
    index = {n: i for i, n in enumerate(graph.nodes)}
    mat = np.zeros((len(graph.nodes), len(graph.nodes)))
    for node, w in weights.items():
        for other, value in w.items():
            mat[index[node], index[other]] = value
    return mat


def connected_components(graph: CommGraph) -> list[set[str]]:
    """Partition of the nodes into connected components (BFS)."""
    seen: set[str] = set()
    parts: list[set[str]] = []
    for start in graph.nodes:
        if start in seen:
            continue
        comp = {start}
        frontier = [start]
        while frontier:
            node = frontier.pop()
            for other in graph.adjacency[node]:
                if other not in comp:
                    comp.add(other)
                    frontier.append(other)
        seen |= comp
        parts.append(comp)
    return parts
