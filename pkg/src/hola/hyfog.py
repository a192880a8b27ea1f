"""Hypergraphic-form games, preference hypergraphs and hyper-preference centrality."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Iterable, Mapping

from .arena import ContractError


class ValidationError(ValueError):
    """Raised when a HyFoG violates uniformity, connectivity or weight rules."""


Edge = tuple[int, ...]


def edge_key(members: Iterable[int]) -> Edge:
    return tuple(sorted(int(m) for m in members))


@dataclass
class HyFoG:
    """Weighted l-uniform hypergraph whose vertices are policies.

    ``policies`` maps node id -> an opaque policy reference (a PolicyHandle in
    the training loop, a checkpoint path once serialized).
    """

    edge_size: int
    nodes: list[int] = field(default_factory=list)
    weights: dict[Edge, float] = field(default_factory=dict)
    policies: dict[int, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.nodes = sorted(int(n) for n in self.nodes)
        self.weights = {edge_key(e): float(w) for e, w in self.weights.items()}

    @classmethod
    def from_edges(
        cls, edge_size: int, weights: Mapping[Iterable[int], float], nodes: Iterable[int] | None = None
    ) -> "HyFoG":
        weights = {edge_key(e): float(w) for e, w in weights.items()}
        if nodes is None:
            nodes = sorted({n for e in weights for n in e})
        return cls(edge_size, list(nodes), weights)

    @property
    def edges(self) -> list[Edge]:
        return sorted(self.weights)

    def incident(self, node: int) -> list[Edge]:
        return [e for e in self.edges if node in e]

    def add_node(self, node: int, policy: Any = None) -> None:
        if node in self.nodes:
            raise ContractError(f"node {node} already present")
        self.nodes = sorted(self.nodes + [node])
        if policy is not None:
            self.policies[node] = policy

    def remove_node(self, node: int) -> None:
        self.nodes = [n for n in self.nodes if n != node]
        self.weights = {e: w for e, w in self.weights.items() if node not in e}
        self.policies.pop(node, None)

    def copy(self) -> "HyFoG":
        return HyFoG(self.edge_size, list(self.nodes), dict(self.weights), dict(self.policies))

    def total_weight(self) -> float:
        return math.fsum(self.weights.values())

    # -- canonical serialization --

    def to_dict(self, policy_ref=None) -> dict[str, Any]:
        nodes = []
        for n in self.nodes:
            entry: dict[str, Any] = {"id": n}
            if n in self.policies:
                ref = policy_ref(self.policies[n]) if policy_ref else self.policies[n]
                if ref is not None:
                    entry["policy"] = ref
            nodes.append(entry)
        return {
            "edge_size": self.edge_size,
            "nodes": nodes,
            "edges": [{"members": list(e), "weight": self.weights[e]} for e in self.edges],
        }

    def to_json(self, policy_ref=None) -> str:
        return json.dumps(self.to_dict(policy_ref), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HyFoG":
        nodes, policies = [], {}
        for entry in data["nodes"]:
            nodes.append(int(entry["id"]))
            if "policy" in entry:
                policies[int(entry["id"])] = entry["policy"]
        weights = {edge_key(e["members"]): float(e["weight"]) for e in data["edges"]}
        return cls(int(data["edge_size"]), nodes, weights, policies)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(lambda p: None), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def validate(g: HyFoG) -> list[str]:
    """Return every violated HyFoG property; an empty list means valid."""
    problems = []
    if g.edge_size < 2:
        problems.append(f"edge size must be >= 2, got {g.edge_size}")
    node_set = set(g.nodes)
    for e, w in sorted(g.weights.items()):
        if len(e) != g.edge_size or len(set(e)) != len(e):
            problems.append(f"uniformity: edge {e} has size {len(set(e))}, expected {g.edge_size}")
        if not set(e) <= node_set:
            problems.append(f"edge {e} references unknown nodes")
        if not math.isfinite(w):
            problems.append(f"weight of edge {e} is not finite")
    covered = {n for e in g.weights for n in e}
    for n in g.nodes:
        if n not in covered:
            problems.append(f"node {n} belongs to no hyperedge")

    parent = {n: n for n in node_set | covered}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in g.weights:
        root = find(e[0])
        for other in e[1:]:
            parent[find(other)] = root
    if len({find(n) for n in g.nodes}) > 1:
        problems.append("connectivity: hypergraph has more than one component")
    return problems


def check(g: HyFoG) -> None:
    problems = validate(g)
    if problems:
        raise ValidationError("; ".join(problems))


@dataclass
class PreferenceHypergraph:
    nodes: list[int]
    edge_size: int
    preferences: dict[int, tuple[int, ...]]  # source -> sorted end nodes
    source_edges: dict[int, Edge]
    source_weights: dict[int, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "edge_size": self.edge_size,
            "nodes": list(self.nodes),
            "preferences": [
                {"source": s, "ends": list(self.preferences[s]), "weight": self.source_weights[s]}
                for s in self.nodes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def build_preference_hypergraph(g: HyFoG) -> PreferenceHypergraph:
    """Each node points at the rest of its heaviest incident hyperedge.

    Equal weights resolve to the lexicographically smallest sorted member tuple.
    """
    incident: dict[int, list[Edge]] = {n: [] for n in g.nodes}
    for e in g.edges:
        for n in e:
            if n in incident:
                incident[n].append(e)
    prefs, source_edges, source_weights = {}, {}, {}
    for n in g.nodes:
        if not incident[n]:
            raise ValidationError(f"node {n} belongs to no hyperedge")
        best = min(incident[n], key=lambda e: (-g.weights[e], e))
        source_edges[n] = best
        source_weights[n] = g.weights[best]
        prefs[n] = tuple(m for m in best if m != n)
    return PreferenceHypergraph(list(g.nodes), g.edge_size, prefs, source_edges, source_weights)


@dataclass
class CentralityReport:
    eta: dict[int, float]
    in_degree: dict[int, int]
    ranking: list[int]

    def rank(self, node: int) -> int:
        """1-based position of ``node`` in the ranking."""
        return self.ranking.index(node) + 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "eta": {str(k): v for k, v in sorted(self.eta.items())},
            "in_degree": {str(k): v for k, v in sorted(self.in_degree.items())},
            "ranking": list(self.ranking),
        }


def hyper_preference_centrality(pg: PreferenceHypergraph) -> CentralityReport:
    """Normalized in-degree; ranking by eta descending, newest (largest) id first on ties."""
    n = len(pg.nodes)
    if n < 2:
        raise ContractError("centrality needs at least two nodes")
    degree = {v: 0 for v in pg.nodes}
    for source, ends in pg.preferences.items():
        for v in set(ends):
            if v != source:
                degree[v] += 1
    eta = {v: degree[v] / (n - 1) for v in pg.nodes}
    ranking = sorted(pg.nodes, key=lambda v: (-degree[v], -v))
    return CentralityReport(eta, degree, ranking)


def centrality(g: HyFoG) -> CentralityReport:
    return hyper_preference_centrality(build_preference_hypergraph(g))


def complete_edges(nodes: Iterable[int], edge_size: int) -> list[Edge]:
    return [edge_key(c) for c in combinations(sorted(nodes), edge_size)]


def to_dot(pg: PreferenceHypergraph, report: CentralityReport | None = None) -> str:
    """DOT digraph: each source fans out to its end nodes, edges labelled by weight."""
    lines = ["digraph preference {", "  rankdir=LR;"]
    for v in pg.nodes:
        label = f"{v}"
        if report is not None:
            label += f"\\neta={report.eta[v]:.3g}"
        lines.append(f'  n{v} [label="{label}"];')
    for s in pg.nodes:
        w = pg.source_weights[s]
        for t in pg.preferences[s]:
            lines.append(f'  n{s} -> n{t} [label="{w:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
