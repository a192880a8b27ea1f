"""Myerson values of the hyperedge-sum coalition game and the teammate distribution."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Any, Iterable, Sequence

import numpy as np

from .arena import ContractError
from .hyfog import HyFoG, check

EXACT_LIMIT = 9


class SizeError(ValueError):
    pass


def coalition_value(g: HyFoG, coalition: Iterable[int]) -> float:
    """Total weight of hyperedges fully inside the coalition (0 below edge size)."""
    members = set(coalition)
    if len(members) < g.edge_size:
        return 0.0
    return math.fsum(w for e, w in g.weights.items() if members.issuperset(e))


@dataclass
class MyersonReport:
    values: dict[int, float]
    method: str
    samples: int = 0
    seed: int | None = None
    stderr: dict[int, float] = field(default_factory=dict)

    def as_array(self, nodes: Sequence[int]) -> np.ndarray:
        return np.array([self.values[n] for n in nodes])

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "method": self.method,
            "values": {str(k): v for k, v in sorted(self.values.items())},
        }
        if self.method == "monte_carlo":
            out.update(samples=self.samples, seed=self.seed,
                       stderr={str(k): v for k, v in sorted(self.stderr.items())})
        return out


def _marginal_sums(g: HyFoG, orders: Iterable[Sequence[int]]) -> tuple[dict[int, float], dict[int, float], int]:
    """Sum and sum of squares of marginal contributions along each order."""
    total = {n: 0.0 for n in g.nodes}
    squares = {n: 0.0 for n in g.nodes}
    count = 0
    # incremental coalition values: adding i completes every edge whose other members are present
    incident = {n: [(e, w) for e, w in g.weights.items() if n in e] for n in g.nodes}
    for order in orders:
        present: set[int] = set()
        for i in order:
            gain = 0.0
            for e, w in incident[i]:
                if all(m in present for m in e if m != i):
                    gain += w
            present.add(i)
            total[i] += gain
            squares[i] += gain * gain
        count += 1
    return total, squares, count


def myerson_permutation_exact(g: HyFoG, exact_limit: int = EXACT_LIMIT) -> MyersonReport:
    """Average marginal contribution over all |V|! orders, by enumeration."""
    n = len(g.nodes)
    if n > exact_limit:
        raise SizeError(
            f"{n} nodes exceeds exact_limit={exact_limit}; use myerson_closed_form or myerson_monte_carlo"
        )
    total = {v: 0.0 for v in g.nodes}
    count = 0
    for order in permutations(g.nodes):
        present: set[int] = set()
        for i in order:
            with_i = coalition_value(g, present | {i})
            without = coalition_value(g, present)
            total[i] += with_i - without
            present.add(i)
        count += 1
    return MyersonReport({v: total[v] / count for v in g.nodes}, "permutation_exact", samples=count)


def myerson_closed_form(g: HyFoG) -> MyersonReport:
    """Each hyperedge splits its weight equally among its members."""
    check(g)
    values = {v: [] for v in g.nodes}
    for e, w in g.weights.items():
        for m in e:
            values[m].append(w / g.edge_size)
    return MyersonReport({v: math.fsum(values[v]) for v in g.nodes}, "closed_form")


def myerson_monte_carlo(
    g: HyFoG, samples: int, seed: int = 0, exhaustive: bool = False
) -> MyersonReport:
    """Sampled-permutation estimate with per-node standard errors.

    ``exhaustive=True`` walks all orders instead of drawing them (``samples``
    is then ignored).
    """
    if samples < 1:
        raise ContractError("samples must be >= 1")
    if exhaustive:
        orders = permutations(g.nodes)
    else:
        rng = np.random.default_rng(seed)
        nodes = np.array(g.nodes)
        orders = (rng.permutation(nodes).tolist() for _ in range(samples))
    total, squares, count = _marginal_sums(g, orders)
    values = {v: total[v] / count for v in g.nodes}
    stderr = {}
    for v in g.nodes:
        var = max(squares[v] / count - values[v] ** 2, 0.0)
        stderr[v] = math.sqrt(var * count / max(count - 1, 1) / count)
    return MyersonReport(values, "monte_carlo", samples=count, seed=seed, stderr=stderr)


@dataclass
class PhiDistribution:
    probabilities: dict[int, float]

    @property
    def nodes(self) -> list[int]:
        return sorted(self.probabilities)

    def support(self) -> list[int]:
        return [n for n in self.nodes if self.probabilities[n] > 0]

    def to_dict(self) -> dict[str, Any]:
        return {"probabilities": {str(k): v for k, v in sorted(self.probabilities.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data) -> "PhiDistribution":
        return cls({int(k): float(v) for k, v in data["probabilities"].items()})


def phi_distribution(
    report: MyersonReport | dict[int, float], epsilon: float = 1e-6, mode: str = "inverse"
) -> PhiDistribution:
    """Teammate-sampling weights, larger for nodes with smaller values.

    ``mode="inverse"`` normalizes 1/(value + epsilon); ``mode="softmax"`` uses
    softmax(-value) for comparison.
    """
    values = report.values if isinstance(report, MyersonReport) else dict(report)
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    nodes = sorted(values)
    vals = np.array([values[n] for n in nodes], dtype=np.float64)
    if mode == "inverse":
        if np.any(vals < 0):
            raise ContractError("negative values; edge weights must be non-negative")
        raw = 1.0 / (vals + epsilon)
    elif mode == "softmax":
        raw = np.exp(-(vals - vals.min()))
    else:
        raise ContractError(f"unknown phi mode {mode!r}")
    probs = raw / raw.sum()
    return PhiDistribution({n: float(p) for n, p in zip(nodes, probs)})


def sample_teammates(
    phi: PhiDistribution, count: int, exclude: Iterable[int], rng: np.random.Generator
) -> list[int]:
    """Draw ``count`` distinct nodes proportional to phi, renormalizing after each draw."""
    excluded = set(exclude)
    pool = [n for n in phi.nodes if n not in excluded and phi.probabilities[n] > 0]
    if count > len(pool):
        raise ContractError(
            f"cannot draw {count} distinct teammates from {len(pool)} eligible nodes"
        )
    weights = [phi.probabilities[n] for n in pool]
    chosen = []
    for _ in range(count):
        total = math.fsum(weights)
        u = rng.random() * total
        acc = 0.0
        pick = len(pool) - 1
        for k, w in enumerate(weights):
            acc += w
            if u < acc:
                pick = k
                break
        chosen.append(pool.pop(pick))
        weights.pop(pick)
    return chosen
