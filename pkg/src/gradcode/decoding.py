"""Decoding coefficients ``w`` and per-block coefficients ``alpha = A w``.

For graph schemes the optimal ``alpha`` is read off the connected components
of the graph that survives the stragglers: 1 on components containing an odd
cycle, ``2|R|/(|L|+|R|)`` and ``2|L|/(|L|+|R|)`` on the two sides of a
bipartite component, and 0 on isolated vertices.  Edge weights realising it
come from one back-substitution pass over a BFS spanning tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .assignment import AssignmentScheme
from .graphs import Graph

ORACLE_MAX_BLOCKS = 2048
ORACLE_RCOND = 1e-10

DECODERS = ("optimal", "optimal_graph", "optimal_frc", "oracle", "fixed", "fixed_adversarial", "ignore")


@dataclass(frozen=True)
class Component:
    vertices: tuple[int, ...]
    tag: str  # "non_bipartite" | "bipartite" | "isolated"
    L_size: int = 0
    R_size: int = 0

    def as_dict(self) -> dict:
        out = {"tag": self.tag, "vertices": list(self.vertices)}
        if self.tag == "bipartite":
            out["L_size"] = self.L_size
            out["R_size"] = self.R_size
        return out


@dataclass
class Decoding:
    stragglers: tuple[int, ...]
    w: np.ndarray
    alpha: np.ndarray
    components: list[Component] = field(default_factory=list)

    @property
    def error(self) -> float:
        """Squared distance ``|alpha - 1|^2``."""
        return float(np.sum((self.alpha - 1.0) ** 2))

    def to_json(self) -> str:
        return json.dumps(
            {
                "stragglers": list(self.stragglers),
                "w": [float(x) for x in self.w],
                "alpha": [float(x) for x in self.alpha],
                "components": [c.as_dict() for c in self.components],
            }
        )


@dataclass
class OpCounter:
    vertex_visits: int = 0
    edge_visits: int = 0


def straggler_members(s) -> tuple[int, ...]:
    members = getattr(s, "members", s)
    return tuple(sorted(set(int(j) for j in members)))


def _alive_mask(m: int, stragglers) -> np.ndarray:
    alive = np.ones(m, dtype=bool)
    idx = list(stragglers)
    if idx:
        if min(idx) < 0 or max(idx) >= m:
            raise ValueError(f"straggler index outside [0, {m})")
        alive[idx] = False
    return alive


def _bipartite_alpha(big: int, small: int) -> tuple[float, float]:
    total = big + small
    return float(Fraction(2 * small, total)), float(Fraction(2 * big, total))


def _explore(g: Graph, alive, counter: OpCounter | None):
    """BFS over the surviving graph.

    Returns per-vertex colour, per-vertex parent edge, and one record per
    component: ``(order, odd_edge)`` where ``odd_edge`` is the lowest-index
    surviving edge joining two vertices of the same colour, or -1.
    """
    n = g.n
    inc = g.incidence
    color = [-1] * n
    parent_edge = [-1] * n
    comps = []
    vv = ev = 0
    for root in range(n):
        if color[root] != -1:
            continue
        color[root] = 0
        order = [root]
        odd_edge = -1
        head = 0
        while head < len(order):
            u = order[head]
            head += 1
            vv += 1
            cu = color[u]
            for j, v in inc[u]:
                ev += 1
                if not alive[j]:
                    continue
                cv = color[v]
                if cv == -1:
                    color[v] = 1 - cu
                    parent_edge[v] = j
                    order.append(v)
                elif cv == cu and (odd_edge == -1 or j < odd_edge):
                    odd_edge = j
        comps.append((order, odd_edge))
    if counter is not None:
        counter.vertex_visits += vv
        counter.edge_visits += ev
    return color, parent_edge, comps


def _component_alpha(order, odd_edge, color, alpha) -> Component:
    if len(order) == 1:
        alpha[order[0]] = 0.0
        return Component((order[0],), "isolated")
    if odd_edge != -1:
        for v in order:
            alpha[v] = 1.0
        return Component(tuple(sorted(order)), "non_bipartite")
    zeros = sum(1 for v in order if color[v] == 0)
    ones = len(order) - zeros
    big_color = 0 if zeros >= ones else 1
    big, small = max(zeros, ones), min(zeros, ones)
    a_big, a_small = _bipartite_alpha(big, small)
    for v in order:
        alpha[v] = a_big if color[v] == big_color else a_small
    return Component(tuple(sorted(order)), "bipartite", L_size=big, R_size=small)


def optimal_alpha_graph(g: Graph, alive) -> np.ndarray:
    """Optimal ``alpha`` only, skipping edge weights."""
    alpha = [0.0] * g.n
    color, _, comps = _explore(g, alive, None)
    for order, odd_edge in comps:
        _component_alpha(order, odd_edge, color, alpha)
    return np.array(alpha)


def decode_optimal_graph(g: Graph, s, counter: OpCounter | None = None) -> Decoding:
    members = straggler_members(s)
    alive = _alive_mask(g.m, members)
    alpha = [0.0] * g.n
    w = [0.0] * g.m
    color, parent_edge, comps = _explore(g, alive, counter)
    edges = g.edges
    components = []
    for order, odd_edge in comps:
        comp = _component_alpha(order, odd_edge, color, alpha)
        components.append(comp)
        if comp.tag == "isolated":
            continue
        demand = {v: alpha[v] for v in order}
        if odd_edge != -1:
            # the alternating sum of demands is what the tree alone cannot absorb;
            # an edge inside one colour class shifts it by 2 per unit weight
            residual = sum(demand[v] if color[v] == 0 else -demand[v] for v in order)
            x, y = edges[odd_edge]
            t = residual / 2.0 if color[x] == 0 else -residual / 2.0
            w[odd_edge] = t
            demand[x] -= t
            demand[y] -= t
        for v in reversed(order[1:]):
            j = parent_edge[v]
            w[j] = demand[v]
            a, b = edges[j]
            demand[a if b == v else b] -= w[j]
        if counter is not None:
            counter.vertex_visits += len(order)
    return Decoding(members, np.array(w), np.array(alpha), components)


def decode_oracle(a: AssignmentScheme, s) -> Decoding:
    """Project the all-ones vector onto the surviving columns via a pseudoinverse."""
    if a.n_blocks > ORACLE_MAX_BLOCKS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_BLOCKS} blocks, scheme has {a.n_blocks}")
    members = straggler_members(s)
    alive = _alive_mask(a.m, members)
    w = np.zeros(a.m)
    if alive.any():
        sub = a.matrix[:, alive]
        w[alive] = np.linalg.pinv(sub, rcond=ORACLE_RCOND) @ np.ones(a.n_blocks)
        alpha = sub @ w[alive]
    else:
        alpha = np.zeros(a.n_blocks)
    return Decoding(members, w, alpha)


def decode_optimal_frc(a: AssignmentScheme, s) -> Decoding:
    """Survivors of a group split its weight evenly; dead groups get 0."""
    if a.groups is None:
        raise ValueError("decode_optimal_frc needs an frc scheme")
    members = straggler_members(s)
    alive = _alive_mask(a.m, members)
    groups = np.asarray(a.groups)
    counts = np.bincount(groups[alive], minlength=groups.max() + 1)
    w = np.where(alive, 1.0 / np.maximum(counts[groups], 1), 0.0)
    return Decoding(members, w, a.matrix @ w)


def decode_fixed(a: AssignmentScheme, s, p: float) -> Decoding:
    if not 0 <= p < 1:
        raise ValueError(f"fixed decoding needs 0 <= p < 1, got {p}")
    members = straggler_members(s)
    alive = _alive_mask(a.m, members)
    w = np.where(alive, 1.0 / (a.d * (1.0 - p)), 0.0)
    return Decoding(members, w, a.matrix @ w)


def decode_fixed_adversarial(a: AssignmentScheme, s) -> Decoding:
    members = straggler_members(s)
    if len(members) >= a.m:
        raise ValueError("every machine straggles")
    alive = _alive_mask(a.m, members)
    w = np.where(alive, a.m / (a.d * (a.m - len(members))), 0.0)
    return Decoding(members, w, a.matrix @ w)


def decode_ignore(a: AssignmentScheme, s) -> Decoding:
    """Sum whatever arrives with unit weight."""
    members = straggler_members(s)
    w = _alive_mask(a.m, members).astype(float)
    return Decoding(members, w, a.matrix @ w)


def decode(a: AssignmentScheme, s, decoder: str = "optimal", p: float | None = None) -> Decoding:
    if decoder == "optimal":
        if a.kind == "graph":
            decoder = "optimal_graph"
        elif a.kind == "frc":
            decoder = "optimal_frc"
        else:
            decoder = "oracle"
    if decoder == "optimal_graph":
        if a.graph is None or a.kind != "graph":
            raise ValueError("optimal_graph decoder needs a graph scheme")
        return decode_optimal_graph(a.graph, s)
    if decoder == "optimal_frc":
        return decode_optimal_frc(a, s)
    if decoder == "oracle":
        return decode_oracle(a, s)
    if decoder == "fixed":
        if p is None:
            raise ValueError("fixed decoder needs p")
        return decode_fixed(a, s, p)
    if decoder == "fixed_adversarial":
        return decode_fixed_adversarial(a, s)
    if decoder == "ignore":
        return decode_ignore(a, s)
    raise ValueError(f"unknown decoder {decoder!r}; choose from {DECODERS}")


def decode_inherited(debiased: AssignmentScheme, base: AssignmentScheme, s, decoder="optimal", p=None) -> Decoding:
    """Decode a debiased scheme with the weights chosen for its base scheme."""
    if debiased.kind != "debias-wrapped":
        raise ValueError("decode_inherited needs a debias-wrapped scheme")
    dec = decode(base, s, decoder, p)
    return Decoding(dec.stragglers, dec.w, debiased.matrix @ dec.w)
