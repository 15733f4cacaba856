"""Random and adversarial straggler sets."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .assignment import AssignmentScheme, graph_scheme
from .decoding import decode, optimal_alpha_graph
from .graphs import Graph

EXHAUSTIVE_BUDGET = 10**7
TIE_TOL = 1e-12


@dataclass(frozen=True)
class StragglerSet:
    m: int
    members: tuple[int, ...]
    provenance: str = "given"

    def __post_init__(self):
        members = tuple(sorted(set(int(j) for j in self.members)))
        if members and (members[0] < 0 or members[-1] >= self.m):
            raise ValueError(f"straggler index outside [0, {self.m})")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def alive_mask(self) -> np.ndarray:
        alive = np.ones(self.m, dtype=bool)
        alive[list(self.members)] = False
        return alive

    def to_json(self) -> str:
        return json.dumps(list(self.members))

    @classmethod
    def from_json(cls, text: str, m: int, provenance: str = "replay") -> "StragglerSet":
        data = json.loads(text)
        if not isinstance(data, list):
            raise ValueError("straggler JSON must be an array of indices")
        return cls(m, tuple(data), provenance)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_iid(m: int, p: float, rng_seed) -> StragglerSet:
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    hits = _rng(rng_seed).random(m) < p
    return StragglerSet(m, tuple(np.flatnonzero(hits).tolist()), f"iid({p})")


def sample_fixed_count(m: int, s: int, rng_seed) -> StragglerSet:
    if not 0 <= s <= m:
        raise ValueError(f"need 0 <= s <= m, got s={s}, m={m}")
    chosen = _rng(rng_seed).choice(m, size=s, replace=False)
    return StragglerSet(m, tuple(chosen.tolist()), f"fixed_count({s})")


def _error_fn(scheme: AssignmentScheme, decoder):
    if callable(decoder):
        return lambda members: float(np.sum((np.asarray(decoder(scheme, members)) - 1.0) ** 2))
    if decoder in ("optimal", "optimal_graph") and scheme.kind == "graph":
        g = scheme.graph
        m = scheme.m

        def err(members):
            alive = np.ones(m, dtype=bool)
            alive[list(members)] = False
            return float(np.sum((optimal_alpha_graph(g, alive) - 1.0) ** 2))

        return err
    return lambda members: decode(scheme, members, decoder).error


def adversarial_exhaustive(scheme: AssignmentScheme, s: int, decoder="optimal") -> tuple[StragglerSet, float]:
    """Worst straggler set of size at most ``s`` by enumeration.

    ``decoder`` is a decoder name or a callable ``(scheme, members) -> alpha``.
    Ties go to the lexicographically smallest set.
    """
    m = scheme.m
    if not 0 <= s <= m:
        raise ValueError(f"need 0 <= s <= m, got s={s}")
    if math.comb(m, s) > EXHAUSTIVE_BUDGET:
        raise ValueError(f"C({m},{s}) exceeds {EXHAUSTIVE_BUDGET} subsets; use adversarial_greedy")
    err = _error_fn(scheme, decoder)
    best, best_err = (), err(())
    for size in range(1, s + 1):
        for subset in itertools.combinations(range(m), size):
            e = err(subset)
            if e > best_err + TIE_TOL or (abs(e - best_err) <= TIE_TOL and subset < best):
                best, best_err = subset, e
    return StragglerSet(m, best, f"adversarial(exhaustive,{s})"), best_err


def adversarial_greedy(g: Graph, s: int, seed: int = 0, passes: int = 50) -> StragglerSet:
    """Isolate ``s // d`` pairwise non-adjacent vertices, then hill-climb.

    The isolated vertices are taken in index order.  Leftover budget is filled
    with random edges, after which single-edge swaps are accepted while they
    strictly increase the optimal-decoding error.
    """
    m = g.m
    s = min(max(s, 0), m)
    rng = np.random.default_rng(seed)
    d = max(g.degree) if g.n else 0
    chosen: set[int] = set()
    blocked: set[int] = set()
    isolated = 0
    if d > 0:
        for v in range(g.n):
            if isolated >= s // d:
                break
            if v in blocked or g.degree[v] == 0:
                continue
            edges_v = [j for j, _ in g.incidence[v]]
            if len(chosen) + len(edges_v) > s:
                continue
            chosen.update(edges_v)
            blocked.add(v)
            blocked.update(u for _, u in g.incidence[v])
            isolated += 1
    rest = [j for j in range(m) if j not in chosen]
    extra = s - len(chosen)
    if extra > 0:
        chosen.update(rng.choice(rest, size=extra, replace=False).tolist())

    err = _error_fn(graph_scheme(g), "optimal")
    current = set(chosen)
    cur_err = err(sorted(current))
    for _ in range(passes):
        improved = False
        for out in sorted(current):
            for inn in range(m):
                if inn in current:
                    continue
                trial = (current - {out}) | {inn}
                e = err(sorted(trial))
                if e > cur_err + TIE_TOL:
                    current, cur_err = trial, e
                    improved = True
                    break
            if improved:
                break
        if not improved:
            break
    return StragglerSet(m, tuple(current), f"adversarial(greedy,{s})")
