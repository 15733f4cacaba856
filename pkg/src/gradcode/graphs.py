"""Graphs whose vertices are data blocks and whose edges are machines.

Machine ``j`` is ``graph.edges[j]``; edge order is fixed at construction and
persisted by the edge-list format so machine indices are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

DENSE_EIG_LIMIT = 4096
EIG_TOL = 1e-8


class EdgeListError(ValueError):
    """Malformed edge-list file."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    n: int
    edges: tuple[tuple[int, int], ...]
    vertex_transitive: bool = False

    def __post_init__(self):
        seen = set()
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop at vertex {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}) out of range for n={self.n}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"parallel edge {key}")
            seen.add(key)

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def degree(self) -> tuple[int, ...]:
        deg = [0] * self.n
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return tuple(deg)

    @cached_property
    def incidence(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per vertex, the ``(edge_index, neighbour)`` pairs in ascending edge index."""
        inc: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for j, (u, v) in enumerate(self.edges):
            inc[u].append((j, v))
            inc[v].append((j, u))
        return tuple(tuple(x) for x in inc)

    def regular_degree(self) -> int | None:
        degs = set(self.degree)
        if len(degs) == 1:
            return degs.pop()
        return None

    def adjacency_matrix(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n))
        for u, v in self.edges:
            adj[u, v] = 1.0
            adj[v, u] = 1.0
        return adj


def _canonical(edges) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((min(u, v), max(u, v)) for u, v in edges))


def gen_random_regular(n: int, d: int, seed: int) -> Graph:
    """Random simple ``d``-regular graph from the configuration model.

    Stub pairings containing a loop or a parallel edge are thrown away and
    redrawn from scratch; at most ``10*n*d`` pairings are tried.
    """
    if d < 1 or d >= n:
        raise ValueError(f"need 1 <= d < n, got n={n}, d={d}")
    if (n * d) % 2:
        raise ValueError(f"n*d must be even, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n), d)
    budget = 10 * n * d
    for _ in range(budget):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        lo = pairs.min(axis=1)
        hi = pairs.max(axis=1)
        if np.any(lo == hi):
            continue
        keys = lo * n + hi
        if np.unique(keys).size != keys.size:
            continue
        return Graph(n, _canonical(zip(lo.tolist(), hi.tolist())), vertex_transitive=False)
    raise RuntimeError(f"no simple {d}-regular graph on {n} vertices after {budget} attempts")


def gen_circulant(n: int, offsets) -> Graph:
    """Cayley graph of Z_n with connection set ``{±o : o in offsets}``."""
    offsets = list(offsets)
    if not offsets:
        raise ValueError("offsets must be nonempty")
    if len(set(offsets)) != len(offsets):
        raise ValueError(f"duplicate offsets: {offsets}")
    for o in offsets:
        if not 1 <= o <= n // 2:
            raise ValueError(f"offset {o} outside [1, {n // 2}]")
    edges = []
    for o in offsets:
        span = n // 2 if 2 * o == n else n
        edges.extend((i, (i + o) % n) for i in range(span))
    return Graph(n, _canonical(edges), vertex_transitive=True)


def gen_named(kind: str, n: int) -> Graph:
    if n < 3:
        raise ValueError(f"{kind} graph needs n >= 3, got {n}")
    if kind == "complete":
        edges = [(u, v) for u in range(n) for v in range(u + 1, n)]
    elif kind == "cycle":
        edges = [(i, (i + 1) % n) for i in range(n)]
    else:
        raise ValueError(f"unknown graph kind {kind!r}")
    return Graph(n, _canonical(edges), vertex_transitive=True)


def parse_edge_list(text: str) -> Graph:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EdgeListError("empty file", 1)
    head = lines[0].split()
    if len(head) != 3 or not head[2].startswith("vt="):
        raise EdgeListError("header must be 'n m vt={0|1}'", 1)
    try:
        n, m = int(head[0]), int(head[1])
        vt = {"vt=0": False, "vt=1": True}[head[2]]
    except (ValueError, KeyError):
        raise EdgeListError(f"bad header {lines[0]!r}", 1) from None
    if len(lines) - 1 != m:
        raise EdgeListError(f"header declares {m} edges, found {len(lines) - 1}", len(lines))
    edges = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 2:
            raise EdgeListError(f"expected 'u v', got {line!r}", lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise EdgeListError(f"non-integer vertex in {line!r}", lineno) from None
        if u == v:
            raise EdgeListError(f"self-loop at vertex {u}", lineno)
        if not (0 <= u < n and 0 <= v < n):
            raise EdgeListError(f"vertex out of range [0, {n})", lineno)
        key = (min(u, v), max(u, v))
        if key in seen:
            raise EdgeListError(f"parallel edge {key}", lineno)
        seen.add(key)
        edges.append(key)
    return Graph(n, tuple(edges), vertex_transitive=vt)


def load_edge_list(path) -> Graph:
    return parse_edge_list(Path(path).read_text(encoding="ascii"))


def format_edge_list(g: Graph) -> str:
    out = [f"{g.n} {g.m} vt={int(g.vertex_transitive)}"]
    out.extend(f"{u} {v}" for u, v in g.edges)
    return "\n".join(out) + "\n"


def save_edge_list(g: Graph, path) -> None:
    Path(path).write_bytes(format_edge_list(g).encode("ascii"))


@dataclass(frozen=True)
class ExpanderProfile:
    d: int
    lambda2: float
    gap: float
    sigma2_assignment: float
    # smallest adjacency eigenvalue; needed for the two-sided mixing bound
    lambda_min: float

    @property
    def spectral_radius(self) -> float:
        """Largest |eigenvalue| orthogonal to the all-ones vector."""
        return max(abs(self.lambda2), abs(self.lambda_min))


def _power_top(matvec, n: int, rng, tol=EIG_TOL, max_iter=100_000) -> float:
    """Top eigenvalue of a PSD operator restricted to the complement of 1."""
    ones = np.full(n, 1.0 / math.sqrt(n))
    x = rng.standard_normal(n)
    x -= ones * (ones @ x)
    x /= np.linalg.norm(x)
    value = 0.0
    for _ in range(max_iter):
        y = matvec(x)
        y -= ones * (ones @ y)
        new_value = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        residual = np.linalg.norm(y - new_value * x)
        x = y / norm
        if residual <= tol * max(1.0, abs(new_value)) or abs(new_value - value) <= tol * 1e-3:
            return new_value
        value = new_value
    raise ConvergenceError(f"power iteration did not converge (residual {residual:.3e})")


def spectral_profile(g: Graph, seed: int = 0) -> ExpanderProfile:
    d = g.regular_degree()
    if d is None:
        raise ValueError("spectral_profile needs a regular graph")
    if g.n <= DENSE_EIG_LIMIT:
        eig = np.linalg.eigvalsh(g.adjacency_matrix())
        lambda2 = float(eig[-2]) if g.n > 1 else float(d)
        lambda_min = float(eig[0])
    else:
        from scipy import sparse

        rows = [u for u, v in g.edges] + [v for u, v in g.edges]
        cols = [v for u, v in g.edges] + [u for u, v in g.edges]
        adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(g.n, g.n))
        rng = np.random.default_rng(seed)
        # shift so the spectrum is nonnegative and the wanted end is on top
        lambda2 = _power_top(lambda x: adj @ x + d * x, g.n, rng) - d
        lambda_min = d - _power_top(lambda x: d * x - adj @ x, g.n, rng)
    gap = d - lambda2
    return ExpanderProfile(
        d=d,
        lambda2=lambda2,
        gap=gap,
        sigma2_assignment=math.sqrt(max(lambda2 + d, 0.0)),
        lambda_min=lambda_min,
    )


def edge_count_between(g: Graph, S, T) -> int:
    """Ordered count of pairs ``(u, v)`` with ``u`` in S, ``v`` in T, ``uv`` an edge."""
    S, T = set(S), set(T)
    count = 0
    for u, v in g.edges:
        count += (u in S and v in T) + (v in S and u in T)
    return count


def mixing_check(g: Graph, S, T, profile: ExpanderProfile | None = None) -> tuple[int, float]:
    """Return ``(|E(S,T)|, lower bound)`` from the expander mixing lemma.

    The bound subtracts the largest nontrivial |eigenvalue| times the usual
    square-root term, which keeps it valid for bipartite graphs as well.
    """
    if profile is None:
        profile = spectral_profile(g)
    n = g.n
    s, t = len(set(S)), len(set(T))
    lhs = edge_count_between(g, S, T)
    slack = math.sqrt(max(s * t * (1 - s / n) * (1 - t / n), 0.0))
    rhs = profile.d * s * t / n - profile.spectral_radius * slack
    return lhs, rhs
