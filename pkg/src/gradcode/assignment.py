"""Assignment matrices mapping data blocks to machines."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .graphs import Graph

KINDS = ("graph", "frc", "adjacency", "uncoded", "debias-wrapped")


@dataclass(frozen=True)
class AssignmentScheme:
    """Column-sparse ``n_blocks x m`` assignment matrix.

    ``columns[j]`` lists the ``(block, value)`` entries held by machine ``j``
    in ascending block order.
    """

    n_blocks: int
    columns: tuple[tuple[tuple[int, float], ...], ...]
    kind: str
    graph: Graph | None = None
    vertex_transitive: bool = False
    # frc only: group id per machine
    groups: tuple[int, ...] | None = None
    # debias-wrapped only: source row and scale of each row
    source_rows: tuple[int, ...] | None = field(default=None, repr=False)
    row_scale: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        for j, col in enumerate(self.columns):
            rows = [i for i, _ in col]
            if rows != sorted(set(rows)):
                raise ValueError(f"column {j} rows must be strictly ascending")
            if rows and not (0 <= rows[0] and rows[-1] < self.n_blocks):
                raise ValueError(f"column {j} has a row outside [0, {self.n_blocks})")

    @property
    def m(self) -> int:
        return len(self.columns)

    @cached_property
    def nnz(self) -> int:
        return sum(1 for col in self.columns for _, val in col if val != 0)

    @property
    def d(self) -> float:
        """Replication factor: nonzeros per block."""
        return self.nnz / self.n_blocks

    @cached_property
    def load(self) -> int:
        """Largest number of blocks held by one machine."""
        return max((sum(1 for _, val in col if val != 0) for col in self.columns), default=0)

    @cached_property
    def matrix(self) -> np.ndarray:
        a = np.zeros((self.n_blocks, self.m))
        for j, col in enumerate(self.columns):
            for i, val in col:
                a[i, j] = val
        a.setflags(write=False)
        return a

    @cached_property
    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def text(self) -> str:
        return format_scheme(self)

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(format_scheme(self).encode("ascii")).hexdigest()[:16]


def graph_scheme(g: Graph) -> AssignmentScheme:
    columns = tuple(((min(u, v), 1.0), (max(u, v), 1.0)) for u, v in g.edges)
    return AssignmentScheme(g.n, columns, "graph", graph=g, vertex_transitive=g.vertex_transitive)


def frc_scheme(n_blocks: int, m: int, d: int) -> AssignmentScheme:
    """Fractional repetition: ``m/d`` groups, each machine holds its whole group."""
    if d < 1 or m % d:
        raise ValueError(f"m={m} must be divisible by d={d}")
    n_groups = m // d
    if n_blocks % n_groups:
        raise ValueError(f"n_blocks={n_blocks} must be divisible by m/d={n_groups}")
    per_group = n_blocks // n_groups
    columns = []
    groups = []
    for j in range(m):
        g = j // d
        columns.append(tuple((g * per_group + b, 1.0) for b in range(per_group)))
        groups.append(g)
    # a full group is an orbit under block/machine relabelling, so E[alpha] is flat
    return AssignmentScheme(n_blocks, tuple(columns), "frc", vertex_transitive=True, groups=tuple(groups))


def adjacency_scheme(g: Graph) -> AssignmentScheme:
    """Machine ``i`` holds the blocks of the neighbours of vertex ``i``."""
    if g.regular_degree() is None:
        raise ValueError("adjacency scheme needs a regular graph")
    nbrs = [sorted(v for _, v in g.incidence[i]) for i in range(g.n)]
    columns = tuple(tuple((v, 1.0) for v in nbrs[i]) for i in range(g.n))
    return AssignmentScheme(g.n, columns, "adjacency", graph=g, vertex_transitive=g.vertex_transitive)


def uncoded_scheme(m: int) -> AssignmentScheme:
    return AssignmentScheme(m, tuple(((j, 1.0),) for j in range(m)), "uncoded", vertex_transitive=True)


def debias(a: AssignmentScheme, mean_alpha, eps: float) -> AssignmentScheme:
    """Rescale and duplicate rows so the inherited decoding is unbiased.

    Rows whose mean coefficient is at least ``1 - sqrt(2*eps)`` are kept and
    divided by that mean; the first ``n - |kept|`` kept rows are then appended
    again, so the result has as many rows as ``a`` and at most twice its load.
    Decode it with the weights chosen for ``a`` (see ``decode_inherited``).
    """
    mean_alpha = np.asarray(mean_alpha, dtype=float)
    n = a.n_blocks
    if mean_alpha.shape != (n,):
        raise ValueError(f"mean_alpha must have length {n}")
    if not 0 <= eps < 0.5:
        raise ValueError(f"eps must lie in [0, 1/2), got {eps}")
    delta = 1.0 - math.sqrt(2.0 * eps)
    kept = [i for i in range(n) if mean_alpha[i] >= delta]
    if 2 * len(kept) < n:
        raise ValueError(f"only {len(kept)} of {n} rows have mean >= {delta:.4f}; need at least n/2")
    if any(mean_alpha[i] <= 0 for i in kept):
        raise ValueError("mean_alpha must be positive on the kept rows")
    source = kept + kept[: n - len(kept)]
    scale = [1.0 / float(mean_alpha[i]) for i in source]

    a_dense = a.matrix
    columns = []
    for j in range(a.m):
        col = []
        for new_i, (src, sc) in enumerate(zip(source, scale)):
            val = a_dense[src, j]
            if val != 0:
                col.append((new_i, float(val * sc)))
        columns.append(tuple(col))
    return AssignmentScheme(
        n,
        tuple(columns),
        "debias-wrapped",
        graph=a.graph,
        vertex_transitive=False,
        source_rows=tuple(source),
        row_scale=tuple(scale),
    )


@dataclass(frozen=True)
class BlockPartition:
    N: int
    n_blocks: int

    @property
    def size(self) -> int:
        return self.N // self.n_blocks

    @property
    def ranges(self) -> list[range]:
        s = self.size
        return [range(b * s, (b + 1) * s) for b in range(self.n_blocks)]


def partition_blocks(N: int, n_blocks: int) -> BlockPartition:
    if n_blocks < 1 or N % n_blocks:
        raise ValueError(f"N={N} is not divisible by n_blocks={n_blocks}")
    return BlockPartition(N, n_blocks)


def format_scheme(a: AssignmentScheme) -> str:
    d = a.d
    d_txt = str(int(d)) if float(d).is_integer() else repr(d)
    lines = [f"{a.n_blocks} {a.m} {a.kind} {d_txt} {int(a.vertex_transitive)}"]
    for j, col in enumerate(a.columns):
        entries = " ".join(f"({i},{val!r})" for i, val in col)
        lines.append(f"{j}: {entries}".rstrip())
    return "\n".join(lines) + "\n"


def parse_scheme(text: str) -> AssignmentScheme:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 5:
        raise ValueError("scheme header must be 'n m kind d vt'")
    n, m, kind, _, vt = int(head[0]), int(head[1]), head[2], head[3], head[4] == "1"
    if len(lines) - 1 != m:
        raise ValueError(f"header declares {m} columns, found {len(lines) - 1}")
    columns = []
    for lineno, line in enumerate(lines[1:], start=2):
        label, _, rest = line.partition(":")
        if int(label) != lineno - 2:
            raise ValueError(f"line {lineno}: expected column {lineno - 2}")
        col = []
        for tok in rest.split():
            i_txt, val_txt = tok.strip("()").split(",")
            col.append((int(i_txt), float(val_txt)))
        columns.append(tuple(col))
    graph = None
    groups = None
    if kind == "graph":
        graph = Graph(n, tuple((c[0][0], c[1][0]) for c in columns), vertex_transitive=vt)
    elif kind == "frc":
        # machines sharing a column pattern form a group
        ids: dict[tuple, int] = {}
        groups = tuple(ids.setdefault(c, len(ids)) for c in columns)
    return AssignmentScheme(n, tuple(columns), kind, graph=graph, vertex_transitive=vt, groups=groups)


def save_scheme(a: AssignmentScheme, path) -> None:
    Path(path).write_bytes(format_scheme(a).encode("ascii"))


def load_scheme(path) -> AssignmentScheme:
    return parse_scheme(Path(path).read_text(encoding="ascii"))
