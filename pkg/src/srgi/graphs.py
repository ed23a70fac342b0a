"""Session-level transition graphs and the corpus-wide co-occurrence graph.

A session graph is directed, one node per distinct item, with neighbor
sets typed as in / out / in-out. The global graph is undirected over the
whole vocabulary, weighted by windowed co-occurrence counts across
training sessions, and pruned to the strongest edges per node.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import DataError

GRAPH_MAGIC = b"SRGG"
GRAPH_VERSION = 1


@dataclass
class SessionGraph:
    nodes: list[int]                 # distinct items, first-occurrence order
    pos_of: dict[int, int]           # item -> node position
    edges: list[tuple[int, int]]     # directed (src pos, dst pos), deduplicated
    in_neighbors: list[list[int]]    # per node: positions with an edge into it only
    out_neighbors: list[list[int]]   # per node: positions it points to only
    inout_neighbors: list[list[int]]  # per node: positions linked both ways


def build_session_graph(prefix: list[int]) -> SessionGraph:
    """Build the directed transition graph of one prefix.

    Consecutive distinct items induce one edge each (self-loops dropped,
    duplicates collapsed). A neighbor connected in both directions is
    classified in-out exclusively; otherwise in or out.
    """
    if not prefix:
        raise ValueError("prefix must be non-empty")
    nodes: list[int] = []
    pos_of: dict[int, int] = {}
    for item in prefix:
        if item not in pos_of:
            pos_of[item] = len(nodes)
            nodes.append(item)

    edge_set = set()
    for a, b in zip(prefix, prefix[1:]):
        if a != b:
            edge_set.add((pos_of[a], pos_of[b]))

    n = len(nodes)
    incoming = [set() for _ in range(n)]
    outgoing = [set() for _ in range(n)]
    for u, v in edge_set:
        outgoing[u].add(v)
        incoming[v].add(u)

    in_nb, out_nb, io_nb = [], [], []
    for u in range(n):
        both = incoming[u] & outgoing[u]
        in_nb.append(sorted(incoming[u] - both))
        out_nb.append(sorted(outgoing[u] - both))
        io_nb.append(sorted(both))

    return SessionGraph(
        nodes=nodes,
        pos_of=pos_of,
        edges=sorted(edge_set),
        in_neighbors=in_nb,
        out_neighbors=out_nb,
        inout_neighbors=io_nb,
    )


@dataclass
class GlobalGraph:
    """Undirected weighted adjacency over the full vocabulary.

    ``adj[u]`` maps neighbor index to a positive co-occurrence count;
    symmetric, no self-loops.
    """

    n_items: int
    adj: list[dict[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.adj:
            self.adj = [dict() for _ in range(self.n_items)]

    def add_edge(self, u: int, v: int, weight: int = 1) -> None:
        self.adj[u][v] = self.adj[u].get(v, 0) + weight
        self.adj[v][u] = self.adj[v].get(u, 0) + weight

    def edge_count(self) -> int:
        return sum(len(d) for d in self.adj) // 2

    def edges(self) -> list[tuple[int, int, int]]:
        """All undirected edges as (u, v, weight) with u < v, sorted."""
        out = []
        for u, d in enumerate(self.adj):
            for v, w in d.items():
                if u < v:
                    out.append((u, v, w))
        out.sort()
        return out


def build_global_graph(sessions: list[list[int]], epsilon: int,
                       n_items: int | None = None) -> GlobalGraph:
    """Accumulate windowed co-occurrence weights over training sessions.

    Every unordered position pair (i, j) with 0 < j - i <= epsilon and
    distinct items adds 1 to the weight of the item pair; repeats across
    positions and sessions accumulate.
    """
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    if n_items is None:
        n_items = max((max(s) for s in sessions if s), default=-1) + 1
    g = GlobalGraph(n_items=n_items)
    for seq in sessions:
        n = len(seq)
        for i in range(n):
            for j in range(i + 1, min(i + epsilon, n - 1) + 1):
                if seq[i] != seq[j]:
                    g.add_edge(seq[i], seq[j], 1)
    return g


def prune_global_graph(g: GlobalGraph, max_neighbors: int) -> GlobalGraph:
    """Keep each node's top-weight edges; an edge survives if either endpoint keeps it.

    Ties break toward the lower neighbor index. Symmetry is restored after
    the per-node selection, so degrees can exceed ``max_neighbors`` where a
    neighbor insisted on the edge.
    """
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    kept: set[tuple[int, int]] = set()
    for u, d in enumerate(g.adj):
        ranked = sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))
        for v, _ in ranked[:max_neighbors]:
            kept.add((min(u, v), max(u, v)))
    pruned = GlobalGraph(n_items=g.n_items)
    for u, v in kept:
        pruned.add_edge(u, v, g.adj[u][v])
    return pruned


def neighbors_of(g: GlobalGraph, v: int) -> list[tuple[int, int]]:
    """Neighbors of ``v`` as (index, weight), weight descending then index ascending."""
    if not 0 <= v < g.n_items:
        raise ValueError(f"item index {v} out of range (vocabulary size {g.n_items})")
    return sorted(g.adj[v].items(), key=lambda kv: (-kv[1], kv[0]))


def neighbor_lists(g: GlobalGraph) -> list[list[tuple[int, int]]]:
    """Precomputed :func:`neighbors_of` for every node (read-only cache)."""
    return [neighbors_of(g, v) for v in range(g.n_items)]


def write_graph(path, g: GlobalGraph) -> None:
    """Serialize to the binary neighbor-list format (little-endian).

    Layout: magic ``SRGG``, version u16, item count u32, then per node a
    u16 degree followed by (neighbor u32, weight u32) pairs.
    """
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<H", GRAPH_VERSION))
        fh.write(struct.pack("<I", g.n_items))
        for v in range(g.n_items):
            nbrs = neighbors_of(g, v)
            if len(nbrs) > 0xFFFF:
                raise DataError(
                    f"node {v} degree {len(nbrs)} exceeds format limit; prune first"
                )
            fh.write(struct.pack("<H", len(nbrs)))
            for j, w in nbrs:
                fh.write(struct.pack("<II", j, w))


def read_graph(path) -> GlobalGraph:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRAPH_MAGIC:
            raise DataError(f"{path}: not a global-graph file (bad magic {magic!r})")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != GRAPH_VERSION:
            raise DataError(f"{path}: unsupported graph version {version}")
        (n_items,) = struct.unpack("<I", fh.read(4))
        g = GlobalGraph(n_items=n_items)
        for v in range(n_items):
            raw = fh.read(2)
            if len(raw) != 2:
                raise DataError(f"{path}: truncated at node {v}")
            (degree,) = struct.unpack("<H", raw)
            for _ in range(degree):
                pair = fh.read(8)
                if len(pair) != 8:
                    raise DataError(f"{path}: truncated neighbor list at node {v}")
                j, w = struct.unpack("<II", pair)
                g.adj[v][j] = w
        for u in range(n_items):
            for j, w in g.adj[u].items():
                if g.adj[j].get(u) != w:
                    raise DataError(f"{path}: asymmetric edge ({u}, {j})")
    return g
