"""Deterministic communication-pattern generators.

Every instance is a pure function of the config and seed.  Neighbor values are
derived from ``(seed, cycle, global index)`` so that every rank sending one
global index sends identical bytes, as the locality-aware exchange requires.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

from .config import RunConfig


def value_bytes(seed: int, cycle: int, index: int, width: int) -> bytes:
    return hashlib.shake_128(f"{seed}:{cycle}:{index}".encode()).digest(width)


def _prefix(counts):
    out, acc = [], 0
    for c in counts:
        out.append(acc)
        acc += c
    return out


@dataclass
class AlltoallvInstance:
    width: int
    counts: list[list[int]]  # counts[p][q]: elements p sends to q
    sendbufs: list[bytes]

    @property
    def size(self) -> int:
        return len(self.counts)

    def sendcounts(self, p):
        return self.counts[p]

    def sdispls(self, p):
        return _prefix(self.counts[p])

    def recvcounts(self, q):
        return [self.counts[p][q] for p in range(self.size)]

    def rdispls(self, q):
        return _prefix(self.recvcounts(q))


def alltoallv_instance(rng: random.Random, size: int, width: int, lo: int, hi: int) -> AlltoallvInstance:
    counts = [[rng.randint(lo, hi) for _ in range(size)] for _ in range(size)]
    bufs = [rng.randbytes(sum(row) * width) for row in counts]
    return AlltoallvInstance(width, counts, bufs)


@dataclass
class AllgatherInstance:
    blocks: list[bytes]


@dataclass
class Edge:
    src: int
    dst: int
    indices: list[int]


@dataclass
class NeighborInstance:
    """Sparse graph whose edges carry lists of global value indices."""

    size: int
    width: int
    seed: int
    edges: list[Edge]

    def out_edges(self, r):
        return [e for e in self.edges if e.src == r]

    def in_edges(self, r):
        return [e for e in self.edges if e.dst == r]

    def send_indices(self, r):
        return [g for e in self.out_edges(r) for g in e.indices]

    def recv_indices(self, r):
        return [g for e in self.in_edges(r) for g in e.indices]

    def sendbuf(self, r, cycle):
        return b"".join(value_bytes(self.seed, cycle, g, self.width) for g in self.send_indices(r))


def grid_shape(size: int) -> tuple[int, int]:
    rows = max(d for d in range(1, math.isqrt(size) + 1) if size % d == 0)
    return rows, size // rows


def stencil5(size: int, values_per_rank: int, width: int, seed: int) -> NeighborInstance:
    """Non-periodic 5-point stencil; each rank sends all its values to each grid neighbor."""
    rows, cols = grid_shape(size)
    edges = []
    for r in range(size):
        i, j = divmod(r, cols)
        own = [r * values_per_rank + k for k in range(values_per_rank)]
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < rows and 0 <= nj < cols:
                edges.append(Edge(r, ni * cols + nj, list(own)))
    return NeighborInstance(size, width, seed, edges)


def _merge_edges(pairs: dict[tuple[int, int], list[int]]) -> list[Edge]:
    return [Edge(s, d, gs) for (s, d), gs in sorted(pairs.items()) if gs]


def duplicated_graph(rng: random.Random, node_map: list[int], values_per_rank: int,
                     duplication: int, width: int, seed: int) -> NeighborInstance:
    """Each value goes to ``duplication`` distinct ranks of one other node, where possible.

    Global indices are owned by their producing rank, so the only duplicates
    are the intended fan-out copies.
    """
    size = len(node_map)
    n_nodes = max(node_map) + 1
    groups = [[r for r in range(size) if node_map[r] == n] for n in range(n_nodes)]
    pairs: dict[tuple[int, int], list[int]] = {}
    for r in range(size):
        remote = [n for n in range(n_nodes) if n != node_map[r]] or [node_map[r]]
        for k in range(values_per_rank):
            node = rng.choice(remote)
            targets = rng.sample(groups[node], min(duplication, len(groups[node])))
            g = r * values_per_rank + k
            for q in sorted(targets):
                pairs.setdefault((r, q), []).append(g)
    return NeighborInstance(size, width, seed, _merge_edges(pairs))


def random_graph(rng: random.Random, node_map: list[int], width: int, seed: int,
                 max_degree: int = 4, max_count: int = 4, pool: int = 12) -> NeighborInstance:
    """Unstructured graph with duplicates everywhere.

    Indices are drawn from a per-node pool, so the same global index may be
    sent by several ranks of a node, to several ranks of a remote node, and
    more than once to one receiver.  Edges may be intra-node, self-loops or
    repeated between one rank pair.
    """
    size = len(node_map)
    edges = []
    for r in range(size):
        base = node_map[r] * pool
        for _ in range(rng.randint(0, max_degree)):
            q = rng.randrange(size)
            edges.append(Edge(r, q, [base + rng.randrange(pool) for _ in range(rng.randint(0, max_count))]))
    return NeighborInstance(size, width, seed, edges)


@dataclass
class PartitionedInstance:
    width: int
    send_partitions: int
    recv_partitions: int
    count: int  # elements per sender partition
    partner: list[int]  # partner[r]: rank r sends to
    payloads: list[list[bytes]] = field(default_factory=list)  # [cycle][rank]
    orders: list[list[list[int]]] = field(default_factory=list)  # [cycle][rank] pready order

    @property
    def nbytes(self) -> int:
        return self.send_partitions * self.count * self.width

    @property
    def recv_count(self) -> int:
        return self.send_partitions * self.count // self.recv_partitions

    def source_of(self, r: int) -> int:
        return self.partner.index(r)


def generate_pattern(cfg: RunConfig, seed: int | None = None):
    """Build the instance for ``cfg.pattern``; identical seeds give identical bytes."""
    seed = cfg.seed if seed is None else seed
    rng = random.Random(seed)
    p, w = cfg.ranks, cfg.width
    if cfg.pattern == "alltoallv-uniform":
        return alltoallv_instance(rng, p, w, cfg.count, cfg.count)
    if cfg.pattern == "alltoallv-random":
        return alltoallv_instance(rng, p, w, 0, cfg.max_count)
    if cfg.pattern == "allgather":
        return AllgatherInstance([rng.randbytes(cfg.count * w) for _ in range(p)])
    if cfg.pattern == "stencil5":
        return stencil5(p, cfg.count, w, seed)
    if cfg.pattern == "random-sparse-graph":
        return duplicated_graph(rng, cfg.nodes, cfg.degree, cfg.duplication, w, seed)
    if cfg.pattern == "partitioned":
        nodes = cfg.nodes
        ppn = nodes.count(nodes[0])
        shift = ppn if cfg.n_nodes > 1 else 1
        inst = PartitionedInstance(w, cfg.partitions_send, cfg.partitions_recv, cfg.count,
                                   [(r + shift) % p for r in range(p)])
        for _ in range(cfg.cycles):
            inst.payloads.append([rng.randbytes(inst.nbytes) for _ in range(p)])
            orders = []
            for _ in range(p):
                order = list(range(cfg.partitions_send))
                rng.shuffle(order)
                orders.append(order)
            inst.orders.append(orders)
        return inst
    raise ValueError(f"unknown pattern {cfg.pattern!r}")
