"""Extended communicator with node-locality structure, and adjacency topologies."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import ConfigurationError, TopologyError
from .transport import (
    ANY_SOURCE,
    ANY_TAG,
    Endpoint,
    Envelope,
    SendHandle,
    TagKind,
    Universe,
    internal_tag,
    validate_node_map,
)

# Carried through init calls for API fidelity; no keys are recognized.
Info = Mapping[str, Any]


class Communicator:
    """Rank identity plus the node-local structure derived from a node map.

    Construction performs no communication: the node map is global
    configuration, so every rank derives the same groups independently.
    """

    def __init__(self, endpoint: Endpoint, node_map=None, info: Info | None = None):
        universe: Universe = endpoint.universe
        if node_map is None:
            node_map = universe.node_map
        node_of = validate_node_map(node_map, universe.n_ranks)
        if endpoint.rank >= len(node_of):
            raise ConfigurationError(f"rank {endpoint.rank} missing from node map")
        self.endpoint = endpoint
        self.universe = universe
        self.rank = endpoint.rank
        self.size = universe.n_ranks
        self.node_of = tuple(node_of)
        self.n_nodes = max(node_of) + 1
        self.node = node_of[self.rank]
        groups: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for r, n in enumerate(node_of):
            groups[n].append(r)
        self.node_groups = tuple(tuple(g) for g in groups)
        self.local_group = self.node_groups[self.node]
        self.local_index = self.local_group.index(self.rank)
        self.info = dict(info or {})
        self._epoch = itertools.count()
        self._request_ids = itertools.count()

    def __repr__(self) -> str:
        return (f"Communicator(rank={self.rank}, size={self.size}, node={self.node}, "
                f"n_nodes={self.n_nodes})")

    def same_node(self, other: int) -> bool:
        return self.node_of[other] == self.node

    def leader_on(self, node: int, remote_node: int) -> int:
        """Rank on ``node`` that handles traffic exchanged with ``remote_node``."""
        group = self.node_groups[node]
        return group[remote_node % len(group)]

    def leader_for(self, remote_node: int) -> int:
        if not 0 <= remote_node < self.n_nodes:
            raise ConfigurationError(f"remote node {remote_node} outside 0..{self.n_nodes - 1}")
        return self.leader_on(self.node, remote_node)

    def next_epoch(self) -> int:
        return next(self._epoch)

    def next_request_id(self) -> int:
        return next(self._request_ids)

    # point-to-point shortcuts used by the algorithm layers
    def send(self, dst: int, tag: int, payload=b"", values: int = 0) -> SendHandle:
        return self.endpoint.send(Envelope(self.rank, dst, tag, bytes(payload)), values)

    def recv(self, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> bytes:
        return self.endpoint.recv(src, tag).payload


def comm_init(endpoint: Endpoint, node_map=None, info: Info | None = None) -> Communicator:
    return Communicator(endpoint, node_map, info)


def coll_tag(epoch: int, phase: int) -> int:
    return internal_tag(TagKind.COLL, (epoch << 4) | phase)


@dataclass(frozen=True)
class NeighborTopology:
    """Adjacency lists of one rank in a distributed graph.

    Weights are stored but never used for scheduling.  Global consistency
    (q in p's destinations iff p in q's sources) is not checked here.
    """

    comm: Communicator
    sources: tuple[int, ...]
    destinations: tuple[int, ...]
    sourceweights: tuple[int, ...] = ()
    destweights: tuple[int, ...] = ()
    reorder: bool = False
    info: Mapping[str, Any] = field(default_factory=dict)

    @property
    def indegree(self) -> int:
        return len(self.sources)

    @property
    def outdegree(self) -> int:
        return len(self.destinations)


def _check_neighbors(comm: Communicator, ranks: Sequence[int], weights, what: str):
    ranks = tuple(int(r) for r in ranks)
    for r in ranks:
        if not 0 <= r < comm.size:
            raise TopologyError(f"{what} neighbor {r} outside 0..{comm.size - 1}")
    if weights is None:
        weights = (1,) * len(ranks)
    weights = tuple(weights)
    if len(weights) != len(ranks):
        raise TopologyError(f"{len(weights)} {what} weights for {len(ranks)} neighbors")
    if any(w < 0 for w in weights):
        raise TopologyError(f"negative {what} weight")
    return ranks, weights


def dist_graph_create_adjacent(comm: Communicator, sources: Sequence[int], sourceweights,
                               destinations: Sequence[int], destweights,
                               info: Info | None = None, reorder: bool = False) -> NeighborTopology:
    """Attach an adjacency graph to ``comm``.  ``reorder`` is accepted and ignored."""
    src, sw = _check_neighbors(comm, sources, sourceweights, "source")
    dst, dw = _check_neighbors(comm, destinations, destweights, "destination")
    return NeighborTopology(comm, src, dst, sw, dw, bool(reorder), dict(info or {}))
