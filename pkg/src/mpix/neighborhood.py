"""Persistent neighborhood alltoallv, plain and locality-aware.

Both request kinds build their schedule once, in the init call, and then
replay it on every start/wait cycle.  The locality-aware request routes
node-crossing values through one aggregator per (node, remote node) pair and
sends each global value index at most once per ordered node pair.
"""

from __future__ import annotations

import enum
import struct
import threading
from collections import defaultdict
from typing import Sequence

from .comm import Communicator, Info, NeighborTopology
from .errors import ArgumentError, LifecycleError, TopologyError
from .transport import TagKind, internal_tag

_HEAD = struct.Struct("<I")
_ENTRY = struct.Struct("<QI")  # global index, value length

# tag phases
_DIRECT, _GATHER, _INTER, _SCATTER = range(4)
_PLAN, _PEER = range(2)


class RequestState(enum.Enum):
    INACTIVE = "inactive"
    ACTIVE = "active"


def _view(buf) -> memoryview:
    mv = memoryview(buf)
    return mv.cast("B") if mv.format != "B" or mv.ndim != 1 else mv


def _edge_regions(counts, displs, degree, capacity, width, what):
    counts, displs = list(counts), list(displs)
    if len(counts) != degree or len(displs) != degree:
        raise ArgumentError(f"{what} counts/displs need {degree} entries, got {len(counts)}/{len(displs)}")
    spans = []
    for i, (c, d) in enumerate(zip(counts, displs)):
        if c < 0 or d < 0:
            raise ArgumentError(f"negative {what} count or displacement on edge {i}")
        if (d + c) * width > capacity:
            raise ArgumentError(f"{what} edge {i} ends at byte {(d + c) * width}, buffer holds {capacity}")
        if c:
            spans.append((d, d + c, i))
    spans.sort()
    for (_, hi, a), (lo, _, b) in zip(spans, spans[1:]):
        if lo < hi:
            raise ArgumentError(f"{what} regions of edges {a} and {b} overlap")
    return counts, displs


def _pack_lists(lists: Sequence[Sequence[int]]) -> bytes:
    parts = [_HEAD.pack(len(lists))]
    for lst in lists:
        parts.append(struct.pack(f"<I{len(lst)}Q", len(lst), *lst))
    return b"".join(parts)


def _unpack_lists(buf: bytes) -> list[list[int]]:
    (n,) = _HEAD.unpack_from(buf)
    pos = _HEAD.size
    out = []
    for _ in range(n):
        (k,) = _HEAD.unpack_from(buf, pos)
        pos += _HEAD.size
        out.append(list(struct.unpack_from(f"<{k}Q", buf, pos)))
        pos += 8 * k
    return out


def pack_indexed(indices: Sequence[int], values: Sequence[bytes]) -> bytes:
    """Aggregated wire form: ``u32 n | n x (u64 index, u32 len) | values``, indices ascending."""
    return b"".join([_HEAD.pack(len(indices))]
                    + [_ENTRY.pack(g, len(v)) for g, v in zip(indices, values)]
                    + list(values))


def unpack_indexed(buf: bytes) -> tuple[list[int], list[bytes]]:
    (n,) = _HEAD.unpack_from(buf)
    pos = _HEAD.size
    entries = []
    for _ in range(n):
        entries.append(_ENTRY.unpack_from(buf, pos))
        pos += _ENTRY.size
    indices, values = [], []
    for g, length in entries:
        indices.append(g)
        values.append(bytes(buf[pos:pos + length]))
        pos += length
    return indices, values


class PersistentRequest:
    """INACTIVE/ACTIVE state machine shared by both request kinds."""

    def __init__(self, topology: NeighborTopology, sendbuf, sendcounts, sdispls,
                 recvbuf, recvcounts, rdispls, width: int, info: Info | None):
        if width <= 0:
            raise ArgumentError(f"element width must be positive, got {width}")
        comm = topology.comm
        self.comm = comm
        self.topology = topology
        self.width = width
        self.info = dict(info or {})
        self.sendbuf = sendbuf
        self.recvbuf = recvbuf
        send, recv = _view(sendbuf), _view(recvbuf)
        if recv.readonly:
            raise ArgumentError("recvbuf must be writable")
        self.sendcounts, self.sdispls = _edge_regions(
            sendcounts, sdispls, topology.outdegree, send.nbytes, width, "send")
        self.recvcounts, self.rdispls = _edge_regions(
            recvcounts, rdispls, topology.indegree, recv.nbytes, width, "recv")
        self.request_id = comm.next_request_id()
        self.state = RequestState.INACTIVE
        self.cycles = 0
        self._lock = threading.Lock()

    def _tag(self, kind: TagKind, phase: int) -> int:
        return internal_tag(kind, (self.request_id << 4) | phase)

    def _send_elems(self, lo: int, n: int) -> bytes:
        w = self.width
        return bytes(_view(self.sendbuf)[lo * w:(lo + n) * w])

    def _put_elems(self, lo: int, data) -> None:
        w = self.width
        _view(self.recvbuf)[lo * w:lo * w + len(data)] = data

    def _expect(self, data: bytes, nbytes: int, src: int) -> bytes:
        if len(data) != nbytes:
            raise TopologyError(
                f"rank {self.comm.rank}: {len(data)} bytes from rank {src}, expected {nbytes}")
        return data

    def start(self) -> None:
        with self._lock:
            if self.state is not RequestState.INACTIVE:
                raise LifecycleError("start on an active request")
            self.state = RequestState.ACTIVE
        self.cycles += 1
        self._start()

    def wait(self) -> None:
        with self._lock:
            if self.state is not RequestState.ACTIVE:
                raise LifecycleError("wait on an inactive request")
        try:
            self._wait()
        finally:
            self.state = RequestState.INACTIVE

    def _start(self) -> None:
        raise NotImplementedError

    def _wait(self) -> None:
        raise NotImplementedError


class NeighborAlltoallvRequest(PersistentRequest):
    """One direct message per edge with a non-zero count."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        topo = self.topology
        self.tag = self._tag(TagKind.NBR_DATA, _DIRECT)
        self.sends = [(dst, self.sdispls[i], self.sendcounts[i])
                      for i, dst in enumerate(topo.destinations) if self.sendcounts[i]]
        self.recvs = [(src, self.rdispls[j], self.recvcounts[j])
                      for j, src in enumerate(topo.sources) if self.recvcounts[j]]

    def _start(self) -> None:
        for dst, lo, n in self.sends:
            self.comm.send(dst, self.tag, self._send_elems(lo, n), values=n)

    def _wait(self) -> None:
        for src, lo, n in self.recvs:
            self._put_elems(lo, self._expect(self.comm.recv(src, self.tag), n * self.width, src))


class LocalityNeighborAlltoallvRequest(PersistentRequest):
    """Three-phase exchange that deduplicates values crossing node boundaries.

    Per start: each rank ships the unique values it owes remote node D to its
    local aggregator ``leader_for(D)``; that aggregator sends one message per
    remote node holding each global index once, sorted ascending; the remote
    aggregator fans values out to every rank and slot that asked for them.
    Same-node edges are sent directly.
    """

    def __init__(self, topology, sendbuf, sendcounts, sdispls, recvbuf, recvcounts, rdispls,
                 send_indices, recv_indices, width, info):
        super().__init__(topology, sendbuf, sendcounts, sdispls, recvbuf, recvcounts,
                         rdispls, width, info)
        comm = self.comm
        n_send = _view(sendbuf).nbytes // width
        n_recv = _view(recvbuf).nbytes // width
        send_indices, recv_indices = list(send_indices), list(recv_indices)
        if len(send_indices) != n_send:
            raise ArgumentError(f"{len(send_indices)} send indices for {n_send} send elements")
        if len(recv_indices) != n_recv:
            raise ArgumentError(f"{len(recv_indices)} recv indices for {n_recv} recv elements")
        if any(g < 0 for g in send_indices) or any(g < 0 for g in recv_indices):
            raise ArgumentError("global indices must be non-negative")

        self.t_direct = self._tag(TagKind.NBR_DATA, _DIRECT)
        self.t_gather = self._tag(TagKind.NBR_DATA, _GATHER)
        self.t_inter = self._tag(TagKind.NBR_DATA, _INTER)
        self.t_scatter = self._tag(TagKind.NBR_DATA, _SCATTER)

        remote_nodes = [d for d in range(comm.n_nodes) if d != comm.node]
        self.direct_sends, self.direct_recvs = [], []
        # per remote node: global index -> first send element offset
        self.owe: dict[int, dict[int, int]] = {d: {} for d in remote_nodes}
        send_edges: dict[int, list[list[int]]] = {d: [] for d in remote_nodes}
        for i, dst in enumerate(topology.destinations):
            lo, n = self.sdispls[i], self.sendcounts[i]
            if not n:
                continue
            if comm.same_node(dst):
                self.direct_sends.append((dst, lo, n))
                continue
            d = comm.node_of[dst]
            gs = send_indices[lo:lo + n]
            for k, g in enumerate(gs):
                self.owe[d].setdefault(g, lo + k)
            send_edges[d].append([comm.rank, dst] + gs)
        # per remote node: global index -> recv element offsets to fill
        self.need: dict[int, dict[int, list[int]]] = {d: defaultdict(list) for d in remote_nodes}
        recv_edges: dict[int, list[list[int]]] = {d: [] for d in remote_nodes}
        for j, src in enumerate(topology.sources):
            lo, n = self.rdispls[j], self.recvcounts[j]
            if not n:
                continue
            if comm.same_node(src):
                self.direct_recvs.append((src, lo, n))
                continue
            s = comm.node_of[src]
            gs = recv_indices[lo:lo + n]
            for k, g in enumerate(gs):
                self.need[s][g].append(lo + k)
            recv_edges[s].append([src, comm.rank] + gs)
        self.owe_order = {d: sorted(m) for d, m in self.owe.items()}
        self.need_order = {s: sorted(m) for s, m in self.need.items()}

        self._setup(remote_nodes, send_edges, recv_edges)

    # -- one-time negotiation on reserved setup tags ---------------------------
    def _setup(self, remote_nodes, send_edges, recv_edges) -> None:
        comm = self.comm
        t_plan = self._tag(TagKind.NBR_SETUP, _PLAN)
        t_peer = self._tag(TagKind.NBR_SETUP, _PEER)
        for x in remote_nodes:
            lists = [[len(send_edges[x]), len(recv_edges[x])], self.owe_order[x], self.need_order[x]]
            comm.send(comm.leader_for(x), t_plan, _pack_lists(lists + send_edges[x] + recv_edges[x]))

        self.led = [x for x in remote_nodes if comm.leader_for(x) == comm.rank]
        # aggregator tables, keyed by the remote node this rank serves
        self.contributors: dict[int, list[tuple[int, list[int]]]] = {}
        self.outgoing: dict[int, list[int]] = {}
        self.incoming: dict[int, list[int]] = {}
        self.fanout: dict[int, list[tuple[int, list[int]]]] = {}
        expected_edges: dict[int, list[list[int]]] = {}
        for x in self.led:
            contrib, fan, edges_out, edges_in = [], [], [], []
            union: set[int] = set()
            for q in comm.local_group:
                lists = _unpack_lists(comm.recv(q, t_plan))
                (n_se, n_re), owe, need = lists[0], lists[1], lists[2]
                if owe:
                    contrib.append((q, owe))
                    union.update(owe)
                if need:
                    fan.append((q, need))
                edges_out += lists[3:3 + n_se]
                edges_in += lists[3 + n_se:3 + n_se + n_re]
            self.contributors[x] = contrib
            self.fanout[x] = fan
            self.outgoing[x] = sorted(union)
            expected_edges[x] = edges_in
            comm.send(comm.leader_on(x, comm.node), t_peer,
                      _pack_lists([self.outgoing[x]] + edges_out))
        for x in self.led:
            lists = _unpack_lists(comm.recv(comm.leader_on(x, comm.node), t_peer))
            self.incoming[x] = lists[0]
            self._check_edges(x, lists[1:], expected_edges[x])

    def _check_edges(self, x: int, sent: list[list[int]], wanted: list[list[int]]) -> None:
        # the k-th edge s->q on the send side pairs with the k-th on the receive side
        by_pair: dict[tuple[int, int], list[list[int]]] = defaultdict(list)
        for e in sent:
            by_pair[e[0], e[1]].append(e[2:])
        for e in wanted:
            queue = by_pair.get((e[0], e[1]))
            if not queue:
                raise TopologyError(f"rank {e[1]} expects data from rank {e[0]} on node {x}, none is sent")
            got = queue.pop(0)
            if got != e[2:]:
                raise TopologyError(
                    f"recv indices of edge {e[0]}->{e[1]} disagree with the sender's send indices")
        extra = [pair for pair, q in by_pair.items() if q]
        if extra:
            raise TopologyError(f"edges {extra} carry data nobody on this node receives")

    # -- per-cycle exchange ----------------------------------------------------
    def _start(self) -> None:
        comm = self.comm
        for dst, lo, n in self.direct_sends:
            comm.send(dst, self.t_direct, self._send_elems(lo, n), values=n)
        for d, order in self.owe_order.items():
            if order:
                owe = self.owe[d]
                payload = b"".join(self._send_elems(owe[g], 1) for g in order)
                comm.send(comm.leader_for(d), self.t_gather, payload, values=len(order))

    def _wait(self) -> None:
        comm, w = self.comm, self.width
        for x in self.led:
            if not self.outgoing[x]:
                continue
            value_of: dict[int, bytes] = {}
            for q, owe in self.contributors[x]:
                data = self._expect(comm.recv(q, self.t_gather), len(owe) * w, q)
                for k, g in enumerate(owe):
                    value_of.setdefault(g, data[k * w:(k + 1) * w])
            order = self.outgoing[x]
            comm.send(comm.leader_on(x, comm.node), self.t_inter,
                      pack_indexed(order, [value_of[g] for g in order]), values=len(order))
        for x in self.led:
            if not self.incoming[x]:
                continue
            peer = comm.leader_on(x, comm.node)
            indices, values = unpack_indexed(comm.recv(peer, self.t_inter))
            if indices != self.incoming[x]:
                raise TopologyError(f"aggregated message from rank {peer} has unexpected indices")
            value_of = dict(zip(indices, values))
            for q, need in self.fanout[x]:
                comm.send(q, self.t_scatter, b"".join(value_of[g] for g in need), values=len(need))
        for src, lo, n in self.direct_recvs:
            self._put_elems(lo, self._expect(comm.recv(src, self.t_direct), n * w, src))
        for s, order in self.need_order.items():
            if not order:
                continue
            agg = comm.leader_for(s)
            data = self._expect(comm.recv(agg, self.t_scatter), len(order) * w, agg)
            slots = self.need[s]
            for k, g in enumerate(order):
                value = data[k * w:(k + 1) * w]
                for lo in slots[g]:
                    self._put_elems(lo, value)


def neighbor_alltoallv_init(sendbuf, sendcounts, sdispls, recvbuf, recvcounts, rdispls,
                            topology: NeighborTopology, width: int = 1,
                            info: Info | None = None) -> NeighborAlltoallvRequest:
    """Persistent neighbor alltoallv; no traffic until the first start."""
    return NeighborAlltoallvRequest(topology, sendbuf, sendcounts, sdispls, recvbuf,
                                    recvcounts, rdispls, width, info)


def neighbor_alltoallv_locality_init(sendbuf, sendcounts, sdispls, recvbuf, recvcounts, rdispls,
                                     send_indices, recv_indices, topology: NeighborTopology,
                                     width: int = 1, info: Info | None = None
                                     ) -> LocalityNeighborAlltoallvRequest:
    """Locality-aware persistent neighbor alltoallv.

    ``send_indices[k]`` / ``recv_indices[k]`` give the global value index of
    element ``k`` of the send / receive buffer.  Sends carrying the same
    global index across one node pair must carry identical values.  This is a
    collective call: aggregators negotiate index sets and validate them
    against the receivers' expectations before returning.
    """
    return LocalityNeighborAlltoallvRequest(topology, sendbuf, sendcounts, sdispls, recvbuf,
                                            recvcounts, rdispls, send_indices, recv_indices,
                                            width, info)


def start(request: PersistentRequest) -> None:
    request.start()


def wait(request: PersistentRequest) -> None:
    request.wait()
