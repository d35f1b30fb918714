"""Selectable ``alltoallv`` and ``allgather`` algorithms over point-to-point calls.

Each algorithm is a plain function registered under a variant name.  A call
without an explicit variant uses the registry default (pairwise for
alltoallv, bruck for allgather).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

from .comm import Communicator, coll_tag
from .errors import ArgumentError, RegistryError

ALLTOALLV = "alltoallv"
ALLGATHER = "allgather"

_TRIPLE = struct.Struct("<IIQ")  # origin rank, dest rank, byte length
_COUNT = struct.Struct("<I")
_EXPECT = struct.Struct("<Q")


def _bytes_view(buf) -> memoryview:
    mv = memoryview(buf)
    return mv.cast("B") if mv.format != "B" or mv.ndim != 1 else mv


def _check_regions(counts, displs, n, capacity, width, what):
    if len(counts) != n or len(displs) != n:
        raise ArgumentError(f"{what}counts/displs must have {n} entries")
    spans = []
    for q, (c, d) in enumerate(zip(counts, displs)):
        if c < 0 or d < 0:
            raise ArgumentError(f"negative {what} count or displacement for rank {q}")
        lo, hi = d * width, (d + c) * width
        if hi > capacity:
            raise ArgumentError(f"{what} region for rank {q} ends at byte {hi}, buffer holds {capacity}")
        if c:
            spans.append((lo, hi, q))
    spans.sort()
    for (_, hi, a), (lo, _, b) in zip(spans, spans[1:]):
        if lo < hi:
            raise ArgumentError(f"{what} regions for ranks {a} and {b} overlap")


@dataclass
class AlltoallvArgs:
    """Buffers and layout of one alltoallv call; counts and displs are in elements."""

    sendbuf: object
    sendcounts: Sequence[int]
    sdispls: Sequence[int]
    recvbuf: object
    recvcounts: Sequence[int]
    rdispls: Sequence[int]
    width: int = 1

    def validate(self, size: int) -> None:
        if self.width <= 0:
            raise ArgumentError(f"element width must be positive, got {self.width}")
        send = _bytes_view(self.sendbuf)
        recv = _bytes_view(self.recvbuf)
        if recv.readonly:
            raise ArgumentError("recvbuf must be writable")
        _check_regions(self.sendcounts, self.sdispls, size, send.nbytes, self.width, "send")
        _check_regions(self.recvcounts, self.rdispls, size, recv.nbytes, self.width, "recv")

    def send_block(self, q: int) -> bytes:
        w = self.width
        lo = self.sdispls[q] * w
        return bytes(_bytes_view(self.sendbuf)[lo:lo + self.sendcounts[q] * w])

    def recv_nbytes(self, q: int) -> int:
        return self.recvcounts[q] * self.width

    def place(self, q: int, data: bytes) -> None:
        if len(data) != self.recv_nbytes(q):
            raise ArgumentError(
                f"received {len(data)} bytes from rank {q}, expected {self.recv_nbytes(q)}")
        lo = self.rdispls[q] * self.width
        _bytes_view(self.recvbuf)[lo:lo + len(data)] = data


# -- block packing shared by the hierarchical variants -------------------------

def pack_blocks(blocks: Sequence[tuple[int, int, bytes]], prefix: bytes = b"") -> bytes:
    """``prefix | u32 n | n x (u32 origin, u32 dest, u64 len) | data...``"""
    parts = [prefix, _COUNT.pack(len(blocks))]
    parts += [_TRIPLE.pack(o, d, len(b)) for o, d, b in blocks]
    parts += [b for _, _, b in blocks]
    return b"".join(parts)


def unpack_blocks(buf: bytes, offset: int = 0) -> list[tuple[int, int, bytes]]:
    (n,) = _COUNT.unpack_from(buf, offset)
    pos = offset + _COUNT.size
    heads = []
    for _ in range(n):
        heads.append(_TRIPLE.unpack_from(buf, pos))
        pos += _TRIPLE.size
    out = []
    for o, d, length in heads:
        out.append((o, d, bytes(buf[pos:pos + length])))
        pos += length
    if pos != len(buf):
        raise ArgumentError(f"aggregated message has {len(buf) - pos} trailing bytes")
    return out


# -- alltoallv -----------------------------------------------------------------

def alltoallv_pairwise(args: AlltoallvArgs, comm: Communicator) -> None:
    tag = coll_tag(comm.next_epoch(), 0)
    p, r = comm.size, comm.rank
    for s in range(p):
        dst, src = (r + s) % p, (r - s) % p
        comm.send(dst, tag, args.send_block(dst), values=args.sendcounts[dst])
        args.place(src, comm.recv(src, tag))


def alltoallv_nonblocking_batch(args: AlltoallvArgs, comm: Communicator) -> None:
    tag = coll_tag(comm.next_epoch(), 0)
    p = comm.size
    for dst in range(p):
        comm.send(dst, tag, args.send_block(dst), values=args.sendcounts[dst])
    for src in range(p):
        args.place(src, comm.recv(src, tag))


def alltoallv_hierarchical(args: AlltoallvArgs, comm: Communicator) -> None:
    """Node-aware alltoallv: one aggregated message per ordered node pair.

    1. Each rank hands its blocks for remote node D, plus the number of bytes
       it expects back from D, to ``leader_for(D)`` on its own node.
    2. That leader sends everything bound for D in one message to the
       matching leader on D; node pairs without data exchange nothing.
    3. Receiving leaders fan the blocks out to their final local ranks.
    Same-node blocks go directly.
    """
    epoch = comm.next_epoch()
    t_direct, t_gather, t_inter, t_scatter = (coll_tag(epoch, k) for k in range(4))
    w = args.width
    me, my_node = comm.rank, comm.node

    expect_from = [0] * comm.n_nodes
    for q in range(comm.size):
        expect_from[comm.node_of[q]] += args.recv_nbytes(q)

    for q in comm.local_group:
        if args.sendcounts[q]:
            comm.send(q, t_direct, args.send_block(q), values=args.sendcounts[q])
    for d in range(comm.n_nodes):
        if d == my_node:
            continue
        blocks = [(me, q, args.send_block(q)) for q in comm.node_groups[d] if args.sendcounts[q]]
        comm.send(comm.leader_for(d), t_gather, pack_blocks(blocks, _EXPECT.pack(expect_from[d])),
                  values=sum(len(b) for _, _, b in blocks) // w)

    led = [d for d in range(comm.n_nodes) if d != my_node and comm.leader_for(d) == me]
    expecting: dict[int, dict[int, int]] = {}
    for d in led:
        outgoing = []
        expecting[d] = {}
        for q in comm.local_group:
            msg = comm.recv(q, t_gather)
            (expect,) = _EXPECT.unpack_from(msg)
            expecting[d][q] = expect
            outgoing += [b for b in unpack_blocks(msg, _EXPECT.size) if b[2]]
        if outgoing:
            outgoing.sort(key=lambda b: (b[1], b[0]))
            comm.send(comm.leader_on(d, my_node), t_inter, pack_blocks(outgoing),
                      values=sum(len(b) for _, _, b in outgoing) // w)
    for d in led:
        if not any(expecting[d].values()):
            continue
        per_rank: dict[int, list] = {}
        for block in unpack_blocks(comm.recv(comm.leader_on(d, my_node), t_inter)):
            per_rank.setdefault(block[1], []).append(block)
        for q in comm.local_group:
            if expecting[d][q]:
                blocks = per_rank.get(q, [])
                comm.send(q, t_scatter, pack_blocks(blocks),
                          values=sum(len(b) for _, _, b in blocks) // w)

    for q in comm.local_group:
        if args.recvcounts[q]:
            args.place(q, comm.recv(q, t_direct))
    for d in range(comm.n_nodes):
        if d == my_node or not expect_from[d]:
            continue
        got = set()
        for origin, dest, data in unpack_blocks(comm.recv(comm.leader_for(d), t_scatter)):
            if dest != me:
                raise ArgumentError(f"rank {me} got a block addressed to {dest}")
            args.place(origin, data)
            got.add(origin)
        missing = [q for q in comm.node_groups[d] if args.recvcounts[q] and q not in got]
        if missing:
            raise ArgumentError(f"rank {me} expected data from {missing} that never arrived")


# -- allgather -----------------------------------------------------------------

def _check_len(data: bytes, expected: int, src: int) -> bytes:
    if len(data) != expected:
        raise ArgumentError(f"block width mismatch: {len(data)} bytes from rank {src}, expected {expected}")
    return data


def _bruck(comm: Communicator, tag: int, members: Sequence[int], me: int, myblock: bytes,
           sizes: Sequence[int]) -> list[bytes]:
    """Bruck allgather among ``members``; returns blocks indexed by member position."""
    n = len(members)
    cur = [myblock]
    dist = 1
    while dist < n:
        k = min(dist, n - dist)
        comm.send(members[(me - dist) % n], tag, b"".join(cur[:k]))
        src = (me + dist) % n
        data = comm.recv(members[src], tag)
        want = [sizes[(src + i) % n] for i in range(k)]
        _check_len(data, sum(want), members[src])
        pos = 0
        for s in want:
            cur.append(data[pos:pos + s])
            pos += s
        dist *= 2
    out = [b""] * n
    for i, block in enumerate(cur):
        out[(me + i) % n] = block
    return out


def allgather_ring(block: bytes, comm: Communicator) -> bytes:
    tag = coll_tag(comm.next_epoch(), 0)
    p, r = comm.size, comm.rank
    out = [b""] * p
    out[r] = block
    for k in range(p - 1):
        comm.send((r + 1) % p, tag, out[(r - k) % p])
        src_block = (r - k - 1) % p
        out[src_block] = _check_len(comm.recv((r - 1) % p, tag), len(block), (r - 1) % p)
    return b"".join(out)


def allgather_bruck(block: bytes, comm: Communicator) -> bytes:
    tag = coll_tag(comm.next_epoch(), 0)
    p = comm.size
    return b"".join(_bruck(comm, tag, range(p), comm.rank, block, [len(block)] * p))


def allgather_hierarchical(block: bytes, comm: Communicator) -> bytes:
    """Gather to each node's first rank, bruck among those, broadcast back locally."""
    epoch = comm.next_epoch()
    t_gather, t_inter, t_bcast = (coll_tag(epoch, k) for k in range(3))
    w = len(block)
    leader = comm.local_group[0]
    if comm.rank != leader:
        comm.send(leader, t_gather, block)
        return _check_len(comm.recv(leader, t_bcast), w * comm.size, leader)
    parts = [block if q == leader else _check_len(comm.recv(q, t_gather), w, q)
             for q in comm.local_group]
    leaders = [g[0] for g in comm.node_groups]
    sizes = [w * len(g) for g in comm.node_groups]
    node_blocks = _bruck(comm, t_inter, leaders, comm.node, b"".join(parts), sizes)
    by_rank = [b""] * comm.size
    for node, nb in enumerate(node_blocks):
        for i, q in enumerate(comm.node_groups[node]):
            by_rank[q] = nb[i * w:(i + 1) * w]
    out = b"".join(by_rank)
    for q in comm.local_group[1:]:
        comm.send(q, t_bcast, out)
    return out


# -- registry ------------------------------------------------------------------

@dataclass(frozen=True)
class AlgorithmInfo:
    kind: str
    name: str
    is_default: bool


_BUILTIN = {
    ALLTOALLV: {
        "pairwise": alltoallv_pairwise,
        "nonblocking-batch": alltoallv_nonblocking_batch,
        "hierarchical": alltoallv_hierarchical,
    },
    ALLGATHER: {
        "ring": allgather_ring,
        "bruck": allgather_bruck,
        "hierarchical": allgather_hierarchical,
    },
}
_BUILTIN_DEFAULTS = {ALLTOALLV: "pairwise", ALLGATHER: "bruck"}


class AlgorithmRegistry:
    def __init__(self):
        self._impls: dict[str, dict[str, Callable]] = {k: dict(v) for k, v in _BUILTIN.items()}
        self._defaults = dict(_BUILTIN_DEFAULTS)

    def _kind(self, kind: str) -> dict[str, Callable]:
        try:
            return self._impls[kind]
        except KeyError:
            raise RegistryError(f"unknown collective kind {kind!r}") from None

    def register(self, kind: str, name: str, fn: Callable) -> None:
        self._kind(kind)[name] = fn

    def get(self, kind: str, name: str | None = None) -> Callable:
        impls = self._kind(kind)
        name = self._defaults[kind] if name is None else name
        try:
            return impls[name]
        except KeyError:
            raise RegistryError(f"unknown {kind} algorithm {name!r}; have {sorted(impls)}") from None

    def default(self, kind: str) -> str:
        self._kind(kind)
        return self._defaults[kind]

    def set_default(self, kind: str, name: str) -> None:
        self.get(kind, name)
        self._defaults[kind] = name

    def list(self, kind: str) -> list[AlgorithmInfo]:
        return [AlgorithmInfo(kind, n, n == self._defaults[kind]) for n in self._kind(kind)]

    def reset(self) -> None:
        self.__init__()


registry = AlgorithmRegistry()


def set_default_algorithm(kind: str, variant: str) -> None:
    registry.set_default(kind, variant)


def list_algorithms(kind: str) -> list[AlgorithmInfo]:
    return registry.list(kind)


def alltoallv(sendbuf, sendcounts, sdispls, recvbuf, recvcounts, rdispls, comm: Communicator,
              width: int = 1, algorithm: str | None = None):
    """Exchange variable-size blocks between all ranks; fills and returns ``recvbuf``.

    Arguments are validated before any message is sent.
    """
    fn = registry.get(ALLTOALLV, algorithm)
    args = AlltoallvArgs(sendbuf, list(sendcounts), list(sdispls), recvbuf,
                         list(recvcounts), list(rdispls), width)
    args.validate(comm.size)
    fn(args, comm)
    return recvbuf


def allgather(block, comm: Communicator, algorithm: str | None = None) -> bytes:
    """Concatenate every rank's equal-width block in rank order."""
    fn = registry.get(ALLGATHER, algorithm)
    return fn(bytes(block), comm)
