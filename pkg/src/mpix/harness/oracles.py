"""Reference results computed by direct copying and enumeration.

Nothing here imports the library's algorithm modules: these functions are
the independent side of every verification.
"""

from __future__ import annotations

from .patterns import AlltoallvInstance, NeighborInstance


def alltoallv_reference(inst: AlltoallvInstance) -> list[bytes]:
    """Rank q's receive buffer: every rank's block for q, in source order."""
    w, p = inst.width, inst.size
    out = []
    for q in range(p):
        buf = bytearray()
        for src in range(p):
            lo = sum(inst.counts[src][:q]) * w
            buf += inst.sendbufs[src][lo:lo + inst.counts[src][q] * w]
        out.append(bytes(buf))
    return out


def allgather_reference(blocks: list[bytes]) -> bytes:
    return b"".join(blocks)


def neighbor_reference(inst: NeighborInstance, cycle: int) -> list[bytes]:
    """Receive buffers after one exchange, copied edge by edge from the senders' buffers."""
    w = inst.width
    sendbufs = [inst.sendbuf(r, cycle) for r in range(inst.size)]
    offsets = {}
    for r in range(inst.size):
        pos = 0
        for e in inst.out_edges(r):
            offsets[id(e)] = pos
            pos += len(e.indices) * w
    out = []
    for q in range(inst.size):
        buf = bytearray()
        for e in inst.in_edges(q):
            lo = offsets[id(e)]
            buf += sendbufs[e.src][lo:lo + len(e.indices) * w]
        out.append(bytes(buf))
    return out


def standard_inter_values(inst: NeighborInstance, node_of) -> int:
    return sum(len(e.indices) for e in inst.edges if node_of[e.src] != node_of[e.dst])


def unique_inter_triples(inst: NeighborInstance, node_of) -> int:
    """|{(global index, src node, dst node)}| over node-crossing edges."""
    return len({(g, node_of[e.src], node_of[e.dst])
                for e in inst.edges if node_of[e.src] != node_of[e.dst]
                for g in e.indices})


def degrees(inst: NeighborInstance) -> list[int]:
    """Distinct out-neighbors per rank."""
    return [len({e.dst for e in inst.out_edges(r)}) for r in range(inst.size)]


def interval_covered(delivered, send_parts: int, recv_parts: int, nbytes: int, index: int) -> bool:
    """Is receiver partition ``index`` covered, checked one byte at a time."""
    sp, rp = nbytes // send_parts, nbytes // recv_parts
    owners = set()
    for b in range(index * rp, (index + 1) * rp):
        owners.add(b // sp)
    return all(o in delivered for o in owners)
