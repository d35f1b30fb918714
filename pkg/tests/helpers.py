"""Small SPMD drivers shared by the test modules."""

import math
import random

from mpix import Universe, alltoallv, comm_init, run_ranks
from mpix.harness.oracles import alltoallv_reference
from mpix.harness.patterns import alltoallv_instance


def random_node_map(rng, p):
    """Contiguous but uneven node sizes."""
    cuts = sorted(rng.sample(range(1, p), rng.randint(0, p - 1))) if p > 1 else []
    bounds = [0] + cuts + [p]
    return [n for n in range(len(bounds) - 1) for _ in range(bounds[n + 1] - bounds[n])]


def run_alltoallv(inst, node_map, algorithm, timeout=10.0):
    with Universe(inst.size, node_map, timeout=timeout) as u:
        def body(ep):
            comm = comm_init(ep)
            r = comm.rank
            recv = bytearray(sum(inst.recvcounts(r)) * inst.width)
            alltoallv(inst.sendbufs[r], inst.sendcounts(r), inst.sdispls(r), recv,
                      inst.recvcounts(r), inst.rdispls(r), comm, width=inst.width,
                      algorithm=algorithm)
            return bytes(recv)

        return run_ranks(u, body), u.snapshot_stats()


def ceil_log2(p):
    return math.ceil(math.log2(p)) if p > 1 else 0


__all__ = ["random_node_map", "run_alltoallv", "alltoallv_instance", "alltoallv_reference",
           "ceil_log2", "random"]


def run_neighbor(inst, node_map, variant, cycles=1, timeout=10.0, barrier_stats=False):
    """Drive one persistent request per rank for ``cycles`` start/wait rounds.

    Returns (per-rank list of per-cycle recv buffers, final stats, per-cycle stats).
    With ``barrier_stats`` the ranks synchronise after init and after each
    cycle so rank 0 can snapshot globally consistent counters.
    """
    import threading

    from mpix import dist_graph_create_adjacent
    from mpix.neighborhood import neighbor_alltoallv_init, neighbor_alltoallv_locality_init

    with Universe(inst.size, node_map, timeout=timeout) as u:
        barrier = threading.Barrier(inst.size)
        snaps = []

        def sync(ep):
            if barrier_stats:
                barrier.wait()
                if ep.rank == 0:
                    snaps.append(u.snapshot_stats())
                barrier.wait()

        def body(ep):
            comm = comm_init(ep)
            r, w = comm.rank, inst.width
            outs, ins = inst.out_edges(r), inst.in_edges(r)
            sc = [len(e.indices) for e in outs]
            rc = [len(e.indices) for e in ins]
            sd = [sum(sc[:i]) for i in range(len(sc))]
            rd = [sum(rc[:i]) for i in range(len(rc))]
            sendbuf, recvbuf = bytearray(sum(sc) * w), bytearray(sum(rc) * w)
            topo = dist_graph_create_adjacent(comm, [e.src for e in ins], None, [e.dst for e in outs], None)
            if variant == "locality":
                req = neighbor_alltoallv_locality_init(sendbuf, sc, sd, recvbuf, rc, rd,
                                                       inst.send_indices(r), inst.recv_indices(r), topo, w)
            else:
                req = neighbor_alltoallv_init(sendbuf, sc, sd, recvbuf, rc, rd, topo, w)
            sync(ep)
            got = []
            for cycle in range(cycles):
                sendbuf[:] = inst.sendbuf(r, cycle)
                req.start()
                req.wait()
                got.append(bytes(recvbuf))
                sync(ep)
            return got

        out = run_ranks(u, body)
        return out, u.snapshot_stats(), snaps
