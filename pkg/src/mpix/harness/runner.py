"""Execute a configured benchmark and verify every trial against the oracles."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

from ..collectives import allgather, alltoallv
from ..comm import comm_init, dist_graph_create_adjacent
from ..errors import DeadlockError, MPIXError
from ..launch import run_ranks
from ..neighborhood import neighbor_alltoallv_init, neighbor_alltoallv_locality_init
from ..partitioned import engine_for, precv_init, psend_init
from ..transport import TransportStats, Universe
from . import oracles
from .config import RunConfig
from .patterns import generate_pattern

log = logging.getLogger(__name__)

CSV_COLUMNS = ("pattern", "algorithm", "ranks", "nodes", "trial", "total_msgs", "intra_msgs",
               "inter_msgs", "total_bytes", "inter_bytes", "inter_values", "verified", "wall_ms")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_WATCHDOG = 0, 1, 2, 3

USER_TAG = 7


@dataclass
class RunRow:
    pattern: str
    algorithm: str
    ranks: int
    nodes: int
    trial: int
    stats: TransportStats
    verified: bool
    wall_ms: float
    error: str | None = None

    def as_csv(self) -> dict:
        s = self.stats
        return {
            "pattern": self.pattern, "algorithm": self.algorithm, "ranks": self.ranks,
            "nodes": self.nodes, "trial": self.trial, "total_msgs": s.total_msgs,
            "intra_msgs": s.intra_msgs, "inter_msgs": s.inter_msgs, "total_bytes": s.total_bytes,
            "inter_bytes": s.inter_bytes, "inter_values": s.inter_values,
            "verified": "true" if self.verified else "false", "wall_ms": f"{self.wall_ms:.3f}",
        }


@dataclass
class RunReport:
    rows: list[RunRow] = field(default_factory=list)
    watchdog: bool = False

    @property
    def verified(self) -> bool:
        return all(r.verified for r in self.rows)

    @property
    def exit_code(self) -> int:
        if self.watchdog:
            return EXIT_WATCHDOG
        return EXIT_OK if self.verified else EXIT_VERIFY

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row.as_csv())
        return buf.getvalue()


# -- per-rank bodies: each returns what the oracle compares -------------------

def _alltoallv_rank(ep, inst, algorithm):
    comm = comm_init(ep)
    r = comm.rank
    recv = bytearray(sum(inst.recvcounts(r)) * inst.width)
    alltoallv(inst.sendbufs[r], inst.sendcounts(r), inst.sdispls(r), recv,
              inst.recvcounts(r), inst.rdispls(r), comm, width=inst.width, algorithm=algorithm)
    return bytes(recv)


def _allgather_rank(ep, inst, algorithm):
    comm = comm_init(ep)
    return allgather(inst.blocks[comm.rank], comm, algorithm=algorithm)


def _neighbor_rank(ep, inst, algorithm, cycles):
    comm = comm_init(ep)
    r, w = comm.rank, inst.width
    outs, ins = inst.out_edges(r), inst.in_edges(r)
    sc = [len(e.indices) for e in outs]
    rc = [len(e.indices) for e in ins]
    sd = [sum(sc[:i]) for i in range(len(sc))]
    rd = [sum(rc[:i]) for i in range(len(rc))]
    sendbuf = bytearray(sum(sc) * w)
    recvbuf = bytearray(sum(rc) * w)
    topo = dist_graph_create_adjacent(comm, [e.src for e in ins], None, [e.dst for e in outs], None)
    if algorithm == "neighbor-locality":
        req = neighbor_alltoallv_locality_init(sendbuf, sc, sd, recvbuf, rc, rd, inst.send_indices(r),
                                               inst.recv_indices(r), topo, width=w)
    else:
        req = neighbor_alltoallv_init(sendbuf, sc, sd, recvbuf, rc, rd, topo, width=w)
    results = []
    for cycle in range(cycles):
        sendbuf[:] = inst.sendbuf(r, cycle)
        req.start()
        req.wait()
        results.append(bytes(recvbuf))
    return results


def _partitioned_rank(ep, inst, algorithm, background):
    comm = comm_init(ep)
    r = comm.rank
    dst, src = inst.partner[r], inst.source_of(r)
    sendbuf = bytearray(inst.nbytes)
    recvbuf = bytearray(inst.nbytes)
    results = []
    if algorithm == "p2p":
        for payloads in inst.payloads:
            sendbuf[:] = payloads[r]
            comm.send(dst, USER_TAG, sendbuf, values=len(sendbuf) // inst.width)
            results.append(comm.recv(src, USER_TAG))
        return results
    engine = engine_for(comm.universe, background)
    sch = psend_init(sendbuf, inst.send_partitions, inst.count, inst.width, dst, USER_TAG, comm, engine)
    rch = precv_init(recvbuf, inst.recv_partitions, inst.recv_count, inst.width, src, USER_TAG, comm, engine)
    for payloads, orders in zip(inst.payloads, inst.orders):
        sendbuf[:] = payloads[r]
        sch.start()
        rch.start()
        for i in orders[r]:
            sch.pready(i)
        sch.wait()
        rch.wait()
        results.append(bytes(recvbuf))
    return results


def _expected(cfg: RunConfig, inst):
    if cfg.pattern.startswith("alltoallv"):
        return oracles.alltoallv_reference(inst)
    if cfg.pattern == "allgather":
        full = oracles.allgather_reference(inst.blocks)
        return [full] * cfg.ranks
    if cfg.pattern in ("stencil5", "random-sparse-graph"):
        per_cycle = [oracles.neighbor_reference(inst, c) for c in range(cfg.cycles)]
        return [[per_cycle[c][r] for c in range(cfg.cycles)] for r in range(cfg.ranks)]
    return [[inst.payloads[c][inst.source_of(r)] for c in range(cfg.cycles)] for r in range(cfg.ranks)]


def _body(cfg: RunConfig, inst, algorithm):
    if cfg.pattern.startswith("alltoallv"):
        return _alltoallv_rank, (inst, algorithm)
    if cfg.pattern == "allgather":
        return _allgather_rank, (inst, algorithm)
    if cfg.pattern in ("stencil5", "random-sparse-graph"):
        return _neighbor_rank, (inst, algorithm, cfg.cycles)
    return _partitioned_rank, (inst, algorithm, cfg.background)


def run_trial(cfg: RunConfig, algorithm: str, trial: int, inst=None, expected=None) -> RunRow:
    """One fresh universe, one algorithm, one verification."""
    inst = generate_pattern(cfg) if inst is None else inst
    fn, args = _body(cfg, inst, algorithm)
    error = None
    t0 = time.perf_counter()
    with Universe(cfg.ranks, cfg.nodes, timeout=cfg.timeout_s) as universe:
        try:
            outputs = run_ranks(universe, fn, *args)
        except MPIXError as exc:
            outputs = None
            stalled = sorted(getattr(exc, "rank_errors", {}))
            error = f"{type(exc).__name__}: {exc} (ranks {stalled})"
            log.error("%s/%s trial %d failed: %s", cfg.pattern, algorithm, trial, error)
            if isinstance(exc, DeadlockError):
                error = "watchdog: " + error
        wall_ms = (time.perf_counter() - t0) * 1000.0
        stats = universe.snapshot_stats()
    if outputs is None:
        verified = False
    elif not cfg.verify:
        verified = True
    else:
        expected = _expected(cfg, inst) if expected is None else expected
        verified = outputs == expected
        if not verified:
            bad = [r for r in range(cfg.ranks) if outputs[r] != expected[r]]
            log.error("%s/%s trial %d: ranks %s disagree with the oracle",
                      cfg.pattern, algorithm, trial, bad)
    return RunRow(cfg.pattern, algorithm, cfg.ranks, cfg.n_nodes, trial, stats, verified, wall_ms, error)


def run(cfg: RunConfig) -> RunReport:
    """Run every (algorithm, trial) in sequence; instances depend only on the seed."""
    inst = generate_pattern(cfg)
    expected = _expected(cfg, inst) if cfg.verify else None
    report = RunReport()
    for algorithm in cfg.algorithms:
        for trial in range(cfg.trials):
            row = run_trial(cfg, algorithm, trial, inst, expected)
            report.rows.append(row)
            if row.error and row.error.startswith("watchdog"):
                report.watchdog = True
    return report
