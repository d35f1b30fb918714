"""Partitioned point-to-point channels driven by a progress engine.

A send channel and a receive channel are matched once, by a handshake that
exchanges partition geometry.  Each start begins a new cycle: the sender
marks partitions ready one by one and the progress engine ships every ready
partition as its own fragment; the receiver may use any of its own
partitions as soon as the bytes covering it have landed, even when the two
sides partition the buffer differently.
"""

from __future__ import annotations

import enum
import struct
import threading
import time
from collections import deque

from .comm import Communicator
from .errors import (
    AbortedError,
    ArgumentError,
    DeadlockError,
    LifecycleError,
    MatchError,
    UsageError,
)
from .transport import PAYLOAD_MASK, Envelope, TagKind, Universe, internal_tag

FRAGMENT_HEADER = struct.Struct("<IIQQ")  # cycle, sender partition, byte offset, length
_HANDSHAKE = struct.Struct("<IQII")  # channel id, total bytes, partitions, element width
CYCLE_MOD = 1 << 32
_POLL_S = 0.0005


def cycle_after(a: int, b: int) -> bool:
    """Serial-number comparison: is cycle ``a`` later than ``b`` (mod 2**32)."""
    return 0 < (a - b) % CYCLE_MOD < CYCLE_MOD // 2


class ChannelState(enum.Enum):
    INIT = "init"
    MATCHED = "matched"
    STARTED = "started"
    COMPLETED = "completed"


class PartitionState(enum.Enum):
    NOT_READY = "not_ready"
    READY = "ready"
    IN_FLIGHT = "in_flight"
    DELIVERED = "delivered"


class ProgressEngine:
    """Moves handshakes and fragments for every channel of one universe.

    With ``background=True`` a daemon thread runs :meth:`progress` whenever
    traffic is delivered or a partition becomes ready; channels also call it
    opportunistically from ``parrived`` and ``wait``.
    """

    def __init__(self, universe: Universe, background: bool = True):
        self.universe = universe
        self.background = background
        self._lock = threading.Lock()
        self._channels: list = []
        self._unmatched: dict[tuple[int, int, int], deque] = {}
        self._ids: dict[int, int] = {}
        self._kick = threading.Event()
        self._thread: threading.Thread | None = None
        self._stop = False
        universe.add_delivery_listener(lambda env: self._kick.set())
        universe.on_close(self.stop)

    def next_channel_id(self, rank: int) -> int:
        with self._lock:
            cid = self._ids.get(rank, 0)
            self._ids[rank] = cid + 1
            return cid

    def register(self, channel) -> None:
        with self._lock:
            self._channels.append(channel)
            self._unmatched.setdefault(channel.match_key, deque()).append(channel)
        if self.background and self._thread is None:
            self._thread = threading.Thread(target=self._run, name="mpix-progress", daemon=True)
            self._thread.start()
        self.kick()

    def kick(self) -> None:
        self._kick.set()

    def progress(self) -> int:
        """One pass over all channels; returns the number of work units done."""
        work = 0
        with self._lock:
            for (rank, peer, tag), waiting in self._unmatched.items():
                while waiting:
                    env = self.universe.endpoints[rank].try_recv(peer, tag)
                    if env is None:
                        break
                    waiting.popleft()._on_handshake(env)
                    work += 1
            channels = list(self._channels)
        for ch in channels:
            work += ch._progress()
        return work

    def _run(self) -> None:
        u = self.universe
        while not self._stop and u.aborted is None:
            self._kick.clear()
            if not self.progress():
                self._kick.wait(0.05)

    def stop(self) -> None:
        self._stop = True
        self._kick.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(1.0)


def engine_for(universe: Universe, background: bool | None = None) -> ProgressEngine:
    """Return the universe's progress engine, creating it on first use."""
    engine = universe.services.get("progress")
    if engine is None:
        engine = ProgressEngine(universe, True if background is None else background)
        universe.services["progress"] = engine
    elif background is not None and background != engine.background:
        raise ArgumentError("progress engine already created with a different background mode")
    return engine


class _Channel:
    hs_out: TagKind
    hs_in: TagKind

    def __init__(self, buffer, n_partitions: int, count: int, width: int, peer: int, tag: int,
                 comm: Communicator, engine: ProgressEngine | None):
        if n_partitions < 1:
            raise ArgumentError(f"need at least one partition, got {n_partitions}")
        if count < 0 or width <= 0:
            raise ArgumentError(f"bad partition geometry count={count} width={width}")
        if not 0 <= peer < comm.size:
            raise ArgumentError(f"peer rank {peer} outside 0..{comm.size - 1}")
        if not 0 <= tag <= PAYLOAD_MASK:
            raise ArgumentError(f"partitioned tag {tag} outside [0, 2**56)")
        self.view = memoryview(buffer).cast("B")
        self.part_bytes = count * width
        self.total_bytes = n_partitions * self.part_bytes
        if self.view.nbytes < self.total_bytes:
            raise ArgumentError(f"buffer holds {self.view.nbytes} bytes, channel needs {self.total_bytes}")
        self.comm = comm
        self.endpoint = comm.endpoint
        self.peer = peer
        self.tag = tag
        self.n_partitions = n_partitions
        self.count = count
        self.width = width
        self.engine = engine or engine_for(comm.universe)
        self.id = self.engine.next_channel_id(comm.rank)
        self.state = ChannelState.INIT
        self.matched = False
        self.cycle = 0
        self.fault: Exception | None = None
        self.peer_id: int | None = None
        self.peer_partitions: int | None = None
        self.peer_part_bytes: int | None = None
        self._lock = threading.RLock()
        self.match_key = (comm.rank, peer, internal_tag(self.hs_in, tag))
        hello = _HANDSHAKE.pack(self.id, self.total_bytes, n_partitions, width)
        comm.send(peer, internal_tag(self.hs_out, tag), hello)
        self.engine.register(self)

    def _on_handshake(self, env: Envelope) -> None:
        peer_id, total, parts, width = _HANDSHAKE.unpack(env.payload)
        with self._lock:
            self.peer_id = peer_id
            self.peer_partitions = parts
            self.peer_part_bytes = total // parts
            if total != self.total_bytes or width != self.width:
                self.fault = MatchError(
                    f"channel {self.comm.rank}<->{self.peer} tag {self.tag}: peer has {total} bytes "
                    f"of width {width}, this side {self.total_bytes} bytes of width {self.width}")
            self.matched = True
            if self.state is ChannelState.INIT:
                self.state = ChannelState.MATCHED

    def start(self) -> None:
        with self._lock:
            if self.state is ChannelState.STARTED:
                raise LifecycleError("start on a channel that is already started")
            self.cycle = (self.cycle + 1) % CYCLE_MOD
            self.state = ChannelState.STARTED
            self._reset()
        self.engine.kick()

    def _check_started(self, what: str) -> None:
        if self.state is not ChannelState.STARTED:
            raise LifecycleError(f"{what} on a channel in state {self.state.value}")

    def _block_until(self, done, describe, timeout: float | None) -> None:
        if timeout is None:
            timeout = self.comm.universe.timeout
        deadline = None if timeout is None else time.monotonic() + timeout
        universe = self.comm.universe
        while True:
            self.engine.progress()
            with self._lock:
                if self.fault is not None:
                    raise self.fault
                if done():
                    return
            if universe.aborted is not None:
                raise AbortedError("universe aborted") from universe.aborted
            if deadline is not None and time.monotonic() >= deadline:
                raise DeadlockError(describe())
            self.endpoint.wait_for_traffic(_POLL_S)

    def _reset(self) -> None:
        raise NotImplementedError

    def _progress(self) -> int:
        raise NotImplementedError


class PartitionedSendChannel(_Channel):
    hs_out = TagKind.PART_HS_SEND
    hs_in = TagKind.PART_HS_RECV

    def __init__(self, *args, **kwargs):
        self.partitions = []
        self._staged: dict[int, bytes] = {}
        super().__init__(*args, **kwargs)
        self.partitions = [PartitionState.NOT_READY] * self.n_partitions
        self.fragments_sent = 0

    def _reset(self) -> None:
        self.partitions = [PartitionState.NOT_READY] * self.n_partitions
        self._staged = {}

    def pready(self, partition: int) -> None:
        """Mark one partition complete; its bytes are captured now."""
        with self._lock:
            self._check_started("pready")
            if not 0 <= partition < self.n_partitions:
                raise UsageError(f"partition {partition} outside 0..{self.n_partitions - 1}")
            if self.partitions[partition] is not PartitionState.NOT_READY:
                raise UsageError(f"partition {partition} already marked ready this cycle")
            lo = partition * self.part_bytes
            self._staged[partition] = bytes(self.view[lo:lo + self.part_bytes])
            self.partitions[partition] = PartitionState.READY
        self.engine.kick()

    def pready_range(self, lo: int, hi: int) -> None:
        """``pready`` every partition in ``lo..hi`` inclusive."""
        for i in range(lo, hi + 1):
            self.pready(i)

    def _progress(self) -> int:
        with self._lock:
            if self.state is not ChannelState.STARTED or not self.matched or self.fault:
                return 0
            work = 0
            tag = internal_tag(TagKind.PART_DATA, self.peer_id)
            for i, st in enumerate(self.partitions):
                if st is not PartitionState.READY:
                    continue
                self.partitions[i] = PartitionState.IN_FLIGHT
                data = self._staged.pop(i)
                header = FRAGMENT_HEADER.pack(self.cycle, i, i * self.part_bytes, len(data))
                self.comm.send(self.peer, tag, header + data, values=len(data) // self.width)
                self.partitions[i] = PartitionState.DELIVERED
                self.fragments_sent += 1
                work += 1
            return work

    def wait(self, timeout: float | None = None) -> None:
        """Block until every partition of this cycle has been handed to the transport."""
        with self._lock:
            self._check_started("wait")

        def missing():
            not_ready = [i for i, s in enumerate(self.partitions) if s is PartitionState.NOT_READY]
            if not_ready:
                return f"send channel to rank {self.peer}: partitions {not_ready} never marked ready"
            return f"send channel to rank {self.peer}: never matched by a receiver"

        self._block_until(
            lambda: all(s is PartitionState.DELIVERED for s in self.partitions), missing, timeout)
        with self._lock:
            self.state = ChannelState.COMPLETED


class PartitionedRecvChannel(_Channel):
    hs_out = TagKind.PART_HS_RECV
    hs_in = TagKind.PART_HS_SEND

    def __init__(self, *args, **kwargs):
        self.covered: list[int] = []
        self._seen: set[int] = set()
        self._future: dict[int, list[tuple[int, int, bytes]]] = {}
        super().__init__(*args, **kwargs)
        self.covered = [0] * self.n_partitions
        self.data_tag = internal_tag(TagKind.PART_DATA, self.id)

    def _reset(self) -> None:
        self.covered = [0] * self.n_partitions
        self._seen = set()
        for frag in self._future.pop(self.cycle, []):
            self._integrate(*frag)

    def _integrate(self, index: int, offset: int, data: bytes) -> None:
        if (self.peer_part_bytes is None or not 0 <= index < self.peer_partitions
                or offset != index * self.peer_part_bytes or len(data) != self.peer_part_bytes
                or index in self._seen):
            self.fault = MatchError(f"malformed fragment (partition {index}, offset {offset}, "
                                    f"{len(data)} bytes) from rank {self.peer}")
            return
        self._seen.add(index)
        end = offset + len(data)
        self.view[offset:end] = data
        pb = self.part_bytes
        if pb == 0:
            return
        for rp in range(offset // pb, min(self.n_partitions, -(-end // pb))):
            lo, hi = max(offset, rp * pb), min(end, (rp + 1) * pb)
            if hi > lo:
                self.covered[rp] += hi - lo

    def _progress(self) -> int:
        with self._lock:
            if not self.matched or self.fault:
                return 0
            work = 0
            while True:
                env = self.endpoint.try_recv(self.peer, self.data_tag)
                if env is None:
                    return work
                work += 1
                cycle, index, offset, length = FRAGMENT_HEADER.unpack_from(env.payload)
                data = env.payload[FRAGMENT_HEADER.size:]
                if len(data) != length:
                    self.fault = MatchError(f"fragment length field {length} != payload {len(data)}")
                    return work
                if self.state is ChannelState.STARTED and cycle == self.cycle:
                    self._integrate(index, offset, data)
                elif cycle_after(cycle, self.cycle):
                    self._future.setdefault(cycle, []).append((index, offset, data))
                # anything else belongs to a finished cycle and is dropped

    def parrived(self, partition: int) -> bool:
        """Non-blocking: has receiver partition ``partition`` fully landed this cycle."""
        if not 0 <= partition < self.n_partitions:
            raise UsageError(f"partition {partition} outside 0..{self.n_partitions - 1}")
        with self._lock:
            if self.state is ChannelState.COMPLETED:
                return True
            self._check_started("parrived")
        self.engine.progress()
        with self._lock:
            if self.fault is not None:
                raise self.fault
            return self.covered[partition] == self.part_bytes

    def _all_delivered(self) -> bool:
        return self.peer_partitions is not None and len(self._seen) == self.peer_partitions

    def wait(self, timeout: float | None = None) -> None:
        """Block until every sender fragment of this cycle has been integrated."""
        with self._lock:
            self._check_started("wait")

        def missing():
            if self.peer_partitions is None:
                return f"receive channel from rank {self.peer}: never matched by a sender"
            absent = [i for i in range(self.n_partitions) if self.covered[i] != self.part_bytes]
            return (f"receive channel from rank {self.peer}: partitions {absent} not arrived, "
                    f"sender fragments {sorted(set(range(self.peer_partitions)) - self._seen)} missing")

        self._block_until(self._all_delivered, missing, timeout)
        with self._lock:
            self.state = ChannelState.COMPLETED


def psend_init(buffer, n_partitions: int, count: int, width: int, dst: int, tag: int,
               comm: Communicator, engine: ProgressEngine | None = None) -> PartitionedSendChannel:
    """Create a send channel of ``n_partitions`` equal partitions of ``count`` elements.

    The handshake message to ``dst`` goes out immediately; the reply is
    consumed lazily by the progress engine.
    """
    return PartitionedSendChannel(buffer, n_partitions, count, width, dst, tag, comm, engine)


def precv_init(buffer, n_partitions: int, count: int, width: int, src: int, tag: int,
               comm: Communicator, engine: ProgressEngine | None = None) -> PartitionedRecvChannel:
    return PartitionedRecvChannel(buffer, n_partitions, count, width, src, tag, comm, engine)


def start(channel: _Channel) -> None:
    channel.start()


def pready(channel: PartitionedSendChannel, partition: int) -> None:
    channel.pready(partition)


def pready_range(channel: PartitionedSendChannel, lo: int, hi: int) -> None:
    channel.pready_range(lo, hi)


def parrived(channel: PartitionedRecvChannel, partition: int) -> bool:
    return channel.parrived(partition)


def wait(channel: _Channel, timeout: float | None = None) -> None:
    channel.wait(timeout)


def progress(engine: ProgressEngine) -> int:
    return engine.progress()
