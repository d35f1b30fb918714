"""In-process message fabric standing in for the system MPI.

Every rank owns one :class:`Endpoint`; all endpoints of a :class:`Universe`
share a fabric that delivers :class:`Envelope` objects eagerly and records
message, byte and value counts per link.  Ordering is FIFO per
``(src, dst, tag)`` and nothing stronger.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .errors import AbortedError, AddressingError, ConfigurationError, DeadlockError

ANY_SOURCE = -1
ANY_TAG = -1

TAG_BITS = 64
RESERVED_BIT = 1 << (TAG_BITS - 1)
_KIND_SHIFT = 56
_KIND_MASK = 0x7F
PAYLOAD_MASK = (1 << _KIND_SHIFT) - 1

DEFAULT_TIMEOUT_S = 30.0


class TagKind(enum.IntEnum):
    """Classes of library-internal traffic, carried in reserved tags."""

    USER = 0
    COLL = 1
    NBR_SETUP = 2
    NBR_DATA = 3
    PART_HS_SEND = 4
    PART_HS_RECV = 5
    PART_DATA = 6


KIND_LABELS = {
    TagKind.USER: "user",
    TagKind.COLL: "coll",
    TagKind.NBR_SETUP: "nbr-setup",
    TagKind.NBR_DATA: "nbr-data",
    TagKind.PART_HS_SEND: "part-handshake",
    TagKind.PART_HS_RECV: "part-handshake",
    TagKind.PART_DATA: "part-data",
}


def internal_tag(kind: TagKind, payload: int) -> int:
    """Build a reserved tag; ``payload`` is truncated to the low 56 bits."""
    return RESERVED_BIT | (int(kind) << _KIND_SHIFT) | (payload & PAYLOAD_MASK)


def tag_kind(tag: int) -> TagKind:
    if tag & RESERVED_BIT:
        return TagKind((tag >> _KIND_SHIFT) & _KIND_MASK)
    return TagKind.USER


def is_reserved(tag: int) -> bool:
    return bool(tag & RESERVED_BIT)


def check_user_tag(tag: int) -> int:
    if not 0 <= tag < RESERVED_BIT:
        raise AddressingError(f"user tag {tag} outside [0, 2**{TAG_BITS - 1})")
    return tag


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    tag: int
    payload: bytes = b""


@dataclass(frozen=True)
class LinkCounts:
    messages: int = 0
    bytes: int = 0
    values: int = 0


@dataclass(frozen=True)
class TransportStats:
    """Immutable snapshot of the fabric counters.

    ``values`` counts application elements as declared by the sender of each
    message (control traffic declares zero).
    """

    links: Mapping[tuple[int, int], LinkCounts]
    by_kind: Mapping[str, LinkCounts]
    intra_msgs: int = 0
    intra_bytes: int = 0
    intra_values: int = 0
    inter_msgs: int = 0
    inter_bytes: int = 0
    inter_values: int = 0
    received: int = 0

    @property
    def total_msgs(self) -> int:
        return self.intra_msgs + self.inter_msgs

    @property
    def total_bytes(self) -> int:
        return self.intra_bytes + self.inter_bytes

    @property
    def total_values(self) -> int:
        return self.intra_values + self.inter_values

    def kind(self, label: str) -> LinkCounts:
        return self.by_kind.get(label, LinkCounts())

    @property
    def reserved_msgs(self) -> int:
        return sum(c.messages for k, c in self.by_kind.items() if k != "user")

    def minus(self, other: "TransportStats") -> "TransportStats":
        """Counter difference ``self - other`` (``other`` taken earlier)."""

        def sub(a: LinkCounts, b: LinkCounts) -> LinkCounts:
            return LinkCounts(a.messages - b.messages, a.bytes - b.bytes, a.values - b.values)

        links = {k: sub(v, other.links.get(k, LinkCounts())) for k, v in self.links.items()}
        kinds = {k: sub(v, other.by_kind.get(k, LinkCounts())) for k, v in self.by_kind.items()}
        return TransportStats(
            links={k: v for k, v in links.items() if v.messages},
            by_kind={k: v for k, v in kinds.items() if v.messages},
            intra_msgs=self.intra_msgs - other.intra_msgs,
            intra_bytes=self.intra_bytes - other.intra_bytes,
            intra_values=self.intra_values - other.intra_values,
            inter_msgs=self.inter_msgs - other.inter_msgs,
            inter_bytes=self.inter_bytes - other.inter_bytes,
            inter_values=self.inter_values - other.inter_values,
            received=self.received - other.received,
        )


class _Counters:
    def __init__(self, node_of: Sequence[int]):
        self.node_of = node_of
        self.lock = threading.Lock()
        self.links: dict[tuple[int, int], list[int]] = {}
        self.kinds: dict[str, list[int]] = {}
        # [msgs, bytes, values] for intra, inter
        self.intra = [0, 0, 0]
        self.inter = [0, 0, 0]
        self.received = 0

    def record(self, src: int, dst: int, tag: int, nbytes: int, values: int) -> None:
        label = KIND_LABELS[tag_kind(tag)]
        bucket = self.intra if self.node_of[src] == self.node_of[dst] else self.inter
        with self.lock:
            link = self.links.setdefault((src, dst), [0, 0, 0])
            kind = self.kinds.setdefault(label, [0, 0, 0])
            for c in (link, kind, bucket):
                c[0] += 1
                c[1] += nbytes
                c[2] += values

    def snapshot(self) -> TransportStats:
        with self.lock:
            return TransportStats(
                links={k: LinkCounts(*v) for k, v in self.links.items()},
                by_kind={k: LinkCounts(*v) for k, v in self.kinds.items()},
                intra_msgs=self.intra[0],
                intra_bytes=self.intra[1],
                intra_values=self.intra[2],
                inter_msgs=self.inter[0],
                inter_bytes=self.inter[1],
                inter_values=self.inter[2],
                received=self.received,
            )


class SendHandle:
    """Completion handle for an eager send; complete on return."""

    __slots__ = ("envelope",)

    def __init__(self, envelope: Envelope):
        self.envelope = envelope

    @property
    def done(self) -> bool:
        return True

    def wait(self) -> Envelope:
        return self.envelope


def contiguous_node_map(n_ranks: int, ppn: int) -> list[int]:
    """Ranks ``[k*ppn, (k+1)*ppn)`` live on node ``k``."""
    if ppn <= 0:
        raise ConfigurationError(f"ppn must be positive, got {ppn}")
    if n_ranks % ppn:
        raise ConfigurationError(f"ranks={n_ranks} not divisible by ppn={ppn}")
    return [r // ppn for r in range(n_ranks)]


def validate_node_map(node_map, n_ranks: int) -> list[int]:
    """Normalize a rank->node table given as a sequence or a mapping."""
    if n_ranks <= 0:
        raise ConfigurationError(f"need at least one rank, got {n_ranks}")
    if isinstance(node_map, Mapping):
        if sorted(node_map) != list(range(n_ranks)):
            raise ConfigurationError(f"node map must cover exactly ranks 0..{n_ranks - 1}")
        table = [node_map[r] for r in range(n_ranks)]
    else:
        table = list(node_map)
        if len(table) != n_ranks:
            raise ConfigurationError(f"node map has {len(table)} entries for {n_ranks} ranks")
    if any(not isinstance(n, int) or n < 0 for n in table):
        raise ConfigurationError("node ids must be non-negative integers")
    if set(table) != set(range(max(table) + 1)):
        raise ConfigurationError(f"node ids must be contiguous from 0, got {sorted(set(table))}")
    return table


class Endpoint:
    """One rank's attachment to the fabric.

    The inbox is split into per-``(src, tag)`` FIFO queues; a global arrival
    sequence number lets wildcard receives pick the earliest match.
    """

    def __init__(self, universe: "Universe", rank: int):
        self.universe = universe
        self.rank = rank
        self._cond = threading.Condition()
        self._queues: dict[tuple[int, int], deque] = {}
        self._seq = itertools.count()

    def __repr__(self) -> str:
        return f"Endpoint(rank={self.rank})"

    # delivery side, called from the sender's context
    def _deliver(self, env: Envelope) -> None:
        with self._cond:
            self._queues.setdefault((env.src, env.tag), deque()).append((next(self._seq), env))
            self._cond.notify_all()

    def send(self, envelope: Envelope, values: int = 0) -> SendHandle:
        if envelope.src != self.rank:
            raise AddressingError(f"endpoint {self.rank} cannot send as rank {envelope.src}")
        return self.universe._route(envelope, values)

    def isend(self, dst: int, tag: int, payload=b"", values: int = 0) -> SendHandle:
        return self.send(Envelope(self.rank, dst, tag, bytes(payload)), values)

    def _pop(self, src: int, tag: int) -> Envelope | None:
        if src != ANY_SOURCE and tag != ANY_TAG:
            q = self._queues.get((src, tag))
            if not q:
                return None
            return q.popleft()[1]
        best = None
        for (s, t), q in self._queues.items():
            if not q or (src != ANY_SOURCE and s != src) or (tag != ANY_TAG and t != tag):
                continue
            if best is None or q[0][0] < best[0][0]:
                best = q
        return best.popleft()[1] if best is not None else None

    def try_recv(self, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> Envelope | None:
        with self._cond:
            env = self._pop(src, tag)
        if env is not None:
            self.universe._count_received()
        return env

    def probe(self, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> bool:
        with self._cond:
            if src != ANY_SOURCE and tag != ANY_TAG:
                return bool(self._queues.get((src, tag)))
            return any(
                q and (src in (ANY_SOURCE, s)) and (tag in (ANY_TAG, t))
                for (s, t), q in self._queues.items()
            )

    def recv(self, src: int = ANY_SOURCE, tag: int = ANY_TAG, timeout: float | None = None) -> Envelope:
        """Blocking receive of the earliest envelope matching ``(src, tag)``.

        Raises :class:`DeadlockError` once ``timeout`` (default: the universe
        watchdog) expires.
        """
        if timeout is None:
            timeout = self.universe.timeout
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                env = self._pop(src, tag)
                if env is not None:
                    break
                if self.universe.aborted is not None:
                    raise AbortedError(f"rank {self.rank}: universe aborted") from self.universe.aborted
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise DeadlockError(
                        f"rank {self.rank}: no message matching src={src} tag={tag:#x} "
                        f"within {timeout}s"
                    )
                self._cond.wait(remaining)
        self.universe._count_received()
        return env

    def wait_for_traffic(self, timeout: float) -> None:
        """Sleep until something is delivered to this endpoint or ``timeout`` passes."""
        with self._cond:
            self._cond.wait(timeout)

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues.values())


class Universe:
    """A set of endpoints sharing one instrumented in-process fabric."""

    def __init__(self, n_ranks: int, node_map=None, *, ppn: int | None = None,
                 timeout: float | None = DEFAULT_TIMEOUT_S):
        if node_map is None:
            node_map = contiguous_node_map(n_ranks, ppn if ppn is not None else n_ranks)
        self.node_map = tuple(validate_node_map(node_map, n_ranks))
        self.n_ranks = n_ranks
        self.n_nodes = max(self.node_map) + 1
        self.timeout = timeout
        self.endpoints = tuple(Endpoint(self, r) for r in range(n_ranks))
        self.aborted: BaseException | None = None
        self._counters = _Counters(self.node_map)
        self._hold: Callable[[Envelope], bool] | None = None
        self._held: list[Envelope] = []
        self._hold_lock = threading.Lock()
        self._close_hooks: list[Callable[[], None]] = []
        self._listeners: list[Callable[[Envelope], None]] = []
        self.services: dict[str, object] = {}
        self.closed = False

    def __repr__(self) -> str:
        return f"Universe(n_ranks={self.n_ranks}, n_nodes={self.n_nodes})"

    def __enter__(self) -> "Universe":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def same_node(self, a: int, b: int) -> bool:
        return self.node_map[a] == self.node_map[b]

    def _route(self, env: Envelope, values: int) -> SendHandle:
        if not 0 <= env.dst < self.n_ranks:
            raise AddressingError(f"destination rank {env.dst} outside 0..{self.n_ranks - 1}")
        if env.tag < 0:
            raise AddressingError(f"negative tag {env.tag}")
        self._counters.record(env.src, env.dst, env.tag, len(env.payload), values)
        if self._hold is not None:
            with self._hold_lock:
                if self._hold is not None and self._hold(env):
                    self._held.append(env)
                    return SendHandle(env)
        self.endpoints[env.dst]._deliver(env)
        for listener in self._listeners:
            listener(env)
        return SendHandle(env)

    def add_delivery_listener(self, fn: Callable[[Envelope], None]) -> None:
        """Call ``fn(envelope)`` after every delivery, in the sender's context."""
        self._listeners.append(fn)

    def _count_received(self) -> None:
        with self._counters.lock:
            self._counters.received += 1

    def snapshot_stats(self) -> TransportStats:
        return self._counters.snapshot()

    def in_flight(self) -> int:
        return sum(ep.pending() for ep in self.endpoints) + len(self._held)

    # fault injection: deliberately breaks non-overtaking for held envelopes
    def hold(self, predicate: Callable[[Envelope], bool] | None) -> None:
        """Divert envelopes matching ``predicate`` into a side queue (None stops diverting)."""
        with self._hold_lock:
            self._hold = predicate

    def release_held(self) -> int:
        with self._hold_lock:
            held, self._held = self._held, []
        for env in held:
            self.endpoints[env.dst]._deliver(env)
            for listener in self._listeners:
                listener(env)
        return len(held)

    def abort(self, exc: BaseException) -> None:
        """Wake every blocked receive with :class:`AbortedError`."""
        if self.aborted is None:
            self.aborted = exc
        for ep in self.endpoints:
            with ep._cond:
                ep._cond.notify_all()

    def on_close(self, hook: Callable[[], None]) -> None:
        self._close_hooks.append(hook)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for hook in reversed(self._close_hooks):
            hook()


def create_universe(n_ranks: int, node_map=None, *, ppn: int | None = None,
                    timeout: float | None = DEFAULT_TIMEOUT_S) -> tuple[Universe, tuple[Endpoint, ...]]:
    universe = Universe(n_ranks, node_map, ppn=ppn, timeout=timeout)
    return universe, universe.endpoints


def send(endpoint: Endpoint, envelope: Envelope, values: int = 0) -> SendHandle:
    return endpoint.send(envelope, values)


def recv(endpoint: Endpoint, src: int = ANY_SOURCE, tag: int = ANY_TAG,
         timeout: float | None = None) -> Envelope:
    return endpoint.recv(src, tag, timeout)


def try_recv(endpoint: Endpoint, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> Envelope | None:
    return endpoint.try_recv(src, tag)


def snapshot_stats(universe: Universe) -> TransportStats:
    return universe.snapshot_stats()


def ranks_on(node_map: Iterable[int], node: int) -> list[int]:
    return [r for r, n in enumerate(node_map) if n == node]
