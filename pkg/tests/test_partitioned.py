import itertools
import random
import threading
import time

import pytest

from mpix import Universe, comm_init, run_ranks
from mpix.errors import ArgumentError, DeadlockError, LifecycleError, MatchError, UsageError
from mpix.harness.oracles import interval_covered
from mpix.partitioned import (
    FRAGMENT_HEADER,
    ChannelState,
    PartitionState,
    ProgressEngine,
    cycle_after,
    engine_for,
    precv_init,
    psend_init,
)
from mpix.transport import TagKind, internal_tag

TAG = 3
WIDTH = 2


def channel_pair(u, s_parts, r_parts, elems=8, background=False):
    """Sender on rank 0, receiver on rank 1, both driven from the calling thread."""
    engine = engine_for(u, background)
    c0, c1 = comm_init(u.endpoints[0]), comm_init(u.endpoints[1])
    total = elems * WIDTH
    sbuf, rbuf = bytearray(total), bytearray(total)
    send = psend_init(sbuf, s_parts, elems // s_parts, WIDTH, 1, TAG, c0, engine)
    recv = precv_init(rbuf, r_parts, elems // r_parts, WIDTH, 0, TAG, c1, engine)
    return engine, send, recv, sbuf, rbuf


def test_geometry():
    with Universe(2) as u:
        c0 = comm_init(u.endpoints[0])
        ch = psend_init(bytearray(128), 4, 8, 4, 1, TAG, c0, engine_for(u, False))
        assert (ch.total_bytes, ch.part_bytes) == (128, 32)
        assert ch.state is ChannelState.INIT


def test_bad_geometry():
    with Universe(2) as u:
        c0 = comm_init(u.endpoints[0])
        with pytest.raises(ArgumentError):
            psend_init(bytearray(4), 0, 1, 1, 1, TAG, c0)
        with pytest.raises(ArgumentError):
            psend_init(bytearray(4), 2, 4, 1, 1, TAG, c0)  # buffer too small
        with pytest.raises(ArgumentError):
            psend_init(bytearray(4), 1, 1, 1, 5, TAG, c0)
        with pytest.raises(ArgumentError):
            psend_init(bytearray(4), 1, 1, 1, 1, 1 << 56, c0)


def test_start_resets_partitions_and_counts_cycles():
    with Universe(2) as u:
        _, send, recv, sbuf, _ = channel_pair(u, 4, 4)
        for cycle in (1, 2):
            send.start()
            recv.start()
            assert send.partitions == [PartitionState.NOT_READY] * 4
            assert send.cycle == cycle
            send.pready_range(0, 3)
            send.wait()
            recv.wait()
        assert send.state is recv.state is ChannelState.COMPLETED


@pytest.mark.parametrize("order", list(itertools.permutations(range(4))))
def test_four_to_two_coverage(order):
    with Universe(2) as u:
        engine, send, recv, sbuf, rbuf = channel_pair(u, 4, 2)
        sbuf[:] = bytes(range(16))
        send.start()
        recv.start()
        assert not recv.parrived(0) and not recv.parrived(1)
        done = set()
        for i in order:
            send.pready(i)
            engine.progress()
            done.add(i)
            assert recv.parrived(0) == ({0, 1} <= done)
            assert recv.parrived(1) == ({2, 3} <= done)
        send.wait()
        recv.wait()
        assert rbuf == sbuf


def test_four_to_one_needs_everything():
    with Universe(2) as u:
        engine, send, recv, sbuf, rbuf = channel_pair(u, 4, 1)
        send.start()
        recv.start()
        for i in range(3):
            send.pready(i)
            engine.progress()
            assert not recv.parrived(0)
        send.pready(3)
        assert recv.parrived(0)


def test_zero_length_partitions():
    with Universe(2) as u:
        engine, send, recv, _, _ = channel_pair(u, 2, 2, elems=0)
        send.start()
        recv.start()
        send.pready(1)
        engine.progress()
        send.pready(0)
        send.wait()
        recv.wait()
        assert send.fragments_sent == 2
        assert u.snapshot_stats().kind("part-data").messages == 2


def test_parrived_errors():
    with Universe(2) as u:
        _, send, recv, _, _ = channel_pair(u, 2, 2)
        with pytest.raises(LifecycleError):
            recv.parrived(0)
        recv.start()
        with pytest.raises(UsageError):
            recv.parrived(2)


def test_pready_errors():
    with Universe(2) as u:
        _, send, recv, _, _ = channel_pair(u, 2, 2)
        with pytest.raises(LifecycleError):
            send.pready(0)
        send.start()
        send.pready(0)
        with pytest.raises(UsageError):
            send.pready(0)
        with pytest.raises(UsageError):
            send.pready(2)
        with pytest.raises(UsageError):
            send.pready(-1)


def test_wait_and_start_lifecycle():
    with Universe(2) as u:
        _, send, recv, _, _ = channel_pair(u, 1, 1)
        with pytest.raises(LifecycleError):
            send.wait()
        with pytest.raises(LifecycleError):
            recv.wait()
        send.start()
        with pytest.raises(LifecycleError):
            send.start()


def test_deadlock_names_missing_partitions():
    with Universe(2) as u:
        _, send, recv, _, _ = channel_pair(u, 3, 3, elems=6)
        send.start()
        recv.start()
        send.pready(0)
        with pytest.raises(DeadlockError, match=r"\[1, 2\]"):
            send.wait(timeout=0.05)
        with pytest.raises(DeadlockError, match=r"\[1, 2\]"):
            recv.wait(timeout=0.05)


def test_size_mismatch_is_match_error():
    with Universe(2) as u:
        engine = engine_for(u, False)
        c0, c1 = comm_init(u.endpoints[0]), comm_init(u.endpoints[1])
        send = psend_init(bytearray(16), 2, 4, 2, 1, TAG, c0, engine)
        recv = precv_init(bytearray(32), 2, 8, 2, 0, TAG, c1, engine)
        send.start()
        recv.start()
        send.pready_range(0, 1)
        with pytest.raises(MatchError):
            send.wait(timeout=1)
        with pytest.raises(MatchError):
            recv.wait(timeout=1)


def test_bytes_captured_at_pready():
    with Universe(2) as u:
        engine, send, recv, sbuf, rbuf = channel_pair(u, 2, 2, elems=2)
        sbuf[:] = b"abcd"
        send.start()
        recv.start()
        send.pready(0)
        sbuf[0:2] = b"XY"  # too late for partition 0
        send.pready(1)
        send.wait()
        recv.wait()
        assert rbuf == b"abcd"


def test_future_cycle_fragments_do_not_count():
    with Universe(2) as u:
        engine, send, recv, sbuf, rbuf = channel_pair(u, 2, 2, elems=2)
        part_data = internal_tag(TagKind.PART_DATA, recv.id)

        def late(env):
            if env.tag != part_data:
                return False
            cycle, index, _, _ = FRAGMENT_HEADER.unpack_from(env.payload)
            return cycle == 1 and index == 1

        u.hold(late)
        sbuf[:] = b"a1b1"
        send.start()
        recv.start()
        send.pready_range(0, 1)
        send.wait()  # handed to the transport, one fragment held back
        u.hold(None)

        sbuf[:] = b"a2b2"
        send.start()
        send.pready_range(0, 1)
        send.wait()
        engine.progress()
        assert recv.parrived(0)
        assert not recv.parrived(1)  # cycle 2's partition 1 is here, cycle 1's is not
        assert u.release_held() == 1
        assert recv.parrived(1)
        recv.wait()
        assert rbuf == b"a1b1"

        recv.start()
        assert recv.parrived(0) and recv.parrived(1)
        recv.wait()
        assert rbuf == b"a2b2"


def test_stale_fragment_is_dropped():
    with Universe(2) as u:
        engine, send, recv, sbuf, rbuf = channel_pair(u, 1, 1, elems=2)
        for payload in (b"1111", b"2222"):
            sbuf[:] = payload
            send.start()
            recv.start()
            send.pready(0)
            send.wait()
            recv.wait()
        recv.start()
        stale = FRAGMENT_HEADER.pack(1, 0, 0, 4) + b"zzzz"
        u.endpoints[0].isend(1, internal_tag(TagKind.PART_DATA, recv.id), stale)
        engine.progress()
        assert not recv.parrived(0)
        assert recv.fault is None
        assert rbuf == b"2222"


def test_cycle_serial_compare_wraps():
    assert cycle_after(1, 0)
    assert cycle_after(0, (1 << 32) - 1)
    assert not cycle_after(5, 5)
    assert not cycle_after(4, 5)


def test_progress_without_channels():
    with Universe(1) as u:
        assert ProgressEngine(u, background=False).progress() == 0


def test_one_ready_partition_is_work():
    with Universe(2) as u:
        engine, send, recv, _, _ = channel_pair(u, 2, 2)
        send.start()
        send.pready(1)
        assert engine.progress() >= 1
        assert send.partitions[1] in (PartitionState.IN_FLIGHT, PartitionState.DELIVERED)


def test_background_thread_delivers_without_app_calls():
    with Universe(2) as u:
        _, send, recv, sbuf, rbuf = channel_pair(u, 4, 2, background=True)
        sbuf[:] = bytes(range(16))
        send.start()
        recv.start()
        send.pready_range(0, 3)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline and recv.covered != [8, 8]:
            time.sleep(0.001)  # no library calls while waiting
        assert recv.covered == [8, 8]
        assert rbuf == sbuf


@pytest.mark.parametrize("background", [True, False])
@pytest.mark.parametrize("seed", range(5))
def test_two_threads_many_cycles(background, seed):
    rng = random.Random(seed)
    payloads = [rng.randbytes(24) for _ in range(20)]
    orders = [rng.sample(range(4), 4) for _ in payloads]
    with Universe(2, timeout=10) as u:
        engine = engine_for(u, background)

        def body(ep):
            comm = comm_init(ep)
            buf = bytearray(24)
            if comm.rank == 0:
                ch = psend_init(buf, 4, 3, 2, 1, TAG, comm, engine)
            else:
                ch = precv_init(buf, 3, 4, 2, 0, TAG, comm, engine)
            got = []
            for data, order in zip(payloads, orders):
                if comm.rank == 0:
                    buf[:] = data
                ch.start()
                if comm.rank == 0:
                    for i in order:
                        ch.pready(i)
                else:
                    while not all(ch.parrived(i) for i in range(3)):
                        pass
                ch.wait()
                got.append(bytes(buf))
            return got

        _, got = run_ranks(u, body)
        assert got == payloads
        assert u.snapshot_stats().kind("part-handshake").messages == 2


def test_concurrent_pready_from_threads():
    with Universe(2) as u:
        _, send, recv, sbuf, rbuf = channel_pair(u, 8, 4, elems=16, background=True)
        sbuf[:] = bytes(range(32))
        send.start()
        recv.start()
        threads = [threading.Thread(target=send.pready, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        send.wait(timeout=5)
        recv.wait(timeout=5)
        assert rbuf == sbuf


def test_receiver_created_first_and_several_channels_match_fifo():
    with Universe(2) as u:
        engine = engine_for(u, False)
        c0, c1 = comm_init(u.endpoints[0]), comm_init(u.endpoints[1])
        rbufs = [bytearray(4), bytearray(4)]
        recvs = [precv_init(b, 1, 2, 2, 0, TAG, c1, engine) for b in rbufs]
        sends = [psend_init(bytes([i]) * 4, 1, 2, 2, 1, TAG, c0, engine) for i in range(2)]
        for ch in sends + recvs:
            ch.start()
        for s in sends:
            s.pready(0)
        for ch in sends + recvs:
            ch.wait()
        assert rbufs == [b"\x00" * 4, b"\x01" * 4]


def test_interval_oracle_matches_examples():
    assert interval_covered({0, 1}, 4, 2, 128, 0)
    assert not interval_covered({0, 2}, 4, 2, 128, 0)
    assert interval_covered({1}, 2, 4, 16, 2)
    assert not interval_covered({0, 1, 2}, 4, 1, 64, 0)
