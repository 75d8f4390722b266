import random
import time

import pytest

from novakv import logc
from novakv.cluster import Router
from novakv.common import OP_DELETE, OP_PUT
from novakv.fabric import Fabric
from novakv.logc import LogContext, UnrecoverableMemtables, decode_records, encode_record
from novakv.stoc import RamDisk, StoCClient, StorageComponent

TAU = 64 * 1024


def make_cluster(n_stocs=3, region_size=TAU):
    fabric = Fabric()
    router = Router(fabric)
    stocs = {}
    for i in range(n_stocs):
        sid = f"stoc{i}"
        stoc = StorageComponent(sid, fabric, RamDisk(), region_size=region_size)
        stoc._router = router
        router.register(sid, stoc)
        stocs[sid] = stoc
    client = StoCClient(fabric, "ltc0", router=router)
    return fabric, router, stocs, client


def test_record_round_trip_bit_exact():
    rng = random.Random(1)
    for _ in range(200):
        seq = rng.randrange(1 << 60)
        op = rng.choice([OP_PUT, OP_DELETE])
        key = rng.randrange(1 << 50)
        value = rng.randbytes(rng.randrange(0, 64)) if op == OP_PUT else None
        buf = encode_record(seq, op, key, value)
        assert list(decode_records(buf)) == [(seq, op, key, value)]
        assert encode_record(seq, op, key, value) == buf


def test_decode_stops_at_zero_tail():
    buf = encode_record(1, OP_PUT, 5, b"v") + b"\x00" * 64
    assert len(list(decode_records(buf))) == 1


def test_delete_record_rejects_value():
    with pytest.raises(logc.LogError):
        encode_record(1, OP_DELETE, 5, b"oops")


def test_open_log_places_replicas_on_distinct_stocs():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"], replication=3)
    log = ctx.open_log(range_id=1, memtable_id=1)
    assert sorted(log.replica_stocs) == ["stoc0", "stoc1", "stoc2"]
    assert not log.degraded


def test_open_log_single_replica():
    _, _, _, client = make_cluster(1)
    ctx = LogContext(client, lambda: ["stoc0"], replication=1)
    log = ctx.open_log(1, 2)
    assert len(log.writers) == 1


def test_open_log_degrades_when_too_few_stocs():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"], replication=4)
    log = ctx.open_log(1, 3)
    assert len(log.writers) == 3 and log.degraded


def test_append_then_fetch_round_trip():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    log = ctx.open_log(1, 1)
    ctx.append(log, 1, OP_PUT, 42, b"hello")
    tables = logc.fetch_and_replay(client, ["stoc0", "stoc1", "stoc2"], 1)
    assert tables == {1: {42: (b"hello", 1, OP_PUT)}}


def test_thousand_appends_replay_in_sequence_order():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    log = ctx.open_log(1, 4)
    for seq in range(1, 1001):
        ctx.append(log, seq, OP_PUT, seq % 97, str(seq).encode())
    tables = logc.fetch_and_replay(client, ["stoc0", "stoc1", "stoc2"], 1)
    table = tables[4]
    assert len(table) == 97
    for key, (value, seq, op) in table.items():
        assert int(value) == seq and seq % 97 == key  # latest version won


def test_append_bypasses_stoc_request_logic():
    _, _, stocs, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    log = ctx.open_log(1, 5)
    handled = {sid: s.requests_handled for sid, s in stocs.items()}
    for seq in range(1, 200):
        ctx.append(log, seq, OP_PUT, seq, b"x" * 32)
    for sid, stoc in stocs.items():
        assert stoc.requests_handled == handled[sid]


def test_replica_loss_mid_stream_keeps_acked_records():
    fabric, router, stocs, client = make_cluster(3)
    ctx = LogContext(client, lambda: [s for s, c in stocs.items() if c.alive], seed=3)
    log = ctx.open_log(1, 6)
    for seq in range(1, 501):
        ctx.append(log, seq, OP_PUT, seq, b"v")
        if seq == 250:
            victim = log.replica_stocs[0]
            stocs[victim].crash()
    survivors = [s for s, c in stocs.items() if c.alive]
    tables = logc.fetch_and_replay(client, survivors, 1)
    assert set(tables[6]) == set(range(1, 501))


def test_single_surviving_replica_suffices():
    fabric, router, stocs, client = make_cluster(3)
    ctx = LogContext(client, lambda: [s for s, c in stocs.items() if c.alive])
    log = ctx.open_log(1, 7)
    for seq in range(1, 101):
        ctx.append(log, seq, OP_PUT, seq, b"v")
    for sid in log.replica_stocs[:2]:
        stocs[sid].crash()
    survivors = [s for s, c in stocs.items() if c.alive]
    tables = logc.fetch_and_replay(client, survivors, 1)
    assert set(tables[7]) == set(range(1, 101))


def test_all_replicas_lost_reports_memtable_ids():
    fabric, router, stocs, client = make_cluster(3)
    ctx = LogContext(client, lambda: [s for s, c in stocs.items() if c.alive])
    log = ctx.open_log(1, 8)
    ctx.append(log, 1, OP_PUT, 1, b"v")
    for stoc in stocs.values():
        stoc.crash()
    with pytest.raises(UnrecoverableMemtables) as exc:
        logc.fetch_and_replay(client, [], 1, memtable_ids=[8])
    assert exc.value.memtable_ids == [8]


def test_close_and_delete_idempotent():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    logs = [ctx.open_log(1, mid) for mid in (10, 11, 12)]
    for log in logs:
        ctx.append(log, 1, OP_PUT, 1, b"v")
    for log in logs:
        ctx.close_and_delete(log)
        ctx.close_and_delete(log)  # twice is fine
    assert logc.fetch_and_replay(client, ["stoc0", "stoc1", "stoc2"], 1) == {}


def test_replay_empty_log_set():
    _, _, _, client = make_cluster(1)
    assert logc.fetch_and_replay(client, ["stoc0"], 9) == {}


def test_replay_thread_count_invariant():
    _, _, _, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    rng = random.Random(7)
    for mid in range(1, 9):
        log = ctx.open_log(2, mid)
        for seq in range(1, 400):
            op = OP_DELETE if rng.random() < 0.1 else OP_PUT
            ctx.append(log, seq, op, rng.randrange(500), b"v%d" % seq if op == OP_PUT else None)
    one = logc.fetch_and_replay(client, ["stoc0", "stoc1", "stoc2"], 2, n_workers=1)
    eight = logc.fetch_and_replay(client, ["stoc0", "stoc1", "stoc2"], 2, n_workers=8)
    assert one == eight


def test_fetch_time_below_replay_time():
    _, _, _, client = make_cluster(3, region_size=1 << 20)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"])
    for mid in range(1, 9):
        log = ctx.open_log(3, mid)
        for seq in range(1, 3000):
            ctx.append(log, seq, OP_PUT, seq % 1000, b"x" * 64)
    located = logc.discover_logs(client, ["stoc0", "stoc1", "stoc2"], 3)
    t0 = time.perf_counter()
    fetched = logc.fetch_logs(client, located, 3)
    t_fetch = time.perf_counter() - t0
    t0 = time.perf_counter()
    for buffers in fetched.values():
        logc._replay_buffers(buffers)
    t_replay = time.perf_counter() - t0
    assert t_fetch < t_replay


def test_both_mode_persists_asynchronously():
    _, _, stocs, client = make_cluster(3)
    ctx = LogContext(client, lambda: ["stoc0", "stoc1", "stoc2"], mode=logc.MODE_BOTH)
    log = ctx.open_log(4, 1)
    ctx.append(log, 1, OP_PUT, 1, b"v")
    assert log.pending_persistent  # ack came before the persistent write
    ctx.flush_pending(log)
    assert not log.pending_persistent
    backend = stocs[log.persistent_stoc].backend
    assert backend.length(log.name) > 0
