import random

import pytest

from conftest import Fleet, Oracle, build_engine
from novakv import logc
from novakv.compaction import make_inline_compactor
from novakv.dranges import ReorgPolicy
from novakv.engine import EngineConfig
from novakv.manifest import (
    ManifestLog,
    best_manifest_replica,
    descriptor_from_json,
    descriptor_to_json,
    manifest_versions_on,
    replay_manifest,
)
from novakv.placement import PlacementPolicy, ScatterContext
from novakv.recovery import recover_range
from novakv.sstable import Placement, SSTableDescriptor


def make_manifest(fleet, range_id=1, replicas=3, seed=0):
    return ManifestLog(fleet.client, fleet.live, range_id, replicas=replicas, seed=seed)


def fake_desc(fno, level=0, lo=0, hi=10):
    return SSTableDescriptor(
        file_number=fno,
        range_id=1,
        level=level,
        min_key=lo,
        max_key=hi,
        entry_count=5,
        size_bytes=100,
        fragments=[Placement("stoc0", f"1-{fno}-frag0.nvs", 100)],
        parity=None,
        meta_replicas=[Placement("stoc1", f"1-{fno}-meta.nvs", 40)],
        fragment_offsets=[0],
    )


# -- manifest basics -------------------------------------------------------------


def test_descriptor_json_round_trip():
    desc = fake_desc(7, level=2)
    desc.fragments[0].extra_replicas = ["stoc3"]
    back = descriptor_from_json(descriptor_to_json(desc))
    assert back.file_number == 7 and back.level == 2
    assert back.fragments[0].extra_replicas == ["stoc3"]
    assert back.meta_replicas[0].stoc_id == "stoc1"


def test_replay_empty_manifest():
    fleet = Fleet(3)
    state = replay_manifest(fleet.client, "stoc0", 1)
    assert state.edits == 0 and state.tables == {}


def test_add_then_remove_absent_after_replay():
    fleet = Fleet(3)
    log = make_manifest(fleet)
    log.append_add(fake_desc(1))
    log.append_remove(0, 1)
    for stoc in log.replica_stocs:
        state = replay_manifest(fleet.client, stoc, 1)
        assert state.edits == 2
        assert state.tables == {}


def test_replay_equals_incremental_state():
    fleet = Fleet(3)
    log = make_manifest(fleet)
    rng = random.Random(3)
    live = {}
    for i in range(1, 300):
        if live and rng.random() < 0.35:
            fno = rng.choice(sorted(live))
            log.append_remove(live.pop(fno).level, fno)
        else:
            desc = fake_desc(i, level=rng.randrange(3))
            live[i] = desc
            log.append_add(desc)
    for stoc in log.replica_stocs:
        state = replay_manifest(fleet.client, stoc, 1)
        assert sorted(state.tables) == sorted(live)
        for fno in live:
            assert state.tables[fno].level == live[fno].level


def test_edit_durable_on_all_replicas_before_ack():
    fleet = Fleet(3)
    log = make_manifest(fleet)
    log.append_add(fake_desc(1))
    assert sorted(log.versions.values()) == [1, 1, 1]


def test_replica_down_records_version_gap():
    fleet = Fleet(4)
    log = make_manifest(fleet, seed=1)
    victim = log.replica_stocs[0]
    fleet.stocs[victim].crash()
    log.append_add(fake_desc(1))
    assert (victim, 1) in log.version_gaps
    assert log.latest_version() == 1


def test_stale_replica_detected_from_stoc_reports():
    fleet = Fleet(3)
    log = make_manifest(fleet)
    log.append_add(fake_desc(1))
    victim = log.replica_stocs[-1]
    fleet.stocs[victim].crash()
    log.append_add(fake_desc(2))
    # victim restarts on its old disk and reports its replica versions
    backend = fleet.stocs[victim].backend
    from novakv.stoc import StorageComponent

    revived = StorageComponent(victim, fleet.fabric, backend, region_size=64 * 1024)
    revived._router = fleet.router
    fleet.router.register(victim, revived)
    fleet.stocs[victim] = revived
    reports = {s: manifest_versions_on(fleet.client, s) for s in fleet.live()}
    from novakv.coordinator import Coordinator

    stale = Coordinator.detect_stale_replicas(reports)
    assert stale == [(victim, 1)]


def test_best_replica_prefers_highest_version():
    fleet = Fleet(3)
    log = make_manifest(fleet)
    log.append_add(fake_desc(1))
    victim = log.replica_stocs[0]
    fleet.stocs[victim].crash()
    log.append_add(fake_desc(2))
    survivors = [s for s in log.replica_stocs if s != victim]
    best, state = best_manifest_replica(fleet.client, fleet.live(), 1)
    assert best in survivors
    assert state.edits == 2


# -- crash recovery of a full range -------------------------------------------------


def engine_with_logging(seed=0, **kw):
    return build_engine(logging=True, replication=3, n_stocs=4, seed=seed, **kw)


def test_recover_range_restores_all_acked_writes():
    engine = engine_with_logging(seed=1)
    fleet = engine.fleet
    manifest = make_manifest(fleet)
    engine.manifest = manifest
    oracle = Oracle()
    rng = random.Random(1)
    for step in range(4000):
        key = rng.randrange(3000)
        if rng.random() < 0.1:
            engine.delete(key)
            oracle.delete(key)
        else:
            value = bytes([step % 199 + 1]) * rng.randrange(1, 40)
            engine.put(key, value)
            oracle.put(key, value)
    live_memtables = len(engine.live_memtables())
    assert live_memtables > 0

    # Crash: the LTC process disappears; StoCs keep regions and disk files.
    del engine

    scatter = ScatterContext(
        fleet.client, fleet.live, PlacementPolicy(min_fragment_size=2048),
        scheme="parity", rho=2, seed=2,
    )
    log_ctx = logc.LogContext(fleet.client, fleet.live, replication=3, seed=2)
    config = EngineConfig(theta=4, gamma=8, delta=8, tau_bytes=8 * 1024,
                          block_target=512, l1_base_bytes=64 * 1024,
                          max_sstable_bytes=32 * 1024)
    recovered, report = recover_range(
        1, 0, 100_000, fleet.client, fleet.live, scatter, config,
        reorg_policy=ReorgPolicy(theta=4, gamma=8, check_interval=512,
                                 sample_capacity=4096, min_epoch_writes=256),
        log_ctx=log_ctx, manifest=manifest, n_workers=1, seed=2,
    )
    recovered.compactor = make_inline_compactor(recovered)
    assert report.lost_memtables == []
    assert report.replayed_memtables > 0
    for key in range(3000):
        assert recovered.get(key) == oracle.get(key), key
    # the recovered range keeps serving writes with fresh sequence numbers
    seq = recovered.put(5, b"after")
    assert seq > report.recovered_entries
    assert recovered.get(5) == b"after"


def test_recover_range_quiet_after_flush_has_no_logs():
    engine = engine_with_logging(seed=3)
    fleet = engine.fleet
    manifest = make_manifest(fleet, seed=3)
    engine.manifest = manifest
    for k in range(400):
        engine.put(k, b"q" * 40)
    engine.flush_all()
    del engine
    scatter = ScatterContext(
        fleet.client, fleet.live, PlacementPolicy(min_fragment_size=2048),
        scheme="parity", rho=2, seed=4,
    )
    config = EngineConfig(theta=4, gamma=8, delta=8, tau_bytes=8 * 1024,
                          block_target=512, l1_base_bytes=64 * 1024,
                          max_sstable_bytes=32 * 1024)
    recovered, report = recover_range(
        1, 0, 100_000, fleet.client, fleet.live, scatter, config,
        log_ctx=logc.LogContext(fleet.client, fleet.live, replication=3, seed=4),
        manifest=manifest,
    )
    assert report.replayed_memtables == 0  # nothing dirty at crash time
    for k in range(0, 400, 7):
        assert recovered.get(k) == b"q" * 40


def test_recovered_lookup_index_keeps_one_probe_hits():
    engine = engine_with_logging(seed=5)
    fleet = engine.fleet
    manifest = make_manifest(fleet, seed=5)
    engine.manifest = manifest
    for k in range(300):
        engine.put(k, b"i" * 50)
    engine.flush_all()  # everything at L0 now
    del engine
    scatter = ScatterContext(
        fleet.client, fleet.live, PlacementPolicy(min_fragment_size=2048),
        scheme="parity", rho=2, seed=6,
    )
    config = EngineConfig(theta=4, gamma=8, delta=8, tau_bytes=8 * 1024,
                          block_target=512, l1_base_bytes=64 * 1024,
                          max_sstable_bytes=32 * 1024)
    recovered, _ = recover_range(
        1, 0, 100_000, fleet.client, fleet.live, scatter, config,
        log_ctx=logc.LogContext(fleet.client, fleet.live, replication=3, seed=6),
        manifest=manifest,
    )
    for k in range(0, 300, 11):
        assert recovered.get(k) == b"i" * 50
        assert recovered.last_get_probes == 1  # L0 keys re-indexed


def test_replay_worker_count_invariant_through_recovery():
    engine = engine_with_logging(seed=7)
    fleet = engine.fleet
    manifest = make_manifest(fleet, seed=7)
    engine.manifest = manifest
    rng = random.Random(7)
    for _ in range(3000):
        engine.put(rng.randrange(2000), bytes([rng.randrange(1, 200)]) * 20)
    located = logc.discover_logs(fleet.client, fleet.live(), 1)
    fetched = logc.fetch_logs(fleet.client, located, 1)
    from novakv.recovery import replay_fetched

    assert replay_fetched(fetched, 1) == replay_fetched(fetched, 8)
