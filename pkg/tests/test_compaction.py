import random
from concurrent.futures import ThreadPoolExecutor

import pytest

from conftest import Oracle, build_engine
from novakv.compaction import (
    RoundRobinOffloader,
    compact_once,
    compute_jobs,
    decode_job,
    encode_job,
    make_stoc_compaction_runner,
    pick_level,
    run_job,
    install_results,
)
from novakv.placement import PlacementPolicy


def fill(engine, rng, n, keyspace, value_len=40):
    for _ in range(n):
        engine.put(rng.randrange(keyspace), bytes([rng.randrange(1, 255)]) * value_len)


def drain_to_l0(engine):
    engine.flush_all()


# -- pick_level -----------------------------------------------------------


def test_pick_level_prefers_highest_ratio():
    engine = build_engine(with_compactor=False, config_overrides={"l1_base_bytes": 1000})
    rng = random.Random(0)
    fill(engine, rng, 600, 500)
    drain_to_l0(engine)
    # L0 is over budget (expected == l1 base), nothing else populated.
    assert pick_level(engine) == 0


def test_pick_level_none_when_under_budget():
    engine = build_engine(with_compactor=False)
    engine.put(1, b"x")
    assert pick_level(engine) is None


def test_pick_level_ties_go_lower():
    engine = build_engine(with_compactor=False, config_overrides={"l1_base_bytes": 100})

    class FakeTable:
        def __init__(self, size):
            self.size_bytes = size
            self.min_key, self.max_key = 0, 1

    engine.level(0).tables[901] = FakeTable(200)
    engine.level(1).tables[902] = FakeTable(200)  # same 2.0 ratio
    assert pick_level(engine) == 0


# -- compute_jobs ----------------------------------------------------------


def test_jobs_disjoint_on_random_layouts():
    # Interval-intersection oracle over 50 random L0/L1 layouts.
    for trial in range(50):
        rng = random.Random(trial)
        engine = build_engine(
            with_compactor=False,
            seed=trial,
            theta=4,
            config_overrides={"l1_base_bytes": 2048, "merge_threshold": 5},
        )
        fill(engine, rng, rng.randrange(200, 800), rng.randrange(100, 3000))
        drain_to_l0(engine)
        if not engine.level(0).tables:
            continue
        jobs = compute_jobs(engine, 0)
        eligible = set(engine.level(0).tables)
        covered = set()
        spans = []
        for job in jobs:
            for t in job.inputs:
                assert t.file_number not in covered
                covered.add(t.file_number)
            spans.append((job.key_lo, job.key_hi))
        assert covered == eligible  # union of inputs is the eligible set
        spans.sort()
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
            assert hi1 < lo2, f"jobs overlap in trial {trial}"


def test_l0_jobs_follow_drange_splits():
    engine = build_engine(
        with_compactor=False, theta=4,
        config_overrides={"l1_base_bytes": 512, "merge_threshold": 0},
    )
    # Two disjoint clusters of keys -> L0 tables in different regions.
    for k in range(0, 50):
        engine.put(k, b"a" * 50)
    drain_to_l0(engine)
    for k in range(5000, 5050):
        engine.put(k, b"b" * 50)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    assert len(jobs) == 2


def test_overlap_closure_pulls_l1_tables():
    engine = build_engine(
        with_compactor=False,
        config_overrides={"l1_base_bytes": 1 << 30, "merge_threshold": 0},
    )
    for k in range(0, 200):
        engine.put(k, b"x" * 30)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    for job in jobs:
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    assert engine.level(1).tables
    # New L0 table overlapping L1 must include the L1 overlaps in its job.
    for k in range(50, 150):
        engine.put(k, b"y" * 30)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    assert len(jobs) == 1
    assert jobs[0].overlaps


# -- run_job ----------------------------------------------------------------


def test_run_job_matches_merge_oracle():
    engine = build_engine(
        with_compactor=False, seed=2,
        config_overrides={"l1_base_bytes": 1024, "merge_threshold": 0},
    )
    oracle = Oracle()
    rng = random.Random(2)
    for step in range(800):
        key = rng.randrange(300)
        if rng.random() < 0.15:
            engine.delete(key)
            oracle.delete(key)
        else:
            value = bytes([step % 200 + 1]) * 20
            engine.put(key, value)
            oracle.put(key, value)
    drain_to_l0(engine)
    for job in compute_jobs(engine, 0):
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    for key in range(300):
        assert engine.get(key) == oracle.get(key), key


def test_duplicate_key_lower_level_wins():
    engine = build_engine(
        with_compactor=False,
        config_overrides={"l1_base_bytes": 1 << 30, "merge_threshold": 0},
    )
    for k in range(150):
        engine.put(k, b"old" * 10)
    drain_to_l0(engine)
    for job in compute_jobs(engine, 0):
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    for k in range(150):
        engine.put(k, b"new" * 10)
    drain_to_l0(engine)
    for job in compute_jobs(engine, 0):
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    assert engine.get(10) == b"new" * 10


def test_tombstones_dropped_only_at_bottom():
    engine = build_engine(
        with_compactor=False,
        config_overrides={"l1_base_bytes": 1 << 30, "merge_threshold": 0},
    )
    for k in range(120):
        engine.put(k, b"v" * 20)
    for k in range(0, 120, 2):
        engine.delete(k)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    assert all(job.bottom for job in jobs)  # nothing deeper than L1
    for job in jobs:
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    for desc in engine.level(1).tables.values():
        for key, op, seq, value in engine.scatter.read_all_entries(desc):
            assert op == 0  # no tombstones survive a bottom-level merge
    assert engine.get(0) is None
    assert engine.get(1) == b"v" * 20


def test_outputs_respect_max_size_and_boundaries():
    engine = build_engine(
        with_compactor=False, theta=4,
        config_overrides={
            "l1_base_bytes": 1024,
            "max_sstable_bytes": 2048,
            "merge_threshold": 0,
        },
    )
    rng = random.Random(3)
    fill(engine, rng, 600, 2000, value_len=50)
    drain_to_l0(engine)
    for job in compute_jobs(engine, 0):
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        boundaries = job.drange_boundaries
        for desc in outs:
            assert desc.size_bytes <= 2 * 2048  # block granularity slack
            for b in boundaries:
                assert not (desc.min_key < b <= desc.max_key), "output crosses a Drange boundary"
        install_results(engine, job, outs, keys)


def test_parallel_execution_equals_sequential():
    # Jobs are key-disjoint: running them concurrently must produce the
    # same table contents as a sequential run.
    results = {}
    for mode in ("seq", "par"):
        engine = build_engine(
            with_compactor=False, seed=4, theta=4,
            config_overrides={"l1_base_bytes": 1024, "merge_threshold": 0},
        )
        rng = random.Random(4)
        # Disjoint key clusters, two overwriting rounds each, so every
        # cluster yields overlapping-in-cluster L0 tables but jobs stay
        # separable across clusters.
        for round_ in range(2):
            for base in (0, 10_000, 20_000, 30_000):
                for _ in range(120):
                    engine.put(base + rng.randrange(200), bytes([round_ + 1]) * 30)
                drain_to_l0(engine)
        jobs = compute_jobs(engine, 0)
        assert len(jobs) >= 2
        if mode == "seq":
            outcome = [run_job(j, engine.scatter, engine.range_id, 512) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=4) as pool:
                outcome = list(
                    pool.map(lambda j: run_job(j, engine.scatter, engine.range_id, 512), jobs)
                )
        for job, (outs, keys) in zip(jobs, outcome):
            install_results(engine, job, outs, keys)
        snapshot = {}
        for desc in engine.level(1).tables.values():
            for key, op, seq, value in engine.scatter.read_all_entries(desc):
                snapshot[key] = (op, seq, value)
        results[mode] = snapshot
    assert results["seq"] == results["par"]


def test_l0_cleanup_removes_only_own_keys():
    engine = build_engine(
        with_compactor=False,
        config_overrides={"l1_base_bytes": 1 << 30, "merge_threshold": 0},
    )
    for k in range(150):
        engine.put(k, b"v" * 30)
    drain_to_l0(engine)
    engine.put(7, b"fresh")  # newer version lives in a memtable now
    for job in compute_jobs(engine, 0):
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        install_results(engine, job, outs, keys)
    # key 7 still indexed (memtable holds it); key 8 was removed
    assert engine.lookup.lookup(7) is not None
    assert engine.lookup.lookup(8) is None
    assert engine.get(7) == b"fresh"
    assert engine.get(8) == b"v" * 30


# -- offloading ---------------------------------------------------------------


def test_job_codec_round_trip():
    engine = build_engine(with_compactor=False, config_overrides={"merge_threshold": 0})
    for k in range(200):
        engine.put(k, b"c" * 30)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    meta, payload = encode_job(jobs[0], engine.range_id, 512)
    back = decode_job(meta, payload)
    assert [t.file_number for t in back.inputs] == [t.file_number for t in jobs[0].inputs]
    assert back.drange_boundaries == jobs[0].drange_boundaries
    assert back.reserved_file_numbers == jobs[0].reserved_file_numbers


def test_offloaded_equals_local_execution():
    engine = build_engine(
        with_compactor=False, seed=5,
        config_overrides={"l1_base_bytes": 1024, "merge_threshold": 0},
    )
    runner = make_stoc_compaction_runner(
        engine.fleet.live, PlacementPolicy(min_fragment_size=2048), "parity", 2, seed=9
    )
    for stoc in engine.fleet.stocs.values():
        stoc.compaction_runner = runner
    rng = random.Random(5)
    fill(engine, rng, 500, 300, value_len=30)
    drain_to_l0(engine)
    jobs = compute_jobs(engine, 0)
    local_results = {}
    for job in jobs:
        outs, keys = run_job(job, engine.scatter, engine.range_id, 512)
        for desc in outs:
            for e in engine.scatter.read_all_entries(desc):
                local_results[e[0]] = (e[1], e[2], e[3])
    offloader = RoundRobinOffloader(engine.fleet.client, engine.fleet.live, fallback_local=False)
    remote_results = {}
    for job in jobs:
        # fresh reserved numbers so remote outputs don't collide with local
        job.reserved_file_numbers = [engine.next_file_number() for _ in job.reserved_file_numbers]
        outs, keys = offloader(engine, job)
        for desc in outs:
            for e in engine.scatter.read_all_entries(desc):
                remote_results[e[0]] = (e[1], e[2], e[3])
    assert local_results == remote_results
    assert all(target != "local" for _, target in offloader.dispatched)


def test_offload_round_robin_order():
    engine = build_engine(with_compactor=False, n_stocs=3, config_overrides={"merge_threshold": 0})
    runner = make_stoc_compaction_runner(
        engine.fleet.live, PlacementPolicy(min_fragment_size=2048), "none", 1
    )
    for stoc in engine.fleet.stocs.values():
        stoc.compaction_runner = runner
    offloader = RoundRobinOffloader(engine.fleet.client, engine.fleet.live)
    for batch in range(4):
        for k in range(batch * 200, batch * 200 + 150):
            engine.put(k, b"r" * 30)
        drain_to_l0(engine)
        jobs = compute_jobs(engine, 0)
        for job in jobs:
            outs, keys = offloader(engine, job)
            install_results(engine, job, outs, keys)
    targets = [t for _, t in offloader.dispatched]
    assert len(targets) >= 4
    expected = [f"stoc{i % 3}" for i in range(len(targets))]
    assert targets == expected  # strict roster order, wrapping around


def test_offload_reissues_on_dead_stoc():
    engine = build_engine(with_compactor=False, n_stocs=3, config_overrides={"merge_threshold": 0})
    runner = make_stoc_compaction_runner(
        engine.fleet.live, PlacementPolicy(min_fragment_size=2048), "none", 1
    )
    for stoc in engine.fleet.stocs.values():
        stoc.compaction_runner = runner
    for k in range(200):
        engine.put(k, b"d" * 30)
    drain_to_l0(engine)
    engine.fleet.stocs["stoc0"].crash()
    offloader = RoundRobinOffloader(engine.fleet.client, engine.fleet.live)
    jobs = compute_jobs(engine, 0)
    for job in jobs:
        outs, keys = offloader(engine, job)
        install_results(engine, job, outs, keys)
    assert all(t != "stoc0" for _, t in offloader.dispatched)
    for k in range(0, 200, 17):
        assert engine.get(k) == b"d" * 30


def test_compact_once_applies_results():
    engine = build_engine(
        with_compactor=False,
        config_overrides={"l1_base_bytes": 1024, "merge_threshold": 0},
    )
    rng = random.Random(6)
    fill(engine, rng, 400, 250, value_len=40)
    drain_to_l0(engine)
    l0_before = len(engine.level(0).tables)
    assert compact_once(engine)
    assert len(engine.level(0).tables) < l0_before
    for k in range(0, 250, 13):
        expected = None
        # value unknown; just assert reads don't crash and index sound
        engine.get(k)
