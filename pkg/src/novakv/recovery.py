"""Crash recovery of a range on a (new) LTC.

The LSM metadata comes from the freshest manifest replica; memtables are
rebuilt by fetching and replaying the per-memtable log files still held in
StoC memory, partitioned across recovery workers. Lookup-index entries for
Level0 SSTables are re-derived by enumerating their keys, and the range
index is rebuilt from the recovered Dranges plus the spans of the rebuilt
memtables and Level0 tables.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import logc
from .common import TOMBSTONE
from .dranges import ReorgPolicy
from .engine import EngineConfig, RangeEngine
from .manifest import ManifestLog, best_manifest_replica
from .memtable import Memtable
from .placement import ScatterContext


@dataclass
class RecoveryReport:
    range_id: int
    replayed_memtables: int = 0
    recovered_entries: int = 0
    lost_memtables: list[int] = field(default_factory=list)
    fetch_seconds: float = 0.0
    replay_seconds: float = 0.0
    manifest_edits: int = 0


def rebuild_memtable(mid: int, table_map: dict, generation: int, budget: int) -> Memtable:
    table = Memtable(mid, generation, budget)
    for key, (value, seq, op) in table_map.items():
        table.put(key, TOMBSTONE if value is None else value, seq)
    table.seal(0)
    return table


def recover_range(
    range_id: int,
    range_lo: int,
    range_hi: int,
    client,
    stoc_roster,
    scatter: ScatterContext,
    config: EngineConfig,
    reorg_policy: ReorgPolicy | None = None,
    log_ctx=None,
    manifest: ManifestLog | None = None,
    n_workers: int = 1,
    seed: int = 0,
) -> tuple[RangeEngine, RecoveryReport]:
    report = RecoveryReport(range_id)
    stoc_ids = list(stoc_roster())
    replica, state = best_manifest_replica(client, stoc_ids, range_id)
    report.manifest_edits = state.edits

    engine = RangeEngine(
        range_id,
        range_lo,
        range_hi,
        scatter,
        config=config,
        reorg_policy=reorg_policy,
        log_ctx=log_ctx,
        manifest=manifest,
        seed=seed,
        bootstrap=False,
    )
    if state.dranges is not None:
        engine.restore_dranges(state.dranges)
    engine.adopt_level_tables(state.levels())

    # Fetch log records (one one-sided read per region) and replay them
    # partitioned by memtable across the workers.
    located = logc.discover_logs(client, stoc_ids, range_id)
    t0 = time.perf_counter()
    fetched = logc.fetch_logs(client, located, range_id)
    report.fetch_seconds = time.perf_counter() - t0
    report.lost_memtables = sorted(set(located) - set(fetched))

    t0 = time.perf_counter()
    tables = replay_fetched(fetched, n_workers)
    report.replay_seconds = time.perf_counter() - t0

    max_mid = 0
    max_seq = 0
    for mid in sorted(tables):
        table_map = tables[mid]
        if not table_map:
            continue
        max_mid = max(max_mid, mid)
        max_seq = max(max_seq, max(seq for _, seq, _ in table_map.values()))
        memtable = rebuild_memtable(mid, table_map, engine.dmap.generation, config.tau_bytes)
        memtable.mid = mid
        memtable.absorbed_mids = {mid}
        if log_ctx is not None:
            skeleton = logc.LogFile(range_id, mid, log_ctx.mode)
            skeleton.recovered_replicas = list(located.get(mid, []))
            memtable.log = skeleton
        engine.adopt_immutable(memtable)
        report.replayed_memtables += 1
        report.recovered_entries += len(table_map)
    engine.bump_mid_floor(max_mid)
    engine.bump_seq_floor(max_seq)

    # Level0 SSTable keys re-enter the lookup index so hits stay one-probe.
    for desc in list(engine.level(0).tables.values()):
        engine.index_l0_keys(desc)

    engine.attach_all_actives()
    return engine, report


def replay_fetched(fetched: dict[int, list[bytes]], n_workers: int) -> dict[int, dict]:
    """Worker-count-invariant replay of fetched log buffers."""
    work = sorted(fetched.items())
    if n_workers <= 1 or len(work) <= 1:
        return {mid: logc._replay_buffers(bufs) for mid, bufs in work}
    import multiprocessing

    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(n_workers, len(work))) as pool:
        return dict(pool.map(logc._replay_worker, work))
