"""Per-range LSM-tree engine.

One RangeEngine owns the Dranges of a range, their memtables, the lookup
and range indexes, the level metadata, and the flush-or-merge pipeline.
Writes append to the active memtable of the Drange containing the key,
with sequence numbers from a single per-range counter; a full memtable is
sealed, and sealed memtables either flush to StoCs as Level0 SSTables or,
below the unique-key threshold, merge back into a new immutable memtable
instead of touching storage. Sealed memtables flush oldest-generation
first so reorganization cannot reorder versions across levels.

Gets resolve through the lookup index (one table on a hit); misses search
only bloom-passing overlapping SSTables at Level1 and higher. Scans walk
the range index partition by partition. Both pick the highest sequence
number among candidates, which keeps reads correct regardless of how
reorganizations moved Drange boundaries.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field
from heapq import merge as heap_merge

from .common import OP_DELETE, OP_PUT, TOMBSTONE
from .dranges import Drange, DrangeMap, ReorgPolicy
from .indexes import KIND_L0, KIND_MEM, LookupIndex, RangeIndex
from .memtable import STATE_IMMUTABLE, Memtable
from .placement import ScatterContext
from .sstable import SSTableDescriptor, build_sstable, iter_entries

DEFAULT_MERGE_THRESHOLD = 100
DEFAULT_L1_BASE = 10 * 1024 * 1024
LEVEL_RATIO = 10
DEFAULT_MAX_SSTABLE = 16 * 1024 * 1024
L0_STALL_FACTOR = 4


class RoutingError(Exception):
    pass


class WriteStalled(Exception):
    pass


@dataclass
class LevelState:
    level: int
    tables: dict[int, SSTableDescriptor] = field(default_factory=dict)

    @property
    def actual_size(self) -> int:
        return sum(t.size_bytes for t in self.tables.values())

    def overlapping(self, lo: int, hi: int) -> list[SSTableDescriptor]:
        return [t for t in self.tables.values() if t.overlaps(lo, hi)]


@dataclass
class EngineConfig:
    theta: int = 8
    gamma: int = 16
    delta: int = 16
    tau_bytes: int = 256 * 1024
    merge_threshold: int = DEFAULT_MERGE_THRESHOLD
    block_target: int = 4096
    l1_base_bytes: int = DEFAULT_L1_BASE
    max_sstable_bytes: int = DEFAULT_MAX_SSTABLE
    always_flush: bool = False  # disable merge-instead-of-flush (baseline)
    early_return_on_level_hit: bool = False  # generation-ordered shortcut
    seal_on_minor_reorg: bool = False
    compact_inline: bool = True

    @property
    def memtables_per_drange(self) -> int:
        return max(self.delta // self.theta, 1)


class RangeEngine:
    def __init__(
        self,
        range_id: int,
        range_lo: int,
        range_hi: int,
        scatter: ScatterContext,
        config: EngineConfig | None = None,
        reorg_policy: ReorgPolicy | None = None,
        log_ctx=None,
        manifest=None,
        seed: int = 0,
        bootstrap: bool = True,
    ):
        self.range_id = range_id
        self.range_lo = range_lo
        self.range_hi = range_hi
        self.scatter = scatter
        self.config = config or EngineConfig()
        self.log_ctx = log_ctx
        self.manifest = manifest
        policy = reorg_policy or ReorgPolicy(theta=self.config.theta, gamma=self.config.gamma)
        self.dmap = DrangeMap(range_lo, range_hi, policy, seed=seed)
        self.lookup = LookupIndex()
        self.range_index = RangeIndex(range_lo, range_hi)
        self.levels: list[LevelState] = [LevelState(i) for i in range(9)]
        self.lock = threading.RLock()
        self._seq = itertools.count(1)
        self._mid_counter = 0
        self._file_counter = 0
        self._seal_orders = itertools.count(1)
        self.last_seq = 0
        self.writes = 0
        self.stall_events = 0
        self.stall_time_s = 0.0
        self.flush_count = 0
        self.merge_count = 0
        # (generation, file_number, older-eligible-existed) per flush
        self.flush_log: list[tuple[int, int, bool]] = []
        self._flush_queue: list[Memtable] = []
        self.compactor = None  # wired by compaction module / cluster
        self.gate = None  # migration gate; blocks requests while rebuilding
        self.last_get_probes = 0
        if bootstrap:
            for drange in self.dmap.dranges:
                self._attach_active(drange)

    def attach_all_actives(self) -> None:
        """Create fresh active memtables (recovery/migration bootstrap)."""
        with self.lock:
            for drange in self.dmap.dranges:
                if drange.active is None:
                    self._attach_active(drange)

    def restore_dranges(self, state: dict) -> None:
        """Install a Drange/Trange layout recovered from the manifest."""
        from .dranges import Drange, Trange

        with self.lock:
            dranges = []
            max_id = -1
            for obj in state["layout"]:
                tranges = [Trange(lo, hi) for lo, hi in obj["tranges"]]
                d = Drange(obj["id"], tranges, obj.get("dup"))
                dranges.append(d)
                max_id = max(max_id, obj["id"])
            self.dmap.dranges = dranges
            self.dmap.generation = state.get("generation", 0)
            self.dmap._next_drange_id = max_id + 1
            self.dmap.major_reorgs = max(self.dmap.major_reorgs, 1)
            self.dmap._rebuild_locator()
            boundaries = set()
            for d in dranges:
                lo, hi = d.interval()
                if hi > lo:
                    boundaries.update((lo, hi))
            self.range_index.split_at(boundaries)

    def adopt_immutable(self, table: Memtable) -> None:
        """Attach a recovered immutable memtable to the range."""
        with self.lock:
            span = table.span()
            self.lookup.register_memtable(table)
            self.lookup.alias_to_memtable(table.absorbed_mids, table)
            for key, (value, seq) in table.entries.items():
                self.lookup.record_write(key, table.mid, seq)
            if span is not None:
                self.range_index.add_memtable(table, span[0], span[1] + 1)
                mid_point = span[0]
                try:
                    drange = self.dmap.locate(mid_point)
                    table.origin_drange = drange.drange_id
                    drange.immutables.append(table)
                except KeyError:
                    pass
            self._flush_queue.append(table)

    def adopt_level_tables(self, levels: dict[int, dict[int, SSTableDescriptor]]) -> None:
        with self.lock:
            max_fno = 0
            for lvl, tables in levels.items():
                self.level(lvl).tables.update(tables)
                for fno, desc in tables.items():
                    max_fno = max(max_fno, fno)
                    if lvl == 0:
                        self.range_index.add_l0(desc)
            self.bump_file_floor(max_fno)

    def index_l0_keys(self, desc: SSTableDescriptor) -> None:
        """Rebuild lookup-index entries for one Level0 SSTable's keys."""
        entries = self.scatter.read_all_entries(desc)
        alias = self._next_mid()
        self.lookup.register_l0_alias(alias, desc.file_number)
        for key, op, seq, value in entries:
            self.lookup.record_write(key, alias, seq)

    # -- plumbing -----------------------------------------------------------

    def _next_mid(self) -> int:
        with self.lock:
            self._mid_counter += 1
            return self._mid_counter

    def bump_mid_floor(self, floor: int) -> None:
        with self.lock:
            self._mid_counter = max(self._mid_counter, floor)

    def next_file_number(self) -> int:
        with self.lock:
            self._file_counter += 1
            return self._file_counter

    def bump_file_floor(self, floor: int) -> None:
        with self.lock:
            self._file_counter = max(self._file_counter, floor)

    def bump_seq_floor(self, floor: int) -> None:
        with self.lock:
            current = next(self._seq)
            self._seq = itertools.count(max(current, floor + 1))
            self.last_seq = max(self.last_seq, floor)

    def _attach_active(self, drange: Drange) -> None:
        table = Memtable(
            self._next_mid(), self.dmap.generation, self.config.tau_bytes, drange.drange_id
        )
        if self.log_ctx is not None:
            table.log = self.log_ctx.open_log(self.range_id, table.mid)
        drange.active = table
        self.lookup.register_memtable(table)
        lo, hi = drange.interval()
        if hi > lo:
            self.range_index.add_memtable(table, lo, hi)
        else:
            self.range_index.add_memtable(table, lo, lo + 1)

    def level(self, i: int) -> LevelState:
        if i >= len(self.levels):
            with self.lock:
                while len(self.levels) <= i:
                    self.levels.append(LevelState(len(self.levels)))
        return self.levels[i]

    def expected_level_size(self, i: int) -> int:
        if i == 0:
            return self.config.l1_base_bytes
        return self.config.l1_base_bytes * LEVEL_RATIO ** (i - 1)

    def l0_stall_limit(self) -> int:
        per_table = max(self.config.max_sstable_bytes, 1)
        return L0_STALL_FACTOR * max(self.config.l1_base_bytes // per_table, 1)

    def live_descriptors(self) -> list[SSTableDescriptor]:
        with self.lock:
            out = []
            for level in self.levels:
                out.extend(level.tables.values())
            return out

    def live_memtables(self) -> list[Memtable]:
        with self.lock:
            seen = {}
            for drange in self.dmap.dranges:
                if drange.active is not None:
                    seen[drange.active.mid] = drange.active
                for m in drange.immutables:
                    seen[m.mid] = m
            for m in self._flush_queue:
                seen[m.mid] = m
            return list(seen.values())

    # -- writes ---------------------------------------------------------------

    def put(self, key: int, value: bytes) -> int:
        return self._write(key, value)

    def delete(self, key: int) -> int:
        return self._write(key, TOMBSTONE)

    def _write(self, key: int, value) -> int:
        if not (self.range_lo <= key < self.range_hi):
            raise RoutingError(f"key {key} outside range {self.range_id}")
        if self.gate is not None:
            self.gate.wait(key)
        with self.lock:
            drange = self.dmap.locate(key)
            table = drange.active
            if table is None:
                self._attach_active(drange)
                table = drange.active
            if table.is_full():
                self._seal_and_dispatch(drange)
                table = drange.active
            seq = next(self._seq)
            table.put(key, value, seq)
            self.last_seq = seq
            self.lookup.record_write(key, table.mid, seq)
            if table.log is not None:
                op = OP_DELETE if value is TOMBSTONE else OP_PUT
                self.log_ctx.append(table.log, seq, op, key, None if value is TOMBSTONE else value)
            self.dmap.record_write(key, drange)
            self.writes += 1
            if self.writes % self.dmap.policy.check_interval == 0:
                self._maybe_reorganize()
        return seq

    def _seal_and_dispatch(self, drange: Drange) -> None:
        table = drange.active
        table.seal(next(self._seal_orders))
        self.range_index.shrink_memtable_to_span(table)
        drange.immutables.append(table)
        self._flush_queue.append(table)
        drange.active = None
        self._attach_active(drange)
        slots = self.config.memtables_per_drange - 1
        if len(drange.immutables) > slots:
            self._stall(drange, slots)
        else:
            self.process_flushes()
        if self.config.compact_inline:
            self.maybe_compact()

    def _stall(self, drange: Drange, slots: int) -> None:
        """All memtable slots of this Drange are full: drain work inline."""
        start = time.perf_counter()
        self.stall_events += 1
        guard = 0
        while len(drange.immutables) > slots and guard < 1000:
            before = len(drange.immutables)
            self.process_flushes()
            if len(drange.immutables) >= before and drange.immutables:
                # Nothing merged or flushed on its own; force the oldest out.
                self._flush_one(drange.immutables[0])
            guard += 1
        while (
            len(self.level(0).tables) >= self.l0_stall_limit() and self.compactor is not None
        ):
            if not self.compactor():
                break
        self.stall_time_s += time.perf_counter() - start

    # -- flush-or-merge pipeline ------------------------------------------------

    def process_flushes(self) -> int:
        """Run the flush-or-merge rule over sealed memtables.

        Small memtables (unique keys at or below the threshold) of one
        Drange merge into a single new immutable and stay in memory; the
        rest flush as SSTables, strictly oldest generation first. Lingering
        small memtables do not block newer flushes since they never reach
        storage themselves.
        """
        with self.lock:
            work = 0
            threshold = 0 if self.config.always_flush else self.config.merge_threshold
            # Merge phase: combine the small immutables of each Drange.
            by_origin: dict[int, list[Memtable]] = {}
            for m in self._flush_queue:
                if m.state == STATE_IMMUTABLE and m.unique_keys() <= threshold:
                    by_origin.setdefault(m.origin_drange, []).append(m)
            for origin, smalls in by_origin.items():
                if len(smalls) >= 2:
                    merged = self._merge_memtables(origin, smalls)
                    work += 1
                    if merged.unique_keys() > threshold:
                        self._flush_one(merged)
            # Flush phase: everything over the threshold, oldest gen first.
            bigs = [
                m
                for m in self._flush_queue
                if m.state == STATE_IMMUTABLE and m.unique_keys() > threshold
            ]
            bigs.sort(key=lambda m: (m.generation, m.seal_order))
            for m in bigs:
                self._flush_one(m)
                work += 1
            return work

    def _drange_by_id(self, drange_id: int) -> Drange | None:
        for d in self.dmap.dranges:
            if d.drange_id == drange_id:
                return d
        return None

    def _merge_memtables(self, origin: int, smalls: list[Memtable]) -> Memtable:
        """Combine small immutables; survivors stay in memory, logs rotate."""
        merged = Memtable(
            self._next_mid(),
            min(m.generation for m in smalls),
            self.config.tau_bytes,
            origin,
        )
        for m in smalls:
            for key, (value, seq) in m.entries.items():
                merged.put(key, value, seq)
        merged.seal(next(self._seal_orders))
        merged.absorbed_mids = set().union(*(m.absorbed_mids for m in smalls)) | {merged.mid}
        self.lookup.alias_to_memtable(merged.absorbed_mids, merged)
        if self.log_ctx is not None:
            merged.log = self.log_ctx.open_log(self.range_id, merged.mid)
            for key, (value, seq) in merged.sorted_items():
                op = OP_DELETE if value is TOMBSTONE else OP_PUT
                self.log_ctx.append(merged.log, seq, op, key, None if value is TOMBSTONE else value)
            for m in smalls:
                if m.log is not None:
                    self.log_ctx.close_and_delete(m.log)
        drange = self._drange_by_id(origin)
        for m in smalls:
            self.range_index.remove_memtable(m.mid)
            if m in self._flush_queue:
                self._flush_queue.remove(m)
            if drange is not None and m in drange.immutables:
                drange.immutables.remove(m)
        span = merged.span()
        if span is not None:
            self.range_index.add_memtable(merged, span[0], span[1] + 1)
        if drange is not None:
            drange.immutables.append(merged)
        self._flush_queue.append(merged)
        self.merge_count += 1
        return merged

    def _flush_one(self, table: Memtable) -> SSTableDescriptor | None:
        """Convert one sealed memtable into a Level0 SSTable."""
        with self.lock:
            if table not in self._flush_queue:
                return None
            entries = []
            for key, (value, seq) in table.sorted_items():
                if value is TOMBSTONE:
                    entries.append((key, OP_DELETE, seq, None))
                else:
                    entries.append((key, OP_PUT, seq, value))
            self._flush_queue.remove(table)
            drange = self._drange_by_id(table.origin_drange)
            if drange is not None and table in drange.immutables:
                drange.immutables.remove(table)
            if not entries:
                self.range_index.remove_memtable(table.mid)
                self.lookup.invalidate(table.absorbed_mids)
                if table.log is not None and self.log_ctx is not None:
                    self.log_ctx.close_and_delete(table.log)
                return None
            threshold = 0 if self.config.always_flush else self.config.merge_threshold
            older_eligible = any(
                m.state == STATE_IMMUTABLE
                and m is not table
                and m.generation < table.generation
                and m.unique_keys() > threshold
                for m in self._flush_queue
            )
            fno = self.next_file_number()
            built = build_sstable(entries, self.config.block_target)
            desc = self.scatter.scatter(built, self.range_id, fno, level=0)
            if self.manifest is not None:
                self.manifest.append_add(desc)
            self.level(0).tables[fno] = desc
            self.lookup.swing_to_l0(table.absorbed_mids, fno)
            self.range_index.remove_memtable(table.mid)
            self.range_index.add_l0(desc)
            if table.log is not None and self.log_ctx is not None:
                self.log_ctx.close_and_delete(table.log)
            self.flush_count += 1
            self.flush_log.append((table.generation, fno, older_eligible))
            return desc

    def flush_all(self) -> None:
        """Seal and drain everything (shutdown/migration helper)."""
        with self.lock:
            for drange in self.dmap.dranges:
                if drange.active is not None and drange.active.unique_keys() > 0:
                    self._seal_and_dispatch(drange)
            for table in list(self._flush_queue):
                self._flush_one(table)

    def maybe_compact(self) -> None:
        if self.compactor is None:
            return
        if len(self.level(0).tables) >= self.l0_stall_limit():
            self.compactor()

    # -- reorganization ----------------------------------------------------------

    def _maybe_reorganize(self) -> None:
        kind = self.dmap.needs_reorg()
        if kind == "minor":
            before = {d.drange_id: d.interval() for d in self.dmap.dranges}
            self.dmap.minor_reorg()
            self._after_boundary_moves(before, seal=self.config.seal_on_minor_reorg)
        elif kind == "major":
            self._major_reorg()

    def _after_boundary_moves(self, before: dict, seal: bool) -> None:
        boundaries = set()
        for drange in self.dmap.dranges:
            lo, hi = drange.interval()
            if hi > lo:
                boundaries.add(lo)
                boundaries.add(hi)
            old = before.get(drange.drange_id)
            if old == (lo, hi) or drange.active is None:
                continue
            if seal and old is not None:
                self._seal_and_dispatch(drange)
                drange.active.generation = self.dmap.generation
            elif hi > lo:
                # Entries stay behind; the active now also covers the new span.
                self.range_index.extend_memtable(drange.active.mid, lo, hi)
        self.range_index.split_at(boundaries)

    def _major_reorg(self) -> None:
        old_dranges = self.dmap.major_reorg()
        if old_dranges is None:
            return
        orphans: list[Memtable] = []
        for drange in old_dranges:
            if drange.active is not None and drange.active.unique_keys() > 0:
                drange.active.seal(next(self._seal_orders))
                self.range_index.shrink_memtable_to_span(drange.active)
                self._flush_queue.append(drange.active)
                orphans.append(drange.active)
            elif drange.active is not None:
                self.range_index.remove_memtable(drange.active.mid)
                self.lookup.invalidate({drange.active.mid})
                if drange.active.log is not None and self.log_ctx is not None:
                    self.log_ctx.close_and_delete(drange.active.log)
            orphans.extend(drange.immutables)
        for drange in self.dmap.dranges:
            self._attach_active(drange)
        boundaries = set()
        for drange in self.dmap.dranges:
            lo, hi = drange.interval()
            if hi > lo:
                boundaries.update((lo, hi))
        self.range_index.split_at(boundaries)
        if self.manifest is not None:
            self.manifest.append_dranges(self.dmap)
        self.process_flushes()

    # -- reads ---------------------------------------------------------------

    def get(self, key: int):
        if self.gate is not None:
            self.gate.wait(key)
        probes = 0
        hit = self.lookup.lookup(key)
        if hit is not None:
            kind, ref = hit
            if kind == KIND_MEM:
                self.last_get_probes = 1
                found = ref.get(key)
                if found is not None:
                    value = found[0]
                    return None if value is TOMBSTONE else value
            elif kind == KIND_L0:
                desc = self.level(0).tables.get(ref)
                if desc is not None:
                    self.last_get_probes = 1
                    found = self._search_sstable(desc, key)
                    if found is not None:
                        op, seq, value = found
                        return None if op == OP_DELETE else value
        # Miss: only bloom-passing overlapping SSTables at Level1+.
        best = None
        for level in self.levels[1:]:
            for desc in level.overlapping(key, key):
                if desc.bloom is None:
                    self._hydrate_meta(desc)
                if desc.bloom is not None and not desc.bloom.may_contain(key):
                    continue
                probes += 1
                found = self._search_sstable(desc, key)
                if found is not None and (best is None or found[1] > best[1]):
                    best = found
            if best is not None and self.config.early_return_on_level_hit:
                break
        self.last_get_probes = probes
        if best is None:
            return None
        op, seq, value = best
        return None if op == OP_DELETE else value

    def _hydrate_meta(self, desc: SSTableDescriptor) -> None:
        decoded = self.scatter.read_meta_block(desc)
        desc.index = decoded.index
        desc.bloom = decoded.bloom

    def _search_sstable(self, desc: SSTableDescriptor, key: int):
        """Returns (op, seq, value) or None."""
        if desc.index is None:
            self._hydrate_meta(desc)
        from bisect import bisect_right

        firsts = [b.first_key for b in desc.index]
        idx = bisect_right(firsts, key) - 1
        if idx < 0:
            return None
        block = desc.index[idx]
        if key < block.first_key or key > block.last_key:
            return None
        data = self.scatter.read_extent(desc, block.offset, block.length)
        for ekey, op, seq, value in iter_entries(data):
            if ekey == key:
                return (op, seq, value)
        return None

    # -- scans ---------------------------------------------------------------

    def scan(self, start_key: int, count: int) -> list[tuple[int, bytes]]:
        if self.gate is not None:
            self.gate.wait(start_key)
        results: list[tuple[int, bytes]] = []
        if count <= 0:
            return results
        pos = max(start_key, self.range_lo)
        while len(results) < count and pos < self.range_hi:
            memtables, l0_descs, upper = self.range_index.partition_sources(pos)
            sources = []
            for table in memtables:
                items = table.items_from(pos)
                if items:
                    sources.append([(k, v[1], v[0]) for k, v in items])
            for desc in l0_descs:
                sources.append(self._sstable_items(desc, pos, upper))
            with self.lock:
                upper_levels = [
                    desc
                    for level in self.levels[1:]
                    for desc in level.overlapping(pos, upper - 1)
                ]
            for desc in upper_levels:
                sources.append(self._sstable_items(desc, pos, upper))
            merged = heap_merge(*sources, key=lambda e: (e[0], -e[1]))
            last_key = None
            for key, seq, value in merged:
                if key >= upper:
                    break
                if key == last_key:
                    continue  # older version of a key we already resolved
                last_key = key
                if value is TOMBSTONE or value is None:
                    continue
                results.append((key, value))
                if len(results) >= count:
                    break
            pos = upper
        return results

    def _sstable_items(self, desc: SSTableDescriptor, lo: int, hi: int):
        """(key, seq, value) triples with lo <= key < hi; tombstone -> None value."""
        if desc.index is None:
            self._hydrate_meta(desc)
        out = []
        for block in desc.index:
            if block.last_key < lo:
                continue
            if block.first_key >= hi:
                break
            data = self.scatter.read_extent(desc, block.offset, block.length)
            for key, op, seq, value in iter_entries(data):
                if key < lo:
                    continue
                if key >= hi:
                    break
                out.append((key, seq, TOMBSTONE if op == OP_DELETE else value))
        return out

    # -- level0 cleanup (called by compaction) ------------------------------------

    def l0_key_cleanup(self, desc: SSTableDescriptor, keys) -> int:
        return self.lookup.l0_cleanup(desc.file_number, keys)

    # -- metrics -------------------------------------------------------------

    def stats(self) -> dict:
        with self.lock:
            return {
                "writes": self.writes,
                "last_seq": self.last_seq,
                "flushes": self.flush_count,
                "merges": self.merge_count,
                "stall_events": self.stall_events,
                "stall_time_s": self.stall_time_s,
                "l0_tables": len(self.level(0).tables),
                "levels": {lvl.level: len(lvl.tables) for lvl in self.levels},
                "major_reorgs": self.dmap.major_reorgs,
                "minor_reorgs": self.dmap.minor_reorgs,
                "lookup_keys": self.lookup.l0_unique_keys(),
                "lookup_bytes": self.lookup.index_bytes(),
                "drange_shares": self.dmap.shares(),
            }
